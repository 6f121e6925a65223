#include <gtest/gtest.h>

#include "support.hpp"

using namespace vfx;
using ad::Mat;
using ad::Tape;
using ad::Var;

namespace {

// Checks every entry of every input against central differences of
// sum(op(inputs) * W) for a fixed random W.
void check_op(std::vector<Mat<double>> inputs,
              const std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>& op, double tol = 1e-7) {
  ParamStore<double> store;
  for (std::size_t i = 0; i < inputs.size(); ++i) store.add("in" + std::to_string(i), inputs[i]);
  Rng rng(99);
  Mat<double> w;
  auto loss = [&](Tape<double>& tp) {
    std::vector<Var<double>> vs;
    for (std::size_t i = 0; i < inputs.size(); ++i) vs.push_back(tp.param(store.at("in" + std::to_string(i))));
    Var<double> y = op(tp, vs);
    if (w.size() == 0) w = randn<double>(y.rows(), y.cols(), 1.0, rng);
    return ad::sum(ad::mul(y, tp.constant(w)));
  };
  std::vector<std::pair<std::string, ad::Index>> entries;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    for (ad::Index k = 0; k < inputs[i].size(); ++k) entries.emplace_back("in" + std::to_string(i), k);
  for (const auto& r : test::grad_check(store, loss, entries))
    EXPECT_LT(r.rel_error, tol) << r.name << "[" << r.index << "] analytic " << r.analytic << " numeric " << r.numeric;
}

Mat<double> rnd(ad::Index r, ad::Index c, std::uint64_t seed) {
  Rng rng(seed);
  return randn<double>(r, c, 1.0, rng);
}

}  // namespace

TEST(Autograd, MatmulVariants) {
  check_op({rnd(3, 4, 1), rnd(4, 5, 2)}, [](auto&, const auto& v) { return ad::matmul(v[0], v[1]); });
  check_op({rnd(3, 4, 3), rnd(5, 4, 4)}, [](auto&, const auto& v) { return ad::matmul_nt(v[0], v[1]); });
}

TEST(Autograd, Elementwise) {
  check_op({rnd(3, 4, 5), rnd(3, 4, 6)}, [](auto&, const auto& v) { return ad::add(v[0], v[1]); });
  check_op({rnd(3, 4, 7), rnd(3, 4, 8)}, [](auto&, const auto& v) { return ad::sub(v[0], v[1]); });
  check_op({rnd(3, 4, 9), rnd(3, 4, 10)}, [](auto&, const auto& v) { return ad::mul(v[0], v[1]); });
  check_op({rnd(3, 4, 11)}, [](auto&, const auto& v) { return ad::scale(v[0], 1.7); });
  check_op({rnd(3, 4, 12)}, [](auto&, const auto& v) { return ad::add_scalar(v[0], 0.3); });
  check_op({rnd(3, 4, 13), rnd(1, 4, 14)}, [](auto&, const auto& v) { return ad::add_row(v[0], v[1]); });
}

TEST(Autograd, Activations) {
  check_op({rnd(4, 6, 15)}, [](auto&, const auto& v) { return ad::silu(v[0]); });
  check_op({rnd(4, 6, 16)}, [](auto&, const auto& v) { return ad::gelu(v[0]); });
  check_op({rnd(4, 6, 17)}, [](auto&, const auto& v) { return ad::layer_norm(v[0]); });
}

TEST(Autograd, Structural) {
  check_op({rnd(4, 3, 18)}, [](auto&, const auto& v) { return ad::gather_rows(v[0], {3, 0, 0, 2, 3}); });
  check_op({rnd(2, 3, 19), rnd(3, 3, 20)}, [](auto&, const auto& v) { return ad::concat_rows<double>({v[0], v[1]}); });
  check_op({rnd(3, 2, 21), rnd(3, 4, 22)}, [](auto&, const auto& v) { return ad::concat_cols<double>({v[0], v[1]}); });
  check_op({rnd(5, 4, 23)}, [](auto&, const auto& v) { return ad::slice_rows(v[0], 1, 3); });
  check_op({rnd(5, 4, 24)}, [](auto&, const auto& v) { return ad::slice_cols(v[0], 1, 2); });
  check_op({rnd(2, 6, 25)}, [](auto&, const auto& v) { return ad::reshape(v[0], 4, 3); });
}

TEST(Autograd, RopeAndAttention) {
  Mat<double> ang = rnd(6, 2, 26);
  Mat<double> c = ang.array().cos(), s = ang.array().sin();
  check_op({rnd(6, 8, 27)}, [&](auto&, const auto& v) { return ad::rope(v[0], c, s, 2); });
  check_op({rnd(6, 8, 28), rnd(10, 8, 29), rnd(10, 8, 30)},
           [](auto&, const auto& v) { return ad::attention(v[0], v[1], v[2], 2, 2); });
}

TEST(Autograd, Reductions) {
  Mat<double> target = rnd(3, 3, 31);
  check_op({rnd(3, 3, 32)}, [&](auto& tp, const auto& v) { return ad::add(ad::mse(v[0], target), ad::sum(v[0])); });
}

TEST(Autograd, RopeIsARotation) {
  Mat<double> ang = rnd(4, 3, 33);
  Mat<double> c = ang.array().cos(), s = ang.array().sin();
  Tape<double> tp(false);
  Mat<double> x = rnd(4, 12, 34);
  Mat<double> y = ad::rope(tp.constant(x), c, s, 2).value();
  for (ad::Index r = 0; r < 4; ++r) EXPECT_NEAR(x.row(r).norm(), y.row(r).norm(), 1e-12);
}

TEST(Autograd, AttentionRowsAreStochastic) {
  Tape<float> tp(false);
  Rng rng(35);
  std::vector<Mat<float>> probs;
  ad::attention(tp.constant(randn<float>(6, 8, 1.0, rng)), tp.constant(randn<float>(10, 8, 1.0, rng)),
                tp.constant(randn<float>(10, 8, 1.0, rng)), 2, 2, &probs);
  ASSERT_EQ(probs.size(), 4u);
  for (const auto& p : probs)
    for (ad::Index r = 0; r < p.rows(); ++r) EXPECT_NEAR(p.row(r).sum(), 1.0f, 1e-5f);
}

TEST(Autograd, FrozenParamsGetNoGradient) {
  ParamStore<double> store;
  auto& a = store.add("a", rnd(2, 2, 36));
  auto& b = store.add("b", rnd(2, 2, 37), true);
  Tape<double> tp;
  tp.backward(ad::sum(ad::mul(tp.param(a), tp.param(b))));
  EXPECT_GT(a.grad.norm(), 0);
  EXPECT_EQ(b.grad.norm(), 0);
}

TEST(Autograd, BackwardNeedsScalarAndRecording) {
  Tape<double> rec;
  EXPECT_THROW(rec.backward(rec.constant(rnd(2, 2, 38))), RuntimeFailure);
  Tape<double> off(false);
  EXPECT_THROW(off.backward(off.constant(rnd(1, 1, 39))), RuntimeFailure);
}
