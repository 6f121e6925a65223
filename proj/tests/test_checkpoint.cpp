#include <gtest/gtest.h>

#include <fstream>

#include "support.hpp"

using namespace vfx;
using ad::Mat;

namespace {

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_bytes(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

// Replaces the JSON header of a checkpoint file, keeping the blobs.
void rewrite_header(const fs::path& p, const std::function<void(json&)>& edit) {
  const std::string bytes = read_bytes(p);
  std::uint64_t n = 0;
  for (int i = 0; i < 8; ++i) n |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  json h = json::parse(bytes.substr(16, n));
  edit(h);
  const std::string text = h.dump();
  std::string out = bytes.substr(0, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((text.size() >> (8 * i)) & 0xFF));
  out += text + bytes.substr(16 + n);
  write_bytes(p, out);
}

Mat<float> run(const Model<float>& m, const ForwardBatch<float>& in) {
  ad::Tape<float> tp(false);
  return m.forward(tp, in).value();
}

}  // namespace

TEST(Checkpoint, RoundTripKeepsWeightsFlagsAndOutputs) {
  const auto dir = test::scratch_dir("ckpt_roundtrip");
  ModelConfig cfg = test::tiny_config();
  Model<float> m(cfg, 1);
  Rng rng(1);
  test::perturb(m.params(), 0.1, rng);
  TrainConfig tc;
  tc.lora_rank = 2;
  tc.control = true;
  prepare_adapters(m, tc);
  test::perturb(m.params(), 0.05, rng);
  save_checkpoint(m, dir, json{{"step", 7}});
  ASSERT_TRUE(fs::exists(dir / kCheckpointFile));

  json meta;
  const auto back = load_checkpoint<float>(dir, &meta);
  EXPECT_EQ(meta["step"], 7);
  EXPECT_EQ(back->config().to_json(), m.config().to_json());
  ASSERT_EQ(back->params().size(), m.params().size());
  for (const auto& p : m.params()) {
    const Param<float>& q = back->params().at(p->name);
    EXPECT_EQ(q.value, p->value) << p->name;
    EXPECT_EQ(q.frozen, p->frozen) << p->name;
  }
  const auto in = test::random_batch<float>(m.config(), 2, rng);
  EXPECT_EQ(run(*back, in), run(m, in));
}

TEST(Checkpoint, DoubleModelStoresFloat32) {
  const auto file = test::scratch_dir("ckpt_double") / "m.ckpt";
  Model<double> m(test::tiny_config(), 2);
  Rng rng(2);
  test::perturb(m.params(), 0.1, rng);
  save_checkpoint(m, file);
  const auto back = load_checkpoint<double>(file);
  for (const auto& p : m.params()) {
    const Mat<double> want = p->value.cast<float>().cast<double>();
    EXPECT_EQ(back->params().at(p->name).value, want);
  }
}

TEST(Checkpoint, ControlFollowsParameterPrefix) {
  const auto dir = test::scratch_dir("ckpt_control");
  ModelConfig cfg = test::tiny_config();
  Model<float> plain(cfg, 3);
  save_checkpoint(plain, dir / "plain.ckpt");
  rewrite_header(dir / "plain.ckpt", [](json& h) { h["config"]["control"] = true; });
  EXPECT_FALSE(load_checkpoint<float>(dir / "plain.ckpt")->config().control);

  cfg.control = true;
  Model<float> ctl(cfg, 3);
  save_checkpoint(ctl, dir / "ctl.ckpt");
  rewrite_header(dir / "ctl.ckpt", [](json& h) { h["config"]["control"] = false; });
  const auto back = load_checkpoint<float>(dir / "ctl.ckpt");
  EXPECT_TRUE(back->config().control);
  EXPECT_TRUE(back->params().contains("control.zero.0.weight"));
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  const auto dir = test::scratch_dir("ckpt_corrupt");
  Model<float> m(test::tiny_config(), 4);
  const fs::path good = dir / "good.ckpt";
  save_checkpoint(m, good);
  const std::string bytes = read_bytes(good);

  EXPECT_THROW(load_checkpoint<float>(dir / "absent.ckpt"), ValidationError);
  auto expect_bad = [&](const std::string& content, const std::string& needle) {
    const fs::path p = dir / "bad.ckpt";
    write_bytes(p, content);
    try {
      load_checkpoint<float>(p);
      ADD_FAILURE() << "accepted: " << needle;
    } catch (const ValidationError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_bad("NOTACKPT" + bytes.substr(8), "not a checkpoint");
  expect_bad(bytes.substr(0, 12), "not a checkpoint");
  expect_bad(bytes.substr(0, 40), "truncated checkpoint header");
  expect_bad(bytes.substr(0, bytes.size() - 4), "truncated checkpoint blobs");
  expect_bad(bytes + "xx", "trailing bytes");
  std::string garbled = bytes;
  garbled[17] = '#';
  expect_bad(garbled, "corrupt checkpoint header");

  const fs::path p = dir / "edited.ckpt";
  write_bytes(p, bytes);
  rewrite_header(p, [](json& h) { h["params"][0]["shape"] = {1, 1}; });
  EXPECT_THROW(load_checkpoint<float>(p), ValidationError);
  write_bytes(p, bytes);
  rewrite_header(p, [](json& h) { h["params"][0]["name"] = "nope.weight"; });
  EXPECT_THROW(load_checkpoint<float>(p), ValidationError);
  write_bytes(p, bytes);
  rewrite_header(p, [](json& h) { h["config"]["d_model"] = "wide"; });
  EXPECT_THROW(load_checkpoint<float>(p), ValidationError);
}
