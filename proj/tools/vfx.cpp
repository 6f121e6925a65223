// vfx: command-line entry point. Exit codes: 0 ok, 2 usage, 3 validation,
// 1 runtime failure. Failures print one line "error: <category>: <message>".

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "vfx/vfx.hpp"

using namespace vfx;

namespace {

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::usage: return 2;
    case ErrorKind::validation: return 3;
    case ErrorKind::runtime: return 1;
  }
  return 1;
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

int fail(const char* category, const std::string& msg, int code) {
  std::cerr << "error: " << category << ": " << one_line(msg) << "\n";
  return code;
}

// Resolved config next to a file output, or inside a directory output.
fs::path resolved_path(const fs::path& out, bool out_is_dir) {
  return (out_is_dir ? out : (out.has_parent_path() ? out.parent_path() : fs::path("."))) / "resolved_config.json";
}

VideoClip load_reference_frame(const fs::path& p) {
  if (!fs::exists(p)) throw ValidationError("missing file: reference " + p.string());
  if (fs::is_directory(p)) {
    VideoClip c = load_clip(p);
    if (c.frames == 0) throw ValidationError("reference directory has no frames: " + p.string());
    return c;
  }
  const io::Image8 img = io::read_png(p);
  VideoClip c(1, img.height, img.width, img.channels);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) c.data[i] = img.pixels[i] / 255.0f;
  return c;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string spec, out;
  std::optional<std::uint64_t> seed;
  std::optional<int> count;
};

int cmd_synth(const SynthArgs& a) {
  SynthConfig cfg = SynthConfig::from_json(read_json_file(a.spec, "synth spec"), "synth spec");
  if (a.seed) cfg.seed = *a.seed;
  if (a.count) cfg.count = *a.count;
  cfg.validate();
  const auto items = synthesize(cfg);
  const DatasetManifest m = write_dataset(to_records(items), a.out);
  json specs = json::array();
  for (const auto& it : items) {
    const auto& s = it.spec;
    specs.push_back({{"kind", to_string(s.kind)}, {"start", s.t_start}, {"end", s.t_end}, {"seed", s.seed},
                     {"object", {s.object.x, s.object.y, s.object.size}}, {"two_objects", s.distractor.has_value()}});
  }
  write_json_file(fs::path(a.out) / "specs.json", specs);
  write_json_file(resolved_path(a.out, true), json{{"command", "data synth"}, {"synth", cfg.to_json()}});
  std::cout << "wrote " << m.size() << " clips to " << a.out << "\n";
  return 0;
}

struct AugmentArgs {
  std::string manifest, out;
  std::uint64_t seed = 0;
  int copies = 1;
};

int cmd_augment(const AugmentArgs& a) {
  require(a.copies >= 1, "augment: --copies must be >= 1");
  const DatasetManifest in = load_manifest(a.manifest);
  const auto recs = load_records(in);
  std::vector<ClipRecord> out(recs.size() * static_cast<std::size_t>(a.copies));
  parallel_for(static_cast<int>(out.size()), [&](int j) {
    const std::size_t i = static_cast<std::size_t>(j) / a.copies, k = static_cast<std::size_t>(j) % a.copies;
    const ClipRecord& r = recs[i];
    Rng rng(mix_seed(a.seed, i, k, 11));
    AugmentResult res = temporal_augment(r.clip, r.annotation, rng, r.mask ? &*r.mask : nullptr);
    out[j] = {res.clip, res.annotation, res.mask, r.prompt, r.category};
  });
  write_dataset(out, a.out);
  write_json_file(resolved_path(a.out, true),
                  json{{"command", "data augment"}, {"manifest", a.manifest}, {"seed", a.seed}, {"copies", a.copies}});
  std::cout << "wrote " << out.size() << " augmented clips to " << a.out << "\n";
  return 0;
}

struct AnnotateArgs {
  std::string clip, out, prompt = "", category = "";
  double threshold = 0.5;
  int grid_step = 4;
  int fps = 8;
  std::string detector = "both";
  std::uint64_t seed = 0;
};

int cmd_annotate(const AnnotateArgs& a) {
  if (!fs::is_directory(a.clip)) throw ValidationError("missing file: clip directory " + a.clip);
  require(a.fps > 0, "annotate: --fps must be positive");
  ExtractorConfig ec;
  ec.motion_threshold = a.threshold;
  ec.grid_step = a.grid_step;
  ec.use_tracker = a.detector != "intensity";
  ec.use_intensity = a.detector != "tracker";
  const VideoClip clip = load_clip(a.clip, a.fps);
  const TimestampAnnotation ann = annotate_clip(clip, ec);
  ManifestRecord r;
  r.clip = a.clip;
  r.annotation = ann;
  r.fps = a.fps;
  r.prompt = a.prompt;
  r.category = a.category;
  write_json_file(a.out, to_json(r));
  write_json_file(resolved_path(a.out, false),
                  json{{"command", "annotate"}, {"clip", a.clip}, {"threshold", a.threshold}, {"grid_step", a.grid_step},
                       {"detector", a.detector}, {"fps", a.fps}, {"seed", a.seed}});
  std::cout << "start " << ann.t_start << " end " << ann.t_end << " of " << ann.total_frames << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, manifest, out, init;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
};

int cmd_train(const TrainArgs& a) {
  RunConfig rc = RunConfig::from_json(read_json_file(a.config, "train config"));
  if (a.seed) rc.train.seed = *a.seed;
  if (a.steps) rc.train.steps = *a.steps;
  if (!a.init.empty()) rc.init = a.init;
  rc.validate();
  const auto recs = load_records(load_manifest(a.manifest));
  if (recs.empty()) throw ValidationError("manifest has no records: " + a.manifest);

  std::unique_ptr<Model<float>> model;
  if (rc.train.stage == "base") {
    model = std::make_unique<Model<float>>(*rc.model, rc.train.seed);
  } else {
    model = load_checkpoint<float>(rc.init);
    const ModelConfig& mc = model->config();
    if (mc.strategy != TemporalStrategy::none || mc.lora_rank != 0 || mc.control)
      throw ValidationError("init checkpoint already carries adapters: " + rc.init);
    prepare_adapters(*model, rc.train);
  }
  const ClipSetSource source(model->config(), recs, rc.train.augment);

  fs::create_directories(a.out);
  json resolved = rc.to_json();
  resolved["command"] = "train";
  resolved["manifest"] = a.manifest;
  resolved["model"] = model->config().to_json();
  write_json_file(fs::path(a.out) / "resolved_config.json", resolved);

  std::ofstream log(fs::path(a.out) / "train_log.jsonl");
  if (!log) throw RuntimeFailure("cannot write training log in " + a.out);
  Trainer<float> trainer(*model, rc.train, source);
  const auto t0 = std::chrono::steady_clock::now();
  const int every = std::max(1, rc.train.steps / 20);
  trainer.run([&](const StepStats& s) {
    log << s.to_json().dump() << "\n";
    if ((s.step + 1) % every == 0 || s.step + 1 == rc.train.steps) {
      const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::fprintf(stderr, "step %d/%d loss %.5f lr %.2e (%.0fs)\n", s.step + 1, rc.train.steps, s.loss, s.lr, sec);
    }
  });
  log.flush();
  save_checkpoint(*model, a.out, json{{"stage", rc.train.stage}, {"steps", trainer.steps_done()}, {"seed", rc.train.seed}});
  std::cout << "saved " << (fs::path(a.out) / kCheckpointFile).string() << "\n";
  return 0;
}

struct SampleArgs {
  std::string ckpt, ref, prompt, out, mask;
  double start = 0, end = 1;
  std::uint64_t seed = 0;
  int steps = 50;
  int fps = 8;
};

int cmd_sample(const SampleArgs& a) {
  const auto model = load_checkpoint<float>(a.ckpt);
  const ModelConfig& mc = model->config();
  const VideoClip ref = load_reference_frame(a.ref);
  if (ref.height != mc.height || ref.width != mc.width || ref.channels != mc.channels)
    throw ValidationError("reference is " + std::to_string(ref.height) + "x" + std::to_string(ref.width) + "x" +
                          std::to_string(ref.channels) + ", model expects " + std::to_string(mc.height) + "x" +
                          std::to_string(mc.width) + "x" + std::to_string(mc.channels));
  if (!(a.start >= 0 && a.start < a.end && a.end <= 1)) throw ValidationError("need 0 <= --start < --end <= 1");
  const TimestampAnnotation target = TimestampAnnotation::from_normalized(a.start, a.end, mc.frames);
  std::optional<MaskSequence> mask;
  if (!a.mask.empty()) {
    if (!fs::is_directory(a.mask)) throw ValidationError("missing file: mask directory " + a.mask);
    mask = load_mask(a.mask);
    if (mask->frames != mc.frames || mask->height != mc.height || mask->width != mc.width)
      throw ValidationError("mask shape does not match the model clip shape");
  }
  if (mc.control && !mask) throw ValidationError("this checkpoint has a control branch; pass --mask");
  SampleRequest q;
  q.reference = mc.codec().encode_reference(ref, 0);
  q.cond = make_condition(mc, encode_text<float>(a.prompt, mc.d_tau, mc.text_len), target, mask ? &*mask : nullptr);
  q.seed = a.seed;
  const VideoClip clip = sample_clips(*model, {q}, a.steps, a.fps).front();
  save_clip(clip, a.out);
  write_json_file(fs::path(a.out) / "resolved_config.json",
                  json{{"command", "sample"}, {"ckpt", a.ckpt}, {"ref", a.ref}, {"prompt", a.prompt},
                       {"start", a.start}, {"end", a.end}, {"target_frames", {target.t_start, target.t_end}},
                       {"seed", a.seed}, {"steps", a.steps}, {"fps", a.fps}, {"mask", a.mask.empty() ? json(nullptr) : json(a.mask)},
                       {"model", mc.to_json()}});
  std::cout << "wrote " << clip.frames << " frames to " << a.out << "\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt, manifest, out, config, samples;
  std::optional<int> pairs, steps;
  std::optional<std::uint64_t> seed;
};

int cmd_eval(const EvalArgs& a) {
  EvalProtocolConfig ec;
  if (!a.config.empty()) ec = EvalProtocolConfig::from_json(read_json_file(a.config, "eval config"), "eval config");
  if (a.pairs) ec.pairs = *a.pairs;
  if (a.seed) ec.seed = *a.seed;
  if (a.steps) ec.sample_steps = *a.steps;
  const auto model = load_checkpoint<float>(a.ckpt);
  const auto refs = to_references(load_records(load_manifest(a.manifest)));
  for (const auto& r : refs) ec.validate(r.clip.frames);
  const EvalSampler inner = model_sampler(*model, refs, ec.sample_steps);
  std::vector<VideoClip> clips;
  const EvalSampler sampler = [&](const std::vector<EvalJob>& jobs) {
    clips = inner(jobs);
    return clips;
  };
  const EvalReport rep = run_eval_protocol(sampler, refs, ec);
  json j = rep.to_json();
  double dd = 0;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const double d = dynamic_degree_proxy(clips[i]);
    j["samples"][i]["dynamic_degree"] = d;
    dd += d;
  }
  j["dynamic_degree"] = clips.empty() ? 0.0 : dd / static_cast<double>(clips.size());
  j["config"] = ec.to_json();
  write_json_file(a.out, j);
  if (!a.samples.empty())
    for (std::size_t i = 0; i < clips.size(); ++i) save_clip(clips[i], fs::path(a.samples) / indexed_name("sample", i));
  json resolved{{"command", "eval"}, {"ckpt", a.ckpt}, {"manifest", a.manifest}, {"eval", ec.to_json()}};
  write_json_file(resolved_path(a.out, false), resolved);
  for (const auto& r : rep.rows)
    std::printf("%-10s T_IoU %.3f  E_f %.2f  E_s %.3f  failures %d/%d\n", r.category.c_str(), r.t_iou, r.e_f, r.e_s,
                r.failures, r.samples);
  std::printf("%-10s T_IoU %.3f  E_f %.2f  E_s %.3f  failures %d/%d\n", "average", rep.average.t_iou, rep.average.e_f,
              rep.average.e_s, rep.average.failures, rep.average.samples);
  return 0;
}

int cmd_inspect(const std::string& ckpt) {
  const CheckpointHeader h = read_checkpoint_header(ckpt);
  std::size_t total = 0, trainable = 0;
  std::map<std::string, std::size_t> groups;
  for (const auto& p : h.header.at("params")) {
    const auto shape = p.at("shape").get<std::vector<std::size_t>>();
    const std::size_t n = shape.at(0) * shape.at(1);
    const std::string name = p.at("name").get<std::string>();
    total += n;
    if (!p.at("frozen").get<bool>()) trainable += n;
    std::string g = "base";
    if (name.find(".lora_") != std::string::npos) g = "lora";
    else if (name.rfind("control.", 0) == 0) g = "control";
    else if (!Model<float>::is_base(name)) g = "temporal";
    groups[g] += n;
  }
  json out{{"config", h.config.to_json()}, {"meta", h.header.value("meta", json::object())},
           {"parameters", {{"total", total}, {"trainable", trainable}, {"frozen", total - trainable}}}};
  for (const auto& [g, n] : groups) out["parameters"]["groups"][g] = n;
  std::cout << out.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vfx: timestamp- and mask-controlled effect animation at toy scale"};
  app.require_subcommand(1);

  auto* data = app.add_subcommand("data", "synthesize or augment datasets");
  data->require_subcommand(1);
  SynthArgs synth;
  auto* synth_cmd = data->add_subcommand("synth", "generate synthetic effect clips from a scene spec");
  synth_cmd->add_option("--spec", synth.spec, "synth spec JSON")->required();
  synth_cmd->add_option("--out", synth.out, "output directory")->required();
  synth_cmd->add_option("--seed", synth.seed, "overrides the spec seed");
  synth_cmd->add_option("--count", synth.count, "overrides the spec count");
  AugmentArgs aug;
  auto* aug_cmd = data->add_subcommand("augment", "re-time every clip of a manifest");
  aug_cmd->add_option("--manifest", aug.manifest)->required();
  aug_cmd->add_option("--seed", aug.seed);
  aug_cmd->add_option("--copies", aug.copies, "augmented copies per record");
  aug_cmd->add_option("--out", aug.out)->required();

  AnnotateArgs ann;
  auto* ann_cmd = app.add_subcommand("annotate", "extract motion start/end from a frame directory");
  ann_cmd->add_option("--clip", ann.clip, "frame directory")->required();
  ann_cmd->add_option("--threshold", ann.threshold, "tracker motion threshold in pixels per frame");
  ann_cmd->add_option("--grid-step", ann.grid_step);
  ann_cmd->add_option("--detector", ann.detector)->check(CLI::IsMember({"both", "tracker", "intensity"}));
  ann_cmd->add_option("--fps", ann.fps);
  ann_cmd->add_option("--prompt", ann.prompt);
  ann_cmd->add_option("--category", ann.category);
  ann_cmd->add_option("--seed", ann.seed);
  ann_cmd->add_option("--out", ann.out, "annotation JSON")->required();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "train the base model or adapters");
  train_cmd->add_option("--config", train.config, "run config JSON")->required();
  train_cmd->add_option("--manifest", train.manifest)->required();
  train_cmd->add_option("--out", train.out, "checkpoint directory")->required();
  train_cmd->add_option("--init", train.init, "base checkpoint (adapter stage)");
  train_cmd->add_option("--seed", train.seed);
  train_cmd->add_option("--steps", train.steps);

  SampleArgs sample;
  auto* sample_cmd = app.add_subcommand("sample", "animate a reference image");
  sample_cmd->add_option("--ckpt", sample.ckpt)->required();
  sample_cmd->add_option("--ref", sample.ref, "reference PNG or frame directory")->required();
  sample_cmd->add_option("--prompt", sample.prompt)->required();
  sample_cmd->add_option("--start", sample.start, "normalized start");
  sample_cmd->add_option("--end", sample.end, "normalized end");
  sample_cmd->add_option("--mask", sample.mask, "mask frame directory (control branch)");
  sample_cmd->add_option("--seed", sample.seed);
  sample_cmd->add_option("--steps", sample.steps, "sampler steps");
  sample_cmd->add_option("--fps", sample.fps);
  sample_cmd->add_option("--out", sample.out, "output frame directory")->required();

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "run the timestamp evaluation protocol");
  eval_cmd->add_option("--ckpt", ev.ckpt)->required();
  eval_cmd->add_option("--manifest", ev.manifest, "reference clips")->required();
  eval_cmd->add_option("--config", ev.config, "eval protocol JSON");
  eval_cmd->add_option("--pairs", ev.pairs);
  eval_cmd->add_option("--seed", ev.seed);
  eval_cmd->add_option("--steps", ev.steps, "sampler steps");
  eval_cmd->add_option("--samples", ev.samples, "also write generated clips here");
  eval_cmd->add_option("--out", ev.out, "report JSON")->required();

  std::string inspect_ckpt;
  auto* inspect_cmd = app.add_subcommand("inspect", "print a checkpoint's config and parameter counts");
  inspect_cmd->add_option("--ckpt", inspect_ckpt)->required();

  if (argc > 1 && argv[1][0] != '-') {
    bool known = false;
    for (const auto* s : app.get_subcommands({})) known = known || s->check_name(argv[1]);
    if (!known) {
      std::cerr << app.help();
      return fail("usage", "unknown subcommand '" + std::string(argv[1]) + "'", 2);
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help();
    return fail("usage", e.what(), 2);
  }

  try {
    if (*synth_cmd) return cmd_synth(synth);
    if (*aug_cmd) return cmd_augment(aug);
    if (*ann_cmd) return cmd_annotate(ann);
    if (*train_cmd) return cmd_train(train);
    if (*sample_cmd) return cmd_sample(sample);
    if (*eval_cmd) return cmd_eval(ev);
    if (*inspect_cmd) return cmd_inspect(inspect_ckpt);
    return fail("usage", "no subcommand", 2);
  } catch (const Error& e) {
    return fail(e.category(), e.what(), exit_code(e.kind()));
  } catch (const json::exception& e) {
    return fail("validation", e.what(), 3);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 1);
  }
}
