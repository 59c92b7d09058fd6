#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cigocc/config.hpp"
#include "cigocc/errors.hpp"
#include "cigocc/io.hpp"
#include "cigocc/metrics.hpp"
#include "cigocc/ndgrad.hpp"
#include "cigocc/pipeline.hpp"
#include "cigocc/semkitti.hpp"

namespace cigocc::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4 };

/// Checkpoint and log locations inside a training output directory.
struct RunPaths {
  fs::path root;
  fs::path stage1() const { return root / "stage1"; }
  fs::path stage2() const { return root / "stage2"; }
  fs::path log(int stage) const { return root / ("stage" + std::to_string(stage) + "_log.jsonl"); }
  fs::path config() const { return root / "config.json"; }
};

inline config::RunConfig load_config(const std::string& path) {
  return path.empty() ? config::RunConfig{} : config::load(path);
}

inline std::vector<pipeline::Scene> scenes_for(const config::RunConfig& cfg, const std::string& data) {
  return data.empty() ? pipeline::make_scenes(cfg) : pipeline::load_scenes(data);
}

inline dmf::DmfParams<float> load_stage1(const config::RunConfig& cfg, const fs::path& dir) {
  if (!fs::exists(dir / "manifest.txt")) throw DataError("no stage-1 checkpoint at " + dir.string());
  auto p = pipeline::stage1_init(cfg);
  nd::assign_params(p.named(), nd::load_checkpoint<float>(dir));
  return p;
}

inline cig::CigParams<float> load_stage2(const config::RunConfig& cfg, const fs::path& dir) {
  if (!fs::exists(dir / "manifest.txt")) throw DataError("no stage-2 checkpoint at " + dir.string());
  auto p = pipeline::stage2_init(cfg);
  nd::assign_params(p.named(), nd::load_checkpoint<float>(dir));
  return p;
}

/// JSON Lines writer, one object per training step.
class LogWriter {
 public:
  explicit LogWriter(const fs::path& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw DataError("cannot write " + path.string());
  }
  void operator()(const pipeline::StepLog& log) { out_ << log.to_json().dump() << '\n'; }

 private:
  std::ofstream out_;
};

inline std::vector<std::string> class_names() { return semkitti::ClassTable::semantic_kitti().names; }

// ---------------------------------------------------------------- commands

struct SynthArgs {
  std::optional<std::uint64_t> seed;
  std::string out, config;
  std::optional<std::size_t> count;
};

inline int run_synth(const SynthArgs& a, std::ostream& out) {
  auto cfg = load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  if (a.count) cfg.scenes = *a.count;
  cfg.validate();
  for (const auto& s : pipeline::make_scenes(cfg)) {
    pipeline::save_scene(fs::path(a.out) / s.name, s.raw);
    out << s.name << " seed " << s.raw.seed << '\n';
  }
  return kOk;
}

struct TrainArgs {
  int stage = 1;
  std::string config, out, data, stage1;
};

inline int run_train(const TrainArgs& a, std::ostream& out) {
  const auto cfg = load_config(a.config);
  const RunPaths paths{a.out};
  fs::create_directories(paths.root);
  io::write_text(paths.config(), config::to_json(cfg).dump(2) + "\n");
  const auto scenes = scenes_for(cfg, a.data);
  if (a.stage == 1) {
    LogWriter log(paths.log(1));
    const auto r = pipeline::train_stage1(cfg, scenes, [&](const pipeline::StepLog& l) { log(l); });
    nd::save_checkpoint(paths.stage1(), r.params.named());
    if (!r.log.empty()) out << "stage 1 final loss " << r.log.back().get("total") << '\n';
    return kOk;
  }
  const fs::path s1dir = a.stage1.empty() ? paths.stage1() : fs::path(a.stage1);
  const auto s1 = load_stage1(cfg, s1dir);
  LogWriter log(paths.log(2));
  const auto r = pipeline::train_stage2(cfg, scenes, s1, [&](const pipeline::StepLog& l) { log(l); });
  nd::save_checkpoint(paths.stage2(), r.params.named());
  if (!r.log.empty()) out << "stage 2 final loss " << r.log.back().get("total") << '\n';
  return kOk;
}

/// Predicted label grids for every scene from a trained run directory.
inline std::vector<semkitti::LabelGrid> predict(const config::RunConfig& cfg, const std::vector<pipeline::Scene>& scenes,
                                                const fs::path& ckpt) {
  const RunPaths paths{ckpt};
  const auto s1 = load_stage1(cfg, paths.stage1());
  const auto s2 = load_stage2(cfg, paths.stage2());
  std::vector<semkitti::LabelGrid> preds;
  for (const auto& s : scenes) {
    const auto g = pipeline::stage1_guidance(s, s1, cfg.proposals);
    preds.push_back(pipeline::stage2_predict(s, g, cig::make_scene_inputs(g.proposals, s.raw.camera), s2));
  }
  return preds;
}

struct EvalArgs {
  std::string config, ckpt, data, report, predictions;
  bool export_cvox = false;
};

/// Report document: {"scenes": [...], "ranges": {range: scores}}.
inline nlohmann::json report_json(const std::vector<pipeline::Scene>& scenes,
                                  const std::vector<metrics::RangeScores>& scores) {
  nlohmann::json names = nlohmann::json::array();
  for (const auto& s : scenes) names.push_back(s.name);
  return {{"scenes", names}, {"ranges", metrics::scores_json(scores, class_names())}};
}

inline int run_eval(const EvalArgs& a, std::ostream& out) {
  const auto cfg = load_config(a.config);
  const auto scenes = scenes_for(cfg, a.data);
  std::vector<semkitti::LabelGrid> preds;
  if (!a.predictions.empty()) {
    for (const auto& s : scenes) preds.push_back(semkitti::read_cvox(fs::path(a.predictions) / (s.name + ".cvox")).grid);
  } else {
    preds = predict(cfg, scenes, a.ckpt);
  }
  metrics::RangeEvaluator ev(pipeline::kClasses, cfg.ranges, cfg.missing);
  for (std::size_t i = 0; i < scenes.size(); ++i) ev.add(preds[i], scenes[i].raw.gt);
  const auto scores = ev.scores();
  const fs::path report(a.report);
  fs::create_directories(report);
  io::write_text(report / "scores.json", report_json(scenes, scores).dump(2) + "\n");
  const auto table = metrics::scores_tsv(scores, class_names());
  io::write_text(report / "scores.tsv", table);
  if (a.export_cvox) {
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      semkitti::write_cvox(report / "predictions" / (scenes[i].name + ".cvox"), preds[i], class_names());
    }
  }
  out << table;
  return kOk;
}

struct VoxelizeArgs {
  std::string depth, camera, out, config;
};

/// Reads a raw little-endian f32 depth image; its sidecar `<depth>.json`
/// holds {"width": W, "height": H}.
inline geometry::DepthMap read_depth(const fs::path& path) {
  fs::path sidecar = path;
  sidecar += ".json";
  if (!fs::exists(sidecar)) throw DataError("depth sidecar " + sidecar.string() + " not found");
  std::size_t w = 0, h = 0;
  try {
    const auto j = nlohmann::json::parse(io::read_text(sidecar));
    w = j.at("width").get<std::size_t>();
    h = j.at("height").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed depth sidecar: " + std::string(e.what()));
  }
  geometry::DepthMap d(w, h);
  d.values = pipeline::f32_values(io::read_file(path), w * h, path.filename().string());
  d.validate();
  return d;
}

inline int run_voxelize(const VoxelizeArgs& a, std::ostream& out) {
  const auto cfg = load_config(a.config);
  nlohmann::json cam_json;
  try {
    cam_json = nlohmann::json::parse(io::read_text(a.camera));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed camera file: " + std::string(e.what()));
  }
  const auto cam = pipeline::camera_from_json(cam_json);
  const auto depth = read_depth(a.depth);
  if (depth.width != cam.width || depth.height != cam.height) throw DataError("depth size does not match the camera");
  const auto occ = geometry::voxelize_points(geometry::backproject_depth(depth, cam), cfg.volume);
  semkitti::LabelGrid grid(occ.spec);
  std::size_t occupied = 0;
  for (std::size_t i = 0; i < occ.values.size(); ++i) {
    grid.values[i] = occ.values[i];
    occupied += occ.values[i];
  }
  semkitti::write_cvox(a.out, grid, {"empty", "occupied"});
  out << occupied << " occupied voxels\n";
  return kOk;
}

struct ExportArgs {
  std::string config, ckpt, data, kitti, out;
};

inline int run_export(const ExportArgs& a, std::ostream& out) {
  if (!a.kitti.empty()) {
    const auto frame = semkitti::read_kitti_frame(a.kitti, semkitti::ClassTable::semantic_kitti());
    semkitti::write_cvox(a.out, frame.labels, class_names());
    out << "wrote " << a.out << '\n';
    return kOk;
  }
  if (a.ckpt.empty()) throw ConfigError("export needs --ckpt or --kitti");
  const auto cfg = load_config(a.config);
  const auto scenes = scenes_for(cfg, a.data);
  const auto preds = predict(cfg, scenes, a.ckpt);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto path = fs::path(a.out) / (scenes[i].name + ".cvox");
    semkitti::write_cvox(path, preds[i], class_names());
    out << "wrote " << path.string() << '\n';
  }
  return kOk;
}

// ---------------------------------------------------------------- entry point

/// Parses and runs one command; library errors map to exit codes.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Two-stage semantic scene completion toolkit"};
  app.require_subcommand(1);

  SynthArgs synth;
  std::uint64_t seed = 0;
  std::size_t count = 0;
  auto* cs = app.add_subcommand("synth", "Write seeded synthetic scenes");
  cs->add_option("--seed", seed, "Base seed (scene i uses seed * 1000 + i)");
  cs->add_option("--count", count, "Number of scenes (default from config)");
  cs->add_option("--config", synth.config, "Run configuration (JSON)");
  cs->add_option("--out", synth.out, "Output directory")->required();

  TrainArgs train;
  auto* ct = app.add_subcommand("train", "Train one stage");
  ct->add_option("--stage", train.stage, "Stage to train")->required()->check(CLI::IsMember({1, 2}));
  ct->add_option("--config", train.config, "Run configuration (JSON)");
  ct->add_option("--out", train.out, "Run directory for checkpoints and logs")->required();
  ct->add_option("--data", train.data, "Scene directory (synthesized from the config when absent)");
  ct->add_option("--stage1", train.stage1, "Stage-1 checkpoint (default <out>/stage1)");

  EvalArgs eval;
  auto* ce = app.add_subcommand("eval", "Score predictions over the evaluation ranges");
  ce->add_option("--config", eval.config, "Run configuration (JSON)");
  auto* ckpt = ce->add_option("--ckpt", eval.ckpt, "Run directory holding stage1/ and stage2/");
  auto* preds = ce->add_option("--predictions", eval.predictions, "Directory of <scene>.cvox predictions");
  ckpt->excludes(preds);
  ce->add_option("--data", eval.data, "Scene directory (synthesized from the config when absent)");
  ce->add_option("--report", eval.report, "Report directory")->required();
  ce->add_flag("--export", eval.export_cvox, "Also write predictions as CVOX");

  VoxelizeArgs vox;
  auto* cv = app.add_subcommand("voxelize", "Back-project a depth image into an occupancy grid");
  cv->add_option("--depth", vox.depth, "Raw f32 depth image with a <depth>.json sidecar")->required();
  cv->add_option("--camera", vox.camera, "Camera JSON")->required();
  cv->add_option("--config", vox.config, "Run configuration supplying the volume");
  cv->add_option("--out", vox.out, "Output CVOX file")->required();

  ExportArgs exp;
  auto* cx = app.add_subcommand("export", "Write label grids as CVOX");
  cx->add_option("--config", exp.config, "Run configuration (JSON)");
  cx->add_option("--ckpt", exp.ckpt, "Run directory holding stage1/ and stage2/");
  cx->add_option("--data", exp.data, "Scene directory (synthesized from the config when absent)");
  cx->add_option("--kitti", exp.kitti, "SemanticKITTI frame stem (<stem>.label, optional .invalid)");
  cx->add_option("--out", exp.out, "Output directory, or file with --kitti")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kConfig;
  }

  try {
    if (cs->parsed()) {
      if (cs->count("--seed")) synth.seed = seed;
      if (cs->count("--count")) synth.count = count;
      return run_synth(synth, out);
    }
    if (ct->parsed()) return run_train(train, out);
    if (ce->parsed()) {
      if (eval.ckpt.empty() && eval.predictions.empty()) throw ConfigError("eval needs --ckpt or --predictions");
      return run_eval(eval, out);
    }
    if (cv->parsed()) return run_voxelize(vox, out);
    if (cx->parsed()) return run_export(exp, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kData;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kData;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}

}  // namespace cigocc::cli
