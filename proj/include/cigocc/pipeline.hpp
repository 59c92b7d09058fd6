#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cigocc/cignet.hpp"
#include "cigocc/config.hpp"
#include "cigocc/dmfnet.hpp"
#include "cigocc/errors.hpp"
#include "cigocc/io.hpp"
#include "cigocc/metrics.hpp"
#include "cigocc/ndgrad.hpp"
#include "cigocc/objective.hpp"
#include "cigocc/semkitti.hpp"

namespace cigocc::pipeline {

using config::RunConfig;
using nd::Tensor;
using semkitti::LabelGrid;
using semkitti::SynthScene;

inline constexpr std::size_t kClasses = 20;
inline constexpr std::size_t kMaskFactor = 16;

/// Palette classes used as the 2D semantic feature stand-in.
inline const std::vector<std::uint16_t>& feature_classes() {
  using P = semkitti::Palette;
  static const std::vector<std::uint16_t> ids{P::road, P::building, P::car, P::pole};
  return ids;
}

/// A synthetic scene with every training input derived once.
struct Scene {
  std::string name;
  SynthScene raw;
  Tensor<float> image;         // (3, H, W)
  Tensor<float> f_i;           // (4, H, W) smoothed palette one-hot
  geometry::OccupancyGrid occ; // lifted depth
  std::vector<std::uint16_t> gt_binary;
  Tensor<float> mask_targets;  // (19, H/16, W/16)
};

inline Scene prepare_scene(SynthScene s, std::string name = {}) {
  Scene out;
  out.name = std::move(name);
  const std::size_t W = s.camera.width, H = s.camera.height;
  if (s.image.size() != 3 * W * H || s.mask.size() != W * H) throw DataError("scene image does not match its camera");
  out.image = Tensor<float>({3, H, W}, s.image);
  out.f_i = dmf::one_hot_features<float>(s.mask, W, H, feature_classes());
  out.occ = dmf::depth_occupancy(s.depth, s.camera, s.spec);
  out.gt_binary.resize(s.gt.values.size());
  for (std::size_t i = 0; i < s.gt.values.size(); ++i) {
    const auto g = s.gt.values[i];
    out.gt_binary[i] = g == semkitti::kIgnore ? semkitti::kIgnore : static_cast<std::uint16_t>(g != 0);
  }
  const auto down = cig::downsample_majority(s.mask, W, H, kMaskFactor);
  out.mask_targets = cig::mask_targets<float>(down, W / kMaskFactor, H / kMaskFactor, kClasses - 1);
  out.raw = std::move(s);
  return out;
}

inline std::uint64_t scene_seed(const RunConfig& cfg, std::size_t i) { return cfg.seed * 1000 + i; }

inline std::string scene_name(std::size_t i) {
  std::string digits = std::to_string(i);
  if (digits.size() < 3) digits.insert(0, 3 - digits.size(), '0');
  return "scene_" + digits;
}

inline std::vector<Scene> make_scenes(const RunConfig& cfg) {
  const auto cam = cfg.resolved_camera();
  semkitti::SynthOptions opts;
  opts.image_width = cfg.image_width;
  opts.image_height = cfg.image_height;
  std::vector<Scene> scenes;
  for (std::size_t i = 0; i < cfg.scenes; ++i) {
    scenes.push_back(prepare_scene(semkitti::synth_scene(scene_seed(cfg, i), cfg.volume, cam, opts), scene_name(i)));
  }
  return scenes;
}

/// Inverse-frequency weights over the classes present in the scenes' ground
/// truth, normalised to mean 1 among them; absent classes weigh 1.
inline std::vector<double> scene_class_weights(const std::vector<Scene>& scenes) {
  std::vector<double> counts(kClasses, 0.0);
  for (const auto& s : scenes)
    for (const auto v : s.raw.gt.values)
      if (v < kClasses) counts[v] += 1;
  std::vector<double> freqs;
  std::vector<std::size_t> present;
  for (std::size_t c = 0; c < kClasses; ++c)
    if (counts[c] > 0) {
      present.push_back(c);
      freqs.push_back(counts[c]);
    }
  if (present.empty()) throw DataError("scenes contain no labelled voxels");
  const auto w = objective::class_weights(freqs);
  std::vector<double> out(kClasses, 1.0);
  for (std::size_t k = 0; k < present.size(); ++k) out[present[k]] = w[k];
  return out;
}

inline std::vector<double> ssc_weights(const RunConfig& cfg, const std::vector<Scene>& scenes) {
  switch (cfg.weighting) {
    case config::ClassWeighting::uniform: return std::vector<double>(kClasses, 1.0);
    case config::ClassWeighting::scenes: return scene_class_weights(scenes);
    case config::ClassWeighting::semantic_kitti: break;
  }
  return objective::class_weights(semkitti::ClassTable::semantic_kitti().frequencies);
}

// ---------------------------------------------------------------- optimisation

struct StepLog {
  std::size_t step = 0;
  std::vector<std::pair<std::string, double>> values;

  nlohmann::json to_json() const {
    nlohmann::json j{{"step", step}};
    for (const auto& [k, v] : values) j[k] = v;
    return j;
  }
  double get(const std::string& key) const {
    for (const auto& [k, v] : values)
      if (k == key) return v;
    throw Error("no logged value " + key);
  }
};

using StepCallback = std::function<void(const StepLog&)>;

namespace detail {

inline void require_finite(const StepLog& log) {
  for (const auto& [k, v] : log.values) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite " + k);
    }
  }
}

// Scales gradients down to `clip` global norm when it is exceeded.
inline void apply_step(nd::SgdMomentum<float>& opt, const nd::NamedParams<float>& params, double clip) {
  const double norm = nd::SgdMomentum<float>::grad_norm(params);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  const double scale = clip > 0 && norm > clip ? clip / norm : 1.0;
  opt.step(params, static_cast<float>(scale));
}

// Runs one training step, labelling numeric failures with the stage and step.
template <class F>
void run_step(const char* stage, std::size_t step, F&& body) {
  try {
    body();
  } catch (const NumericError& e) {
    throw NumericError(std::string(stage) + " step " + std::to_string(step) + ": " + e.what());
  }
}

}  // namespace detail

// ---------------------------------------------------------------- stage 1

struct Stage1Result {
  dmf::DmfParams<float> params;
  std::vector<StepLog> log;
};

inline dmf::DmfConfig dmf_config(const RunConfig& cfg) {
  dmf::DmfConfig c = cfg.dmf;
  c.feature_channels = feature_classes().size();
  c.classes = kClasses;
  return c;
}

inline cig::CigConfig cig_config(const RunConfig& cfg) {
  cig::CigConfig c = cfg.cig;
  c.raw_channels = cfg.dmf.out_channels;
  c.classes = kClasses;
  c.mask_channels = kClasses - 1;
  return c;
}

inline dmf::DmfParams<float> stage1_init(const RunConfig& cfg) {
  return dmf::DmfParams<float>::init(dmf_config(cfg), cfg.seed);
}

inline cig::CigParams<float> stage2_init(const RunConfig& cfg) {
  return cig::CigParams<float>::init(cig_config(cfg), cfg.seed + 1);
}

/// Weighted cross-entropy on the segmentation head and the two-class loss of
/// the occupancy predictor for one scene.
inline std::pair<Tensor<float>, Tensor<float>> stage1_scene_losses(const Scene& s, const dmf::DmfParams<float>& p,
                                                                    const std::vector<double>& weights) {
  static const std::vector<double> binary{1.0, 1.0};
  const auto f_raw = dmf::dmf_forward(s.f_i, s.occ, s.raw.camera, p);
  return {objective::loss_ssc(dmf::seg_head(f_raw, p), s.raw.gt.values, weights),
          objective::loss_ssc(dmf::occupancy_logits(s.occ, p), s.gt_binary, binary)};
}

namespace detail {
inline StepLog stage1_log(std::size_t step, double ssc, double occ) {
  return {step, {{"l_ssc", ssc}, {"l_occ", occ}, {"total", ssc + occ}}};
}
}  // namespace detail

/// Stage-1 losses averaged over every scene, without gradients.
inline StepLog stage1_dataset_losses(const RunConfig& cfg, const std::vector<Scene>& scenes,
                                     const dmf::DmfParams<float>& p) {
  if (scenes.empty()) throw DataError("no scenes to evaluate");
  const auto weights = ssc_weights(cfg, scenes);
  double ssc = 0, occ = 0;
  for (const auto& s : scenes) {
    nd::TapeScope<float> scope;
    const auto [a, b] = stage1_scene_losses(s, p, weights);
    ssc += a.item();
    occ += b.item();
  }
  const double n = static_cast<double>(scenes.size());
  return detail::stage1_log(0, ssc / n, occ / n);
}

/// Trains stage 1 on the sum of both losses, averaged over the step's scenes.
inline Stage1Result train_stage1(const RunConfig& cfg, const std::vector<Scene>& scenes,
                                 const StepCallback& on_step = {}) {
  if (scenes.empty()) throw DataError("stage 1 needs at least one scene");
  Stage1Result r{stage1_init(cfg), {}};
  const auto params = r.params.named();
  const auto weights = ssc_weights(cfg, scenes);
  nd::SgdMomentum<float> opt(static_cast<float>(cfg.stage1.lr), static_cast<float>(cfg.stage1.momentum));
  for (std::size_t step = 0; step < cfg.stage1.steps; ++step) {
    detail::run_step("stage 1", step, [&] {
      nd::TapeScope<float> scope;
      Tensor<float> ssc, occ;
      const auto batch = cfg.stage1.batch_at(step, scenes.size());
      const float inv = 1.0f / static_cast<float>(batch.size());
      for (const std::size_t i : batch) {
        const auto [a, b] = stage1_scene_losses(scenes[i], r.params, weights);
        ssc = ssc.defined() ? nd::add(ssc, a) : a;
        occ = occ.defined() ? nd::add(occ, b) : b;
      }
      ssc = nd::mul(ssc, inv);
      occ = nd::mul(occ, inv);
      const auto total = nd::add(ssc, occ);
      auto log = detail::stage1_log(step, ssc.item(), occ.item());
      detail::require_finite(log);
      nd::backward(total);
      detail::apply_step(opt, params, cfg.stage1.clip);
      if (on_step) on_step(log);
      r.log.push_back(std::move(log));
    });
  }
  return r;
}

/// Frozen stage-1 products handed to stage 2.
struct Guidance {
  Tensor<float> f_raw;
  dmf::QueryProposals proposals;
};

inline Guidance stage1_guidance(const Scene& s, const dmf::DmfParams<float>& p, const dmf::ProposalConfig& pc) {
  nd::TapeScope<float> scope;
  Guidance g;
  g.f_raw = dmf::dmf_forward(s.f_i, s.occ, s.raw.camera, p).detach();
  g.proposals = dmf::propose_queries(s.occ, p, pc);
  return g;
}

inline LabelGrid stage1_predict(const Scene& s, const dmf::DmfParams<float>& p) {
  nd::TapeScope<float> scope;
  LabelGrid out(s.raw.spec);
  out.values = cig::argmax_labels(dmf::seg_head(dmf::dmf_forward(s.f_i, s.occ, s.raw.camera, p), p));
  return out;
}

// ---------------------------------------------------------------- stage 2

struct Stage2Result {
  cig::CigParams<float> params;
  std::vector<StepLog> log;
  std::uint64_t stage1_checksum = 0;
};

struct PreparedStage2 {
  std::vector<Guidance> guidance;
  std::vector<cig::SceneInputs> inputs;
};

inline PreparedStage2 prepare_stage2(const RunConfig& cfg, const std::vector<Scene>& scenes,
                                     const dmf::DmfParams<float>& stage1) {
  PreparedStage2 p;
  for (const auto& s : scenes) {
    p.guidance.push_back(stage1_guidance(s, stage1, cfg.proposals));
    p.inputs.push_back(cig::make_scene_inputs(p.guidance.back().proposals, s.raw.camera));
  }
  return p;
}

/// Per-scene stage-2 losses under the configured weights.
inline objective::LossBundle<float> stage2_losses(const cig::CigOutput<float>& out, const Scene& s,
                                                  const std::vector<double>& weights,
                                                  const objective::Lambdas& lambdas) {
  const auto& gt = s.raw.gt.values;
  return objective::total_loss(objective::loss_bce(out.mask_logits, s.mask_targets),
                               objective::loss_scal(out.logits, gt, objective::ScalMode::geo),
                               objective::loss_scal(out.logits, gt, objective::ScalMode::sem),
                               objective::loss_ssc(out.logits, gt, weights), lambdas);
}

namespace detail {
inline StepLog stage2_log(std::size_t step, const std::array<double, 5>& v) {
  return {step,
          {{"l_bce", v[0]}, {"l_scal_geo", v[1]}, {"l_scal_sem", v[2]}, {"l_ssc", v[3]}, {"total", v[4]}}};
}
}  // namespace detail

/// Stage-2 losses averaged over every scene, without gradients.
inline StepLog stage2_dataset_losses(const RunConfig& cfg, const std::vector<Scene>& scenes,
                                     const PreparedStage2& prepared, const cig::CigParams<float>& p) {
  if (scenes.empty() || prepared.inputs.size() != scenes.size()) throw DataError("stage-2 inputs do not match scenes");
  const auto weights = ssc_weights(cfg, scenes);
  std::array<double, 5> sum{};
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    nd::TapeScope<float> scope;
    const auto out = cig::cig_forward(scenes[i].image, prepared.guidance[i].f_raw, prepared.inputs[i], p);
    const auto b = stage2_losses(out, scenes[i], weights, cfg.lambdas);
    const std::array<double, 5> v{b.l_bce.item(), b.l_scal_geo.item(), b.l_scal_sem.item(), b.l_ssc.item(),
                                  b.total.item()};
    for (std::size_t k = 0; k < 5; ++k) sum[k] += v[k] / static_cast<double>(scenes.size());
  }
  return detail::stage2_log(0, sum);
}

/// Trains the stage-2 network against frozen stage-1 parameters.
inline Stage2Result train_stage2(const RunConfig& cfg, const std::vector<Scene>& scenes,
                                 const dmf::DmfParams<float>& stage1, const StepCallback& on_step = {}) {
  if (scenes.empty()) throw DataError("stage 2 needs at least one scene");
  nd::set_trainable(stage1.named(), false);
  Stage2Result r{stage2_init(cfg), {}, nd::checksum(stage1.named())};
  const auto prepared = prepare_stage2(cfg, scenes, stage1);
  const auto params = r.params.named();
  const auto weights = ssc_weights(cfg, scenes);
  nd::SgdMomentum<float> opt(static_cast<float>(cfg.stage2.lr), static_cast<float>(cfg.stage2.momentum));
  for (std::size_t step = 0; step < cfg.stage2.steps; ++step) {
    detail::run_step("stage 2", step, [&] {
      nd::TapeScope<float> scope;
      std::array<Tensor<float>, 5> acc;  // bce, geo, sem, ssc, total
      const auto batch = cfg.stage2.batch_at(step, scenes.size());
      const float inv = 1.0f / static_cast<float>(batch.size());
      for (const std::size_t i : batch) {
        const auto out = cig::cig_forward(scenes[i].image, prepared.guidance[i].f_raw, prepared.inputs[i], r.params);
        const auto b = stage2_losses(out, scenes[i], weights, cfg.lambdas);
        const std::array<Tensor<float>, 5> parts{b.l_bce, b.l_scal_geo, b.l_scal_sem, b.l_ssc, b.total};
        for (std::size_t k = 0; k < 5; ++k) acc[k] = acc[k].defined() ? nd::add(acc[k], parts[k]) : parts[k];
      }
      for (auto& a : acc) a = nd::mul(a, inv);
      auto log = detail::stage2_log(step, {acc[0].item(), acc[1].item(), acc[2].item(), acc[3].item(), acc[4].item()});
      detail::require_finite(log);
      nd::backward(acc[4]);
      detail::apply_step(opt, params, cfg.stage2.clip);
      if (on_step) on_step(log);
      r.log.push_back(std::move(log));
    });
  }
  if (nd::checksum(stage1.named()) != r.stage1_checksum) throw Error("stage-1 parameters changed during stage 2");
  return r;
}

inline LabelGrid stage2_predict(const Scene& s, const Guidance& g, const cig::SceneInputs& in,
                                const cig::CigParams<float>& p) {
  nd::TapeScope<float> scope;
  LabelGrid out(s.raw.spec);
  out.values = cig::argmax_labels(cig::cig_forward(s.image, g.f_raw, in, p).logits);
  return out;
}

/// Range scores of the two-stage model over `scenes`.
inline std::vector<metrics::RangeScores> evaluate(const RunConfig& cfg, const std::vector<Scene>& scenes,
                                                  const dmf::DmfParams<float>& stage1,
                                                  const cig::CigParams<float>& stage2,
                                                  std::vector<LabelGrid>* predictions = nullptr) {
  metrics::RangeEvaluator ev(kClasses, cfg.ranges, cfg.missing);
  for (const auto& s : scenes) {
    const auto g = stage1_guidance(s, stage1, cfg.proposals);
    const auto pred = stage2_predict(s, g, cig::make_scene_inputs(g.proposals, s.raw.camera), stage2);
    ev.add(pred, s.raw.gt);
    if (predictions) predictions->push_back(pred);
  }
  return ev.scores();
}

// ---------------------------------------------------------------- scene files

inline nlohmann::json camera_json(const geometry::CameraModel& c) {
  std::vector<double> r(9);
  for (int i = 0; i < 9; ++i) r[static_cast<std::size_t>(i)] = c.rotation(i / 3, i % 3);
  return {{"fx", c.fx},         {"fy", c.fy},         {"cx", c.cx},
          {"cy", c.cy},         {"width", c.width},   {"height", c.height},
          {"rotation", r},      {"translation", {c.translation.x(), c.translation.y(), c.translation.z()}}};
}

inline geometry::CameraModel camera_from_json(const nlohmann::json& j) {
  geometry::CameraModel c;
  try {
    c.fx = j.at("fx").get<double>();
    c.fy = j.at("fy").get<double>();
    c.cx = j.at("cx").get<double>();
    c.cy = j.at("cy").get<double>();
    c.width = j.at("width").get<std::size_t>();
    c.height = j.at("height").get<std::size_t>();
    const auto r = j.at("rotation").get<std::vector<double>>();
    const auto t = j.at("translation").get<std::vector<double>>();
    if (r.size() != 9 || t.size() != 3) throw FormatError("camera rotation needs 9 and translation 3 numbers");
    for (int i = 0; i < 9; ++i) c.rotation(i / 3, i % 3) = r[static_cast<std::size_t>(i)];
    c.translation = geometry::Vec3(t[0], t[1], t[2]);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed camera: ") + e.what());
  }
  c.validate();
  return c;
}

inline io::Bytes f32_bytes(std::span<const float> values) {
  io::Bytes b;
  b.reserve(values.size() * 4);
  for (float v : values) io::put_f32(b, v);
  return b;
}

inline std::vector<float> f32_values(std::span<const std::uint8_t> bytes, std::size_t count, const std::string& what) {
  if (bytes.size() != 4 * count) {
    throw DataError(what + " holds " + std::to_string(bytes.size()) + " bytes, expected " + std::to_string(4 * count));
  }
  std::vector<float> v(count);
  for (std::size_t i = 0; i < count; ++i) v[i] = io::get_f32(bytes, 4 * i);
  return v;
}

/// Scene directory: scene.json, gt.cvox, depth.f32, mask.u8, image.f32.
inline void save_scene(const std::filesystem::path& dir, const SynthScene& s) {
  std::filesystem::create_directories(dir);
  const nlohmann::json meta{{"seed", s.seed}, {"camera", camera_json(s.camera)}};
  io::write_text(dir / "scene.json", meta.dump(2) + "\n");
  semkitti::write_cvox(dir / "gt.cvox", s.gt, semkitti::ClassTable::semantic_kitti().names);
  io::write_file(dir / "depth.f32", f32_bytes(s.depth.values));
  io::write_file(dir / "mask.u8", s.mask);
  io::write_file(dir / "image.f32", f32_bytes(s.image));
}

inline SynthScene load_scene(const std::filesystem::path& dir) {
  SynthScene s;
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(io::read_text(dir / "scene.json"));
    s.seed = meta.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed scene.json in " + dir.string() + ": " + e.what());
  }
  s.camera = camera_from_json(meta.at("camera"));
  auto gt = semkitti::read_cvox(dir / "gt.cvox");
  s.gt = std::move(gt.grid);
  s.spec = s.gt.spec;
  const std::size_t W = s.camera.width, H = s.camera.height;
  s.depth = geometry::DepthMap(W, H);
  s.depth.values = f32_values(io::read_file(dir / "depth.f32"), W * H, "depth.f32");
  s.mask = io::read_file(dir / "mask.u8");
  if (s.mask.size() != W * H) throw DataError("mask.u8 does not match the camera resolution");
  s.image = f32_values(io::read_file(dir / "image.f32"), 3 * W * H, "image.f32");
  return s;
}

/// Scene directories under `root` in name order.
inline std::vector<Scene> load_scenes(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw DataError("no scene directory at " + root.string());
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(root)) {
    if (e.is_directory() && std::filesystem::exists(e.path() / "scene.json")) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw DataError("no scenes found under " + root.string());
  std::vector<Scene> out;
  for (const auto& d : dirs) out.push_back(prepare_scene(load_scene(d), d.filename().string()));
  return out;
}

}  // namespace cigocc::pipeline
