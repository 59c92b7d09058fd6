#pragma once

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cigocc/cignet.hpp"
#include "cigocc/dmfnet.hpp"
#include "cigocc/errors.hpp"
#include "cigocc/geometry.hpp"
#include "cigocc/io.hpp"
#include "cigocc/metrics.hpp"
#include "cigocc/objective.hpp"
#include "cigocc/semkitti.hpp"

namespace cigocc::config {

using nlohmann::json;

struct Schedule {
  std::size_t steps = 0;
  double lr = 0.01;
  double momentum = 0.9;
  double clip = 0;  // global gradient-norm clip; 0 disables
  std::size_t batch = 0;  // scenes per step, taken in rotation; 0 uses all

  /// Scene indices of the mini-batch at `step` out of `n` scenes.
  std::vector<std::size_t> batch_at(std::size_t step, std::size_t n) const {
    const std::size_t b = batch == 0 || batch > n ? n : batch;
    std::vector<std::size_t> out(b);
    for (std::size_t k = 0; k < b; ++k) out[k] = (step * b + k) % n;
    return out;
  }

  void validate(const std::string& name) const {
    if (steps > 1000000) throw ConfigError(name + ".steps exceeds 1000000");
    if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError(name + ".lr must be finite and non-negative");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError(name + ".momentum must lie in [0, 1)");
    if (!(clip >= 0) || !std::isfinite(clip)) throw ConfigError(name + ".clip must be finite and non-negative");
  }
};

/// Source of the class frequencies behind the inverse-frequency loss weights.
enum class ClassWeighting { semantic_kitti, scenes, uniform };

inline const char* weighting_name(ClassWeighting w) {
  switch (w) {
    case ClassWeighting::semantic_kitti: return "semantic_kitti";
    case ClassWeighting::scenes: return "scenes";
    case ClassWeighting::uniform: return "uniform";
  }
  return "semantic_kitti";
}

struct RunConfig {
  std::uint64_t seed = 7;
  std::size_t scenes = 4;
  geometry::VolumeSpec volume = semkitti::default_synth_spec();
  std::size_t image_width = 128, image_height = 96;
  std::optional<geometry::CameraModel> camera;  // framed automatically when absent
  dmf::DmfConfig dmf;
  cig::CigConfig cig;
  dmf::ProposalConfig proposals{0.5, 0.3};
  objective::Lambdas lambdas;
  ClassWeighting weighting = ClassWeighting::uniform;
  Schedule stage1{300, 0.05, 0.9, 5.0, 1};
  Schedule stage2{400, 0.05, 0.9, 5.0, 1};
  std::vector<double> ranges{3.2, 6.4, 12.8};
  metrics::MissingClass missing = metrics::MissingClass::exclude;

  geometry::CameraModel resolved_camera() const {
    return camera ? *camera : geometry::default_camera(volume, image_width, image_height);
  }

  void validate() const {
    if (scenes == 0 || scenes > 1024) throw ConfigError("scenes must lie in [1, 1024]");
    volume.validate();
    if (volume.voxel_count() > semkitti::kMaxSynthVoxels) throw ConfigError("volume exceeds 128^3 voxels");
    if (image_width == 0 || image_height == 0 || image_width % 16 || image_height % 16) {
      throw ConfigError("image width and height must be positive multiples of 16");
    }
    if (camera) {
      camera->validate();
      if (camera->width != image_width || camera->height != image_height) {
        throw ConfigError("camera resolution differs from the image size");
      }
    }
    dmf.validate();
    cig.validate();
    if (cig.raw_channels != dmf.out_channels) throw ConfigError("cig raw channels must equal dmf out_channels");
    proposals.validate();
    lambdas.validate();
    stage1.validate("stage1");
    stage2.validate("stage2");
    if (ranges.empty()) throw ConfigError("eval.ranges must not be empty");
    for (double r : ranges) geometry::crop_window(volume, r);
  }
};

namespace detail {

inline void only_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items()) {
    if (!ok.count(key)) throw ConfigError("unknown config key " + (where.empty() ? key : where + "." + key));
  }
}

template <class V>
void read(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError("config key " + (where.empty() ? std::string(key) : where + "." + key) + " has the wrong type");
  }
}

inline std::vector<double> read_numbers(const json& j, const char* key, std::size_t n, const std::string& where) {
  std::vector<double> v;
  read(j, key, v, where);
  if (v.size() != n) throw ConfigError(where + "." + key + " needs " + std::to_string(n) + " numbers");
  return v;
}

}  // namespace detail

inline RunConfig from_json(const json& j) {
  using detail::only_keys;
  using detail::read;
  RunConfig c;
  only_keys(j, "", {"seed", "scenes", "volume", "image", "camera", "dmf", "cig", "proposals", "loss", "stage1",
                    "stage2", "eval"});
  read(j, "seed", c.seed, "");
  read(j, "scenes", c.scenes, "");
  if (j.contains("volume")) {
    const auto& v = j["volume"];
    only_keys(v, "volume", {"origin", "dims", "voxel_size"});
    if (v.contains("origin")) {
      const auto o = detail::read_numbers(v, "origin", 3, "volume");
      c.volume.origin = geometry::Vec3(o[0], o[1], o[2]);
    }
    if (v.contains("dims")) {
      std::vector<std::size_t> d;
      read(v, "dims", d, "volume");
      if (d.size() != 3) throw ConfigError("volume.dims needs 3 integers");
      c.volume.dims = {d[0], d[1], d[2]};
    }
    read(v, "voxel_size", c.volume.voxel_size, "volume");
  }
  if (j.contains("image")) {
    only_keys(j["image"], "image", {"width", "height"});
    read(j["image"], "width", c.image_width, "image");
    read(j["image"], "height", c.image_height, "image");
  }
  if (j.contains("camera") && !j["camera"].is_null()) {
    const auto& cj = j["camera"];
    only_keys(cj, "camera", {"fx", "fy", "cx", "cy", "rotation", "translation"});
    geometry::CameraModel cam;
    cam.width = c.image_width;
    cam.height = c.image_height;
    read(cj, "fx", cam.fx, "camera");
    read(cj, "fy", cam.fy, "camera");
    cam.cx = static_cast<double>(c.image_width) / 2;
    cam.cy = static_cast<double>(c.image_height) / 2;
    read(cj, "cx", cam.cx, "camera");
    read(cj, "cy", cam.cy, "camera");
    if (cj.contains("rotation")) {
      const auto r = detail::read_numbers(cj, "rotation", 9, "camera");
      for (int i = 0; i < 9; ++i) cam.rotation(i / 3, i % 3) = r[static_cast<std::size_t>(i)];
    }
    if (cj.contains("translation")) {
      const auto t = detail::read_numbers(cj, "translation", 3, "camera");
      cam.translation = geometry::Vec3(t[0], t[1], t[2]);
    }
    c.camera = cam;
  }
  if (j.contains("dmf")) {
    const auto& d = j["dmf"];
    only_keys(d, "dmf", {"width", "out_channels", "proposal_width"});
    read(d, "width", c.dmf.width, "dmf");
    read(d, "out_channels", c.dmf.out_channels, "dmf");
    read(d, "proposal_width", c.dmf.proposal_width, "dmf");
  }
  if (j.contains("cig")) {
    const auto& d = j["cig"];
    only_keys(d, "cig", {"d", "heads", "points", "dca_layers", "dsa_layers", "backbone_widths", "decoder_width",
                         "pos_frequencies"});
    read(d, "d", c.cig.d, "cig");
    read(d, "heads", c.cig.heads, "cig");
    read(d, "points", c.cig.points, "cig");
    read(d, "dca_layers", c.cig.dca_layers, "cig");
    read(d, "dsa_layers", c.cig.dsa_layers, "cig");
    if (d.contains("backbone_widths")) {
      std::vector<std::size_t> w;
      read(d, "backbone_widths", w, "cig");
      if (w.size() != 3) throw ConfigError("cig.backbone_widths needs 3 integers");
      c.cig.backbone_widths = {w[0], w[1], w[2]};
    }
    read(d, "decoder_width", c.cig.decoder_width, "cig");
    read(d, "pos_frequencies", c.cig.pos_frequencies, "cig");
  }
  if (j.contains("proposals")) {
    only_keys(j["proposals"], "proposals", {"threshold", "cap_fraction"});
    read(j["proposals"], "threshold", c.proposals.threshold, "proposals");
    read(j["proposals"], "cap_fraction", c.proposals.cap_fraction, "proposals");
  }
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    only_keys(l, "loss", {"lambda_bce", "lambda_scal_geo", "lambda_scal_sem", "lambda_ssc", "class_weights"});
    read(l, "lambda_bce", c.lambdas.bce, "loss");
    read(l, "lambda_scal_geo", c.lambdas.scal_geo, "loss");
    read(l, "lambda_scal_sem", c.lambdas.scal_sem, "loss");
    read(l, "lambda_ssc", c.lambdas.ssc, "loss");
    std::string w = weighting_name(c.weighting);
    read(l, "class_weights", w, "loss");
    if (w == "semantic_kitti") c.weighting = ClassWeighting::semantic_kitti;
    else if (w == "scenes") c.weighting = ClassWeighting::scenes;
    else if (w == "uniform") c.weighting = ClassWeighting::uniform;
    else throw ConfigError("loss.class_weights must be \"semantic_kitti\", \"scenes\" or \"uniform\"");
  }
  for (const char* stage : {"stage1", "stage2"}) {
    if (!j.contains(stage)) continue;
    const auto& s = j[stage];
    only_keys(s, stage, {"steps", "lr", "momentum", "clip", "batch"});
    Schedule& out = std::string(stage) == "stage1" ? c.stage1 : c.stage2;
    read(s, "steps", out.steps, stage);
    read(s, "lr", out.lr, stage);
    read(s, "momentum", out.momentum, stage);
    read(s, "clip", out.clip, stage);
    read(s, "batch", out.batch, stage);
  }
  if (j.contains("eval")) {
    only_keys(j["eval"], "eval", {"ranges", "missing_classes"});
    read(j["eval"], "ranges", c.ranges, "eval");
    std::string m = "exclude";
    read(j["eval"], "missing_classes", m, "eval");
    if (m == "exclude") c.missing = metrics::MissingClass::exclude;
    else if (m == "zero") c.missing = metrics::MissingClass::zero;
    else throw ConfigError("eval.missing_classes must be \"exclude\" or \"zero\"");
  }
  c.cig.raw_channels = c.dmf.out_channels;
  c.validate();
  return c;
}

inline json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["scenes"] = c.scenes;
  j["volume"] = {{"origin", {c.volume.origin.x(), c.volume.origin.y(), c.volume.origin.z()}},
                 {"dims", {c.volume.dims[0], c.volume.dims[1], c.volume.dims[2]}},
                 {"voxel_size", c.volume.voxel_size}};
  j["image"] = {{"width", c.image_width}, {"height", c.image_height}};
  if (c.camera) {
    std::vector<double> r(9);
    for (int i = 0; i < 9; ++i) r[static_cast<std::size_t>(i)] = c.camera->rotation(i / 3, i % 3);
    j["camera"] = {{"fx", c.camera->fx},
                   {"fy", c.camera->fy},
                   {"cx", c.camera->cx},
                   {"cy", c.camera->cy},
                   {"rotation", r},
                   {"translation", {c.camera->translation.x(), c.camera->translation.y(), c.camera->translation.z()}}};
  } else {
    j["camera"] = nullptr;
  }
  j["dmf"] = {{"width", c.dmf.width}, {"out_channels", c.dmf.out_channels}, {"proposal_width", c.dmf.proposal_width}};
  j["cig"] = {{"d", c.cig.d},
              {"heads", c.cig.heads},
              {"points", c.cig.points},
              {"dca_layers", c.cig.dca_layers},
              {"dsa_layers", c.cig.dsa_layers},
              {"backbone_widths", c.cig.backbone_widths},
              {"decoder_width", c.cig.decoder_width},
              {"pos_frequencies", c.cig.pos_frequencies}};
  j["proposals"] = {{"threshold", c.proposals.threshold}, {"cap_fraction", c.proposals.cap_fraction}};
  j["loss"] = {{"lambda_bce", c.lambdas.bce},
               {"lambda_scal_geo", c.lambdas.scal_geo},
               {"lambda_scal_sem", c.lambdas.scal_sem},
               {"lambda_ssc", c.lambdas.ssc},
               {"class_weights", weighting_name(c.weighting)}};
  for (const auto* s : {&c.stage1, &c.stage2}) {
    j[s == &c.stage1 ? "stage1" : "stage2"] = {
        {"steps", s->steps}, {"lr", s->lr}, {"momentum", s->momentum}, {"clip", s->clip}, {"batch", s->batch}};
  }
  j["eval"] = {{"ranges", c.ranges},
               {"missing_classes", c.missing == metrics::MissingClass::zero ? "zero" : "exclude"}};
  return j;
}

inline RunConfig parse(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return from_json(j);
}

inline RunConfig load(const std::filesystem::path& path) {
  std::string text;
  try {
    text = io::read_text(path);
  } catch (const Error& e) {
    throw ConfigError("cannot read config " + path.string() + ": " + e.what());
  }
  return parse(text);
}

}  // namespace cigocc::config
