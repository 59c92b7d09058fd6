#pragma once

#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cigocc/errors.hpp"
#include "cigocc/geometry.hpp"

namespace cigocc::metrics {

inline constexpr std::uint16_t kIgnore = 255;

/// Published full-scale SemanticKITTI figures (percent), printed next to toy
/// results for scale only.
namespace reference {
inline constexpr double kMiou = 14.90;
inline constexpr double kMiouVoxFormerT = 13.41;
inline constexpr double kGeometricIou = 44.28;
inline constexpr double kGeometricPrecision = 64.64;
}  // namespace reference

/// Square count matrix indexed [ground truth][prediction].
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;
  std::uint64_t total = 0;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t n) : classes(n), counts(n * n, 0) {
    if (n == 0) throw ConfigError("confusion matrix needs at least one class");
  }

  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts[gt * classes + pred]; }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.classes != classes) throw ShapeError("cannot add confusion matrices of different sizes");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    total += o.total;
    return *this;
  }

  bool operator==(const ConfusionMatrix&) const = default;
};

/// Tallies every voxel whose ground truth is not ignored and whose invalid
/// flag (when given) is zero.
inline ConfusionMatrix& confusion_update(ConfusionMatrix& m, std::span<const std::uint16_t> pred,
                                         std::span<const std::uint16_t> gt,
                                         std::span<const std::uint8_t> invalid = {}) {
  if (pred.size() != gt.size()) {
    throw ShapeError("confusion_update: " + std::to_string(pred.size()) + " predictions for " +
                     std::to_string(gt.size()) + " labels");
  }
  if (!invalid.empty() && invalid.size() != gt.size()) throw ShapeError("confusion_update: invalid mask size");
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == kIgnore || (!invalid.empty() && invalid[i])) continue;
    if (gt[i] >= m.classes || pred[i] >= m.classes) {
      throw DataError("confusion_update: label outside " + std::to_string(m.classes) + " classes at voxel " +
                      std::to_string(i));
    }
    ++m.counts[gt[i] * m.classes + pred[i]];
    ++m.total;
  }
  return m;
}

template <class V>
ConfusionMatrix& confusion_update(ConfusionMatrix& m, const geometry::VoxelGrid<V>& pred,
                                  const geometry::VoxelGrid<V>& gt, std::span<const std::uint8_t> invalid = {}) {
  if (!(pred.spec == gt.spec)) throw ShapeError("confusion_update: prediction and ground truth volumes differ");
  std::vector<std::uint16_t> p(pred.values.begin(), pred.values.end()), g(gt.values.begin(), gt.values.end());
  return confusion_update(m, std::span<const std::uint16_t>(p), std::span<const std::uint16_t>(g), invalid);
}

/// How classes absent from both prediction and ground truth enter the mean.
enum class MissingClass { exclude, zero };

/// TP / (TP + FP + FN) per class; nullopt where the union is empty.
inline std::vector<std::optional<double>> iou_per_class(const ConfusionMatrix& m) {
  if (m.total == 0) throw DataError("iou_per_class: confusion matrix is empty");
  std::vector<std::optional<double>> out(m.classes);
  for (std::size_t c = 0; c < m.classes; ++c) {
    std::uint64_t tp = m.at(c, c), row = 0, col = 0;
    for (std::size_t k = 0; k < m.classes; ++k) {
      row += m.at(c, k);
      col += m.at(k, c);
    }
    const std::uint64_t uni = row + col - tp;
    if (uni > 0) out[c] = static_cast<double>(tp) / static_cast<double>(uni);
  }
  return out;
}

/// Mean IoU over classes [first_class, C). Under `exclude`, undefined classes
/// are skipped and the result is nullopt if none is defined.
inline std::optional<double> miou(const ConfusionMatrix& m, std::size_t first_class = 1,
                                  MissingClass policy = MissingClass::exclude) {
  const auto iou = iou_per_class(m);
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t c = first_class; c < iou.size(); ++c) {
    if (iou[c]) {
      sum += *iou[c];
      ++n;
    } else if (policy == MissingClass::zero) {
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

struct GeometricScores {
  std::optional<double> iou, precision, recall;
};

/// Occupied-vs-empty scores; class 0 is empty and every other class occupied.
inline GeometricScores geometric_scores(const ConfusionMatrix& m) {
  if (m.total == 0) throw DataError("geometric_scores: confusion matrix is empty");
  std::uint64_t tp = 0, fp = 0, fn = 0;
  for (std::size_t g = 0; g < m.classes; ++g)
    for (std::size_t p = 0; p < m.classes; ++p) {
      const bool go = g != 0, po = p != 0;
      if (go && po) tp += m.at(g, p);
      else if (po) fp += m.at(g, p);
      else if (go) fn += m.at(g, p);
    }
  auto ratio = [](std::uint64_t a, std::uint64_t b) -> std::optional<double> {
    if (b == 0) return std::nullopt;
    return static_cast<double>(a) / static_cast<double>(b);
  };
  return {ratio(tp, tp + fp + fn), ratio(tp, tp + fp), ratio(tp, tp + fn)};
}

inline const std::vector<double>& default_ranges() {
  static const std::vector<double> r{12.8, 25.6, 51.2};
  return r;
}

struct RangeScores {
  double range_m = 0;
  ConfusionMatrix matrix;
  std::optional<double> miou;
  std::vector<std::optional<double>> per_class;
  GeometricScores geometric;
};

/// Accumulates one confusion matrix per forward-anchored range volume.
class RangeEvaluator {
 public:
  RangeEvaluator(std::size_t classes, std::vector<double> ranges = default_ranges(),
                 MissingClass policy = MissingClass::exclude)
      : classes_(classes), ranges_(std::move(ranges)), policy_(policy) {
    if (ranges_.empty()) throw ConfigError("at least one evaluation range is required");
    for (std::size_t i = 0; i < ranges_.size(); ++i) matrices_.emplace_back(classes);
  }

  template <class V>
  void add(const geometry::VoxelGrid<V>& pred, const geometry::VoxelGrid<V>& gt,
           const geometry::VoxelGrid<std::uint8_t>* invalid = nullptr) {
    if (!(pred.spec == gt.spec)) throw ShapeError("evaluate: prediction and ground truth volumes differ");
    for (std::size_t r = 0; r < ranges_.size(); ++r) {
      const auto p = geometry::crop_range(pred, ranges_[r]);
      const auto g = geometry::crop_range(gt, ranges_[r]);
      std::vector<std::uint8_t> inv;
      if (invalid) inv = geometry::crop_range(*invalid, ranges_[r]).values;
      confusion_update(matrices_[r], p, g, inv);
    }
  }

  std::vector<RangeScores> scores() const {
    std::vector<RangeScores> out;
    for (std::size_t r = 0; r < ranges_.size(); ++r) {
      RangeScores s;
      s.range_m = ranges_[r];
      s.matrix = matrices_[r];
      if (s.matrix.total > 0) {
        s.miou = miou(s.matrix, 1, policy_);
        s.per_class = iou_per_class(s.matrix);
        s.geometric = geometric_scores(s.matrix);
      } else {
        s.per_class.assign(classes_, std::nullopt);
      }
      out.push_back(std::move(s));
    }
    return out;
  }

 private:
  std::size_t classes_;
  std::vector<double> ranges_;
  MissingClass policy_;
  std::vector<ConfusionMatrix> matrices_;
};

template <class V>
std::vector<RangeScores> evaluate_ranges(const geometry::VoxelGrid<V>& pred, const geometry::VoxelGrid<V>& gt,
                                         std::size_t classes, const std::vector<double>& ranges = default_ranges(),
                                         MissingClass policy = MissingClass::exclude) {
  RangeEvaluator ev(classes, ranges, policy);
  ev.add(pred, gt);
  return ev.scores();
}

/// Range label as written in tables and JSON keys ("12.8").
inline std::string range_key(double r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", r);
  return buf;
}

namespace detail {
inline nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }
inline std::string cell(const std::optional<double>& v) {
  if (!v) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}
}  // namespace detail

/// {range: {miou, iou, precision, recall, per_class: {name: iou|null}}}.
inline nlohmann::json scores_json(const std::vector<RangeScores>& scores, const std::vector<std::string>& names) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& s : scores) {
    nlohmann::json per = nlohmann::json::object();
    for (std::size_t c = 0; c < s.per_class.size(); ++c) {
      per[c < names.size() ? names[c] : std::to_string(c)] = detail::opt(s.per_class[c]);
    }
    out[range_key(s.range_m)] = {{"miou", detail::opt(s.miou)},
                                 {"iou", detail::opt(s.geometric.iou)},
                                 {"precision", detail::opt(s.geometric.precision)},
                                 {"recall", detail::opt(s.geometric.recall)},
                                 {"per_class", per}};
  }
  return out;
}

/// Tab-separated table: one metric per row, one range per column.
inline std::string scores_tsv(const std::vector<RangeScores>& scores, const std::vector<std::string>& names) {
  std::ostringstream os;
  os << "metric";
  for (const auto& s : scores) os << '\t' << range_key(s.range_m) << 'm';
  os << '\n';
  auto row = [&](const std::string& label, auto get) {
    os << label;
    for (const auto& s : scores) os << '\t' << detail::cell(get(s));
    os << '\n';
  };
  row("IoU", [](const RangeScores& s) { return s.geometric.iou; });
  row("Precision", [](const RangeScores& s) { return s.geometric.precision; });
  row("Recall", [](const RangeScores& s) { return s.geometric.recall; });
  row("mIoU", [](const RangeScores& s) { return s.miou; });
  const std::size_t classes = scores.empty() ? 0 : scores.front().per_class.size();
  for (std::size_t c = 1; c < classes; ++c) {
    row(c < names.size() ? names[c] : std::to_string(c), [c](const RangeScores& s) { return s.per_class[c]; });
  }
  os << "# full-scale SemanticKITTI reference: mIoU " << reference::kMiou << " (VoxFormer-T "
     << reference::kMiouVoxFormerT << "), IoU " << reference::kGeometricIou << ", precision "
     << reference::kGeometricPrecision << " at 51.2m\n";
  return os.str();
}

}  // namespace cigocc::metrics
