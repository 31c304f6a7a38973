#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "mimic/data.hpp"
#include "mimic/nn/network.hpp"
#include "mimic/tensor.hpp"

namespace mimic {

/// Sort each axis pair and clamp to [0,1]. Raw sigmoid heads cannot guarantee
/// ordering; the same repair is applied to every model's output before IoU.
inline std::array<double, 4> repair_box(const std::array<double, 4>& b) {
  std::array<double, 4> r{std::min(b[0], b[2]), std::min(b[1], b[3]),
                          std::max(b[0], b[2]), std::max(b[1], b[3])};
  for (auto& v : r) v = std::min(std::max(v, 0.0), 1.0);
  return r;
}

/// Intersection over union of two corner boxes; 0 when the union has no area.
inline double iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  const double iw = std::min(a[2], b[2]) - std::max(a[0], b[0]);
  const double ih = std::min(a[3], b[3]) - std::max(a[1], b[1]);
  const double inter = std::max(iw, 0.0) * std::max(ih, 0.0);
  const double area_a = std::max(a[2] - a[0], 0.0) * std::max(a[3] - a[1], 0.0);
  const double area_b = std::max(b[2] - b[0], 0.0) * std::max(b[3] - b[1], 0.0);
  const double uni = area_a + area_b - inter;
  if (uni <= 0) return 0.0;
  return inter / uni;
}

inline double iou(const NormalizedBox& a, const NormalizedBox& b) {
  return iou(a.as_array(), b.as_array());
}

/// Fraction of predictions whose argmax (ties toward the lower index) matches
/// the label.
inline double accuracy(const std::vector<Detection>& preds, const std::vector<int>& labels) {
  if (preds.empty() || preds.size() != labels.size())
    throw std::invalid_argument("accuracy: empty or mismatched inputs");
  int hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i].top_class() == labels[i]) ++hit;
  return static_cast<double>(hit) / preds.size();
}

/// Fraction of IoU values meeting the threshold (>=, so 0.5 exactly counts).
inline double detection_success(const std::vector<double>& ious, double threshold = 0.5) {
  if (ious.empty()) throw std::invalid_argument("detection_success: empty input");
  int hit = 0;
  for (double v : ious)
    if (v >= threshold) ++hit;
  return static_cast<double>(hit) / ious.size();
}

struct SuccessRate {
  double value = 0;  // 100 * attack / baseline, unrounded
  int rounded = 0;   // displayed value
};

/// Eq.-style extraction score: how much of the baseline metric the attack
/// recovers, in percent. Computed on unrounded inputs.
inline SuccessRate success_rate(double attack, double baseline) {
  if (!(baseline > 0)) throw std::invalid_argument("success_rate: baseline must be positive");
  SuccessRate s;
  s.value = 100.0 * attack / baseline;
  s.rounded = static_cast<int>(std::lround(s.value));
  return s;
}

struct EvalReport {
  double accuracy = 0;
  double mean_iou = 0;
  double detection_success = 0;
  double threshold = 0.5;
  int samples = 0;
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"accuracy", r.accuracy},
       {"mean_iou", r.mean_iou},
       {"detection_success", r.detection_success},
       {"threshold", r.threshold},
       {"samples", r.samples}};
}
inline void from_json(const nlohmann::json& j, EvalReport& r) {
  j.at("accuracy").get_to(r.accuracy);
  j.at("mean_iou").get_to(r.mean_iou);
  j.at("detection_success").get_to(r.detection_success);
  j.at("threshold").get_to(r.threshold);
  j.at("samples").get_to(r.samples);
}

using Predictor = std::function<std::vector<Detection>(const Tensor<float>&)>;

/// Aggregate accuracy, mean IoU (after box repair), and detection success of
/// any prediction source over a dataset. Never touches a query budget.
inline EvalReport evaluate_model(const Predictor& predict, const Dataset& data,
                                 double threshold = 0.5, int batch = 256) {
  if (data.size() == 0) throw std::invalid_argument("evaluate_model: empty dataset");
  std::vector<Detection> preds;
  preds.reserve(data.size());
  for (int start = 0; start < data.size(); start += batch) {
    const int end = std::min(start + batch, data.size());
    std::vector<int> idx(end - start);
    for (int i = start; i < end; ++i) idx[i - start] = i;
    auto out = predict(gather_items(data.images, idx));
    if (static_cast<int>(out.size()) != end - start)
      throw std::runtime_error("evaluate_model: predictor returned " +
                               std::to_string(out.size()) + " detections for " +
                               std::to_string(end - start) + " images");
    for (auto& d : out) preds.push_back(std::move(d));
  }
  std::vector<double> ious(data.size());
  for (int i = 0; i < data.size(); ++i)
    ious[i] = iou(repair_box(preds[i].box), data.boxes[i].as_array());
  EvalReport r;
  r.accuracy = accuracy(preds, data.labels);
  r.mean_iou = std::accumulate(ious.begin(), ious.end(), 0.0) / data.size();
  r.detection_success = detection_success(ious, threshold);
  r.threshold = threshold;
  r.samples = data.size();
  return r;
}

template <typename T>
EvalReport evaluate_detector(Detector<T>& det, const Dataset& data, double threshold = 0.5,
                             int batch = 256) {
  return evaluate_model(
      [&det](const Tensor<float>& x) {
        if constexpr (std::is_same_v<T, float>) return det.detect(x);
        else return det.detect(x.template cast<T>());
      },
      data, threshold, batch);
}

/// Mean IoU a constant centered box scores on the dataset — the no-learning
/// reference any extracted student must beat.
inline double constant_box_mean_iou(const Dataset& data,
                                    const std::array<double, 4>& box = {0.25, 0.25, 0.75,
                                                                        0.75}) {
  if (data.size() == 0) throw std::invalid_argument("constant_box_mean_iou: empty dataset");
  double total = 0;
  for (const auto& b : data.boxes) total += iou(box, b.as_array());
  return total / data.size();
}

struct ComparisonReport {
  EvalReport baseline;  // victim
  EvalReport attack;    // student
  SuccessRate sr_accuracy;
  SuccessRate sr_iou;
  SuccessRate sr_detection;
};

/// Success rates per the ratio rule, on unrounded metrics. A metric whose
/// baseline is zero (degenerate victim) reports a rate of 0 rather than
/// throwing, so one dead metric cannot sink a whole report.
inline ComparisonReport compare(const EvalReport& baseline, const EvalReport& attack) {
  const auto rate = [](double atk, double base) {
    return base > 0 ? success_rate(atk, base) : SuccessRate{0.0, 0};
  };
  ComparisonReport c{baseline, attack, {}, {}, {}};
  c.sr_accuracy = rate(attack.accuracy, baseline.accuracy);
  c.sr_iou = rate(attack.mean_iou, baseline.mean_iou);
  c.sr_detection = rate(attack.detection_success, baseline.detection_success);
  return c;
}

inline void to_json(nlohmann::json& j, const ComparisonReport& c) {
  j = {{"baseline", c.baseline},
       {"attack", c.attack},
       {"success_rate_accuracy", {{"value", c.sr_accuracy.value}, {"rounded", c.sr_accuracy.rounded}}},
       {"success_rate_iou", {{"value", c.sr_iou.value}, {"rounded", c.sr_iou.rounded}}},
       {"success_rate_detection",
        {{"value", c.sr_detection.value}, {"rounded", c.sr_detection.rounded}}}};
}

struct ComparisonRow {
  std::string victim;
  std::string student;
  ComparisonReport report;
};

/// Fixed-width text table: victim/student pair, accuracy and IoU for baseline
/// and attack (integer percents), success rates.
inline std::string comparison_table_text(const std::vector<ComparisonRow>& rows) {
  auto pct = [](double v) { return static_cast<int>(std::lround(100.0 * v)); };
  std::string out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-12s %-12s | %9s %9s %6s | %9s %9s %6s\n", "Victim",
                "Student", "Acc(base)", "Acc(atk)", "SR%", "IoU(base)", "IoU(atk)", "SR%");
  out += line;
  out += std::string(84, '-') + "\n";
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%-12s %-12s | %9d %9d %6d | %9d %9d %6d\n",
                  r.victim.c_str(), r.student.c_str(), pct(r.report.baseline.accuracy),
                  pct(r.report.attack.accuracy), r.report.sr_accuracy.rounded,
                  pct(r.report.baseline.mean_iou), pct(r.report.attack.mean_iou),
                  r.report.sr_iou.rounded);
    out += line;
  }
  return out;
}

inline std::string comparison_table_csv(const std::vector<ComparisonRow>& rows) {
  std::string out =
      "victim,student,accuracy_baseline,accuracy_attack,success_rate_accuracy,"
      "iou_baseline,iou_attack,success_rate_iou,detection_baseline,detection_attack,"
      "success_rate_detection\n";
  char line[512];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%s,%s,%.6f,%.6f,%d,%.6f,%.6f,%d,%.6f,%.6f,%d\n",
                  r.victim.c_str(), r.student.c_str(), r.report.baseline.accuracy,
                  r.report.attack.accuracy, r.report.sr_accuracy.rounded,
                  r.report.baseline.mean_iou, r.report.attack.mean_iou, r.report.sr_iou.rounded,
                  r.report.baseline.detection_success, r.report.attack.detection_success,
                  r.report.sr_detection.rounded);
    out += line;
  }
  return out;
}

}  // namespace mimic
