#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "consisaug/boxgeom.hpp"
#include "consisaug/data.hpp"
#include "consisaug/losses.hpp"
#include "consisaug/model.hpp"

namespace consisaug {

struct Detection {
  BoxCWH box;
  int class_id = 0;
  double score = 0;      // foreground probability, 1 - P(background)
  int anchor_index = 0;  // deterministic tie-break key
};

struct EvalConfig {
  double conf_threshold = 0.25;
  double nms_iou = 0.45;
  bool use_teacher = false;
};

struct MetricsReport {
  double precision = 0, recall = 0, map50 = 0, f1 = 0, f2 = 0;
  long tp = 0, fp = 0, fn = 0;
};

/// F1 and F2 from precision/recall; F_beta = (1+b^2)PR / (b^2 P + R),
/// zero when the denominator vanishes.
inline std::pair<double, double> f_scores(double p, double r) {
  const double f1 = (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
  const double f2 = (4 * p + r) > 0 ? 5 * p * r / (4 * p + r) : 0.0;
  return {f1, f2};
}

/// Per-anchor score/box extraction at a confidence threshold; score is
/// 1 - P(background), class is the argmax foreground column.
inline std::vector<Detection> decode_detections(const DetectorOutput& out, const AnchorGrid& grid,
                                                double conf_threshold) {
  if (conf_threshold < 0 || conf_threshold > 1)
    raise(ErrorCode::InvalidThresholds, "confidence threshold must lie in [0, 1]");
  const int K = out.cls.shape[0];
  const int C1 = out.cls.shape[1];
  if (K != grid.num_anchors()) raise(ErrorCode::ShapeMismatch, "output/grid anchor count mismatch");
  std::vector<Detection> dets;
  for (int k = 0; k < K; ++k) {
    const double score = 1.0 - out.cls.data[static_cast<std::size_t>(k * C1)];
    if (score < conf_threshold) continue;
    int best_c = 1;
    for (int c = 2; c < C1; ++c)
      if (out.cls.data[static_cast<std::size_t>(k * C1 + c)] >
          out.cls.data[static_cast<std::size_t>(k * C1 + best_c)])
        best_c = c;
    const DeltaBox d{out.loc.data[static_cast<std::size_t>(k * 4 + 0)],
                     out.loc.data[static_cast<std::size_t>(k * 4 + 1)],
                     out.loc.data[static_cast<std::size_t>(k * 4 + 2)],
                     out.loc.data[static_cast<std::size_t>(k * 4 + 3)]};
    dets.push_back(Detection{decode(d, grid.anchor(k)), best_c - 1, score, k});
  }
  return dets;
}

/// Greedy class-aware NMS; ties in score break toward the smaller anchor
/// index so results are order-independent.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
  if (!(iou_threshold > 0) || iou_threshold > 1)
    raise(ErrorCode::InvalidThresholds, "nms iou threshold must lie in (0, 1]");
  std::sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.anchor_index < b.anchor_index;
  });
  std::vector<Detection> kept;
  for (const Detection& d : dets) {
    bool suppressed = false;
    for (const Detection& k : kept)
      if (k.class_id == d.class_id && iou(k.box, d.box) >= iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

namespace detail {

struct RankedDet {
  double score;
  int image;
  int index;  // within the image's detection list
};

inline std::vector<RankedDet> rank_detections(const std::vector<std::vector<Detection>>& dets) {
  std::vector<RankedDet> ranked;
  for (int img = 0; img < static_cast<int>(dets.size()); ++img)
    for (int i = 0; i < static_cast<int>(dets[static_cast<std::size_t>(img)].size()); ++i)
      ranked.push_back({dets[static_cast<std::size_t>(img)][static_cast<std::size_t>(i)].score, img, i});
  std::sort(ranked.begin(), ranked.end(), [&](const RankedDet& a, const RankedDet& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image != b.image) return a.image < b.image;
    return dets[static_cast<std::size_t>(a.image)][static_cast<std::size_t>(a.index)].anchor_index <
           dets[static_cast<std::size_t>(b.image)][static_cast<std::size_t>(b.index)].anchor_index;
  });
  return ranked;
}

/// Greedy score-ordered matching: a detection claims the highest-IoU
/// still-unmatched same-class gt of its image when that IoU >= iou_thr.
/// Returns per-ranked-detection TP flags.
inline std::vector<bool> match_ranked(const std::vector<RankedDet>& ranked,
                                      const std::vector<std::vector<Detection>>& dets,
                                      const std::vector<std::vector<GtBox>>& gts,
                                      double iou_thr) {
  std::vector<std::vector<bool>> taken;
  taken.reserve(gts.size());
  for (const auto& g : gts) taken.emplace_back(g.size(), false);
  std::vector<bool> is_tp(ranked.size(), false);
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    const Detection& d =
        dets[static_cast<std::size_t>(ranked[r].image)][static_cast<std::size_t>(ranked[r].index)];
    const auto& img_gts = gts[static_cast<std::size_t>(ranked[r].image)];
    auto& img_taken = taken[static_cast<std::size_t>(ranked[r].image)];
    double best = 0.0;
    int best_g = -1;
    for (int g = 0; g < static_cast<int>(img_gts.size()); ++g) {
      if (img_taken[static_cast<std::size_t>(g)]) continue;
      if (img_gts[static_cast<std::size_t>(g)].class_id != d.class_id) continue;
      const double v = iou(d.box, img_gts[static_cast<std::size_t>(g)].box);
      if (v > best) {
        best = v;
        best_g = g;
      }
    }
    if (best_g >= 0 && best >= iou_thr) {
      img_taken[static_cast<std::size_t>(best_g)] = true;
      is_tp[r] = true;
    }
  }
  return is_tp;
}

}  // namespace detail

/// AP at IoU 0.5 with all-point interpolation (precision envelope made
/// non-increasing from the right, integrated over recall).
inline double average_precision_50(const std::vector<std::vector<Detection>>& dets,
                                   const std::vector<std::vector<GtBox>>& gts,
                                   double iou_thr = 0.5) {
  if (dets.size() != gts.size())
    raise(ErrorCode::ShapeMismatch, "detection/gt image counts disagree");
  long n_gt = 0;
  for (const auto& g : gts) n_gt += static_cast<long>(g.size());
  if (n_gt == 0) return 0.0;
  const auto ranked = detail::rank_detections(dets);
  if (ranked.empty()) return 0.0;
  const auto is_tp = detail::match_ranked(ranked, dets, gts, iou_thr);

  std::vector<double> precision(ranked.size()), recall(ranked.size());
  long tp = 0, fp = 0;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    if (is_tp[i]) ++tp;
    else ++fp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(tp + fp);
    recall[i] = static_cast<double>(tp) / static_cast<double>(n_gt);
  }
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i)
    precision[static_cast<std::size_t>(i)] =
        std::max(precision[static_cast<std::size_t>(i)], precision[static_cast<std::size_t>(i + 1)]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

/// Operating-point precision/recall/F-scores at a confidence threshold.
inline MetricsReport prf_at_threshold(const std::vector<std::vector<Detection>>& dets,
                                      const std::vector<std::vector<GtBox>>& gts,
                                      double conf_threshold, double iou_thr = 0.5) {
  if (dets.size() != gts.size())
    raise(ErrorCode::ShapeMismatch, "detection/gt image counts disagree");
  std::vector<std::vector<Detection>> filtered(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (const Detection& d : dets[i])
      if (d.score >= conf_threshold) filtered[i].push_back(d);
  const auto ranked = detail::rank_detections(filtered);
  const auto is_tp = detail::match_ranked(ranked, filtered, gts, iou_thr);

  MetricsReport r;
  for (bool t : is_tp)
    if (t) ++r.tp;
    else ++r.fp;
  long n_gt = 0;
  for (const auto& g : gts) n_gt += static_cast<long>(g.size());
  r.fn = n_gt - r.tp;
  r.precision = (r.tp + r.fp) > 0 ? static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp) : 0.0;
  r.recall = (r.tp + r.fn) > 0 ? static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn) : 0.0;
  std::tie(r.f1, r.f2) = f_scores(r.precision, r.recall);
  return r;
}

/// Full evaluation pass: forward every sample without augmentation,
/// decode at the configured confidence, NMS, then metrics. Deterministic
/// fold in sample order.
inline MetricsReport evaluate(const DetectorParams& params,
                              const std::vector<LabeledSample>& dataset, const ModelSpec& spec,
                              const EvalConfig& cfg = {}) {
  if (dataset.empty()) raise(ErrorCode::InvalidConfig, "evaluate on an empty dataset");
  const AnchorGrid grid = spec.anchor_grid();
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<GtBox>> gts;
  dets.reserve(dataset.size());
  gts.reserve(dataset.size());
  for (const LabeledSample& s : dataset) {
    const DetectorOutput out = forward(params, s.image, spec);
    dets.push_back(nms(decode_detections(out, grid, cfg.conf_threshold), cfg.nms_iou));
    gts.push_back(s.boxes);
  }
  MetricsReport r = prf_at_threshold(dets, gts, cfg.conf_threshold);
  r.map50 = average_precision_50(dets, gts);
  return r;
}

}  // namespace consisaug
