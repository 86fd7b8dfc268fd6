#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "consisaug/autodiff.hpp"
#include "consisaug/boxgeom.hpp"
#include "consisaug/model.hpp"

namespace consisaug {

/// Per-term loss values of one step or batch. `con` is the unweighted sum
/// of the two consistency terms; `total` applies the consistency weight
/// (1.0 reproduces the plain additive objective).
struct LossBreakdown {
  double sup = 0;
  double con_loc = 0;
  double con_cls = 0;
  double con = 0;
  double weight = 1.0;
  double total = 0;

  static LossBreakdown make(double sup, double con_loc, double con_cls, double weight = 1.0) {
    LossBreakdown b;
    b.sup = sup;
    b.con_loc = con_loc;
    b.con_cls = con_cls;
    b.con = con_loc + con_cls;
    b.weight = weight;
    b.total = sup + weight * b.con;
    return b;
  }

  bool finite() const {
    return std::isfinite(sup) && std::isfinite(con_loc) && std::isfinite(con_cls) &&
           std::isfinite(total);
  }
};

/// Eq.-7 style combination of the two consistency terms.
inline double consistency_total(double con_loc, double con_cls) { return con_loc + con_cls; }

/// Eq.-8 style objective assembly from already-computed scalars.
inline LossBreakdown total_loss(double sup, double con, double consistency_weight = 1.0) {
  if (consistency_weight < 0) raise(ErrorCode::InvalidConfig, "consistency weight must be >= 0");
  LossBreakdown b;
  b.sup = sup;
  b.con = con;
  b.con_loc = con;  // caller-level split unknown here; see make() for the full form
  b.con_cls = 0;
  b.weight = consistency_weight;
  b.total = sup + consistency_weight * con;
  return b;
}

// ---------------------------------------------------------------------------
// Localization consistency
// ---------------------------------------------------------------------------

/// Squared-error consistency for one anchor pair. The teacher delta is the
/// raw output at the permuted index; the mirrored-axis sign correction is
/// applied here before comparing.
inline double loc_consistency_pair(const DeltaBox& student, const DeltaBox& teacher,
                                   FlipKind kind) {
  const DeltaBox t = flip_delta(teacher, kind);
  const double d0 = student.dcx - t.dcx;
  const double d1 = student.dcy - t.dcy;
  const double d2 = student.dw - t.dw;
  const double d3 = student.dh - t.dh;
  return 0.25 * (d0 * d0 + d1 * d1 + d2 * d2 + d3 * d3);
}

namespace detail {

inline std::vector<int> mask_indices(const std::vector<std::uint8_t>& mask) {
  std::vector<int> idx;
  for (std::size_t k = 0; k < mask.size(); ++k)
    if (mask[k]) idx.push_back(static_cast<int>(k));
  return idx;
}

}  // namespace detail

inline std::vector<std::uint8_t> full_mask(int num_anchors) {
  return std::vector<std::uint8_t>(static_cast<std::size_t>(num_anchors), 1);
}

/// Mean pairwise localization consistency over the masked anchors.
/// student_out.loc rides the tape; the teacher side is consumed as plain
/// data (stop-gradient), so only student parameters receive gradient.
inline Tensor loc_consistency_total(const DetectorOutput& student_out,
                                    const DetectorOutput& teacher_out,
                                    const AnchorPermutation& perm, FlipKind kind,
                                    const std::vector<std::uint8_t>& mask) {
  const Tensor& sloc = student_out.loc;
  if (sloc.rank() != 2 || sloc.shape[1] != 4)
    raise(ErrorCode::ShapeMismatch, "student loc must be Kx4");
  const Tensor tloc = detach(teacher_out.loc);
  if (tloc.shape != sloc.shape)
    raise(ErrorCode::ShapeMismatch, "student and teacher loc shapes disagree");
  const int K = sloc.shape[0];
  if (perm.size() != K || static_cast<int>(mask.size()) != K)
    raise(ErrorCode::ShapeMismatch, "permutation/mask size does not match anchor count");

  const std::vector<int> idx = detail::mask_indices(mask);
  if (idx.empty()) {
    warn("loc consistency: no anchors selected (NoAnchors), returning 0");
    return Tensor::scalar(0.0);
  }
  const int M = static_cast<int>(idx.size());

  std::vector<std::int64_t> srow(static_cast<std::size_t>(M) * 4);
  Tensor corrected = Tensor::zeros({M, 4});
  for (int r = 0; r < M; ++r) {
    const int k = idx[static_cast<std::size_t>(r)];
    const int kp = perm[k];
    for (int c = 0; c < 4; ++c)
      srow[static_cast<std::size_t>(r * 4 + c)] = static_cast<std::int64_t>(k) * 4 + c;
    const DeltaBox raw{tloc.data[static_cast<std::size_t>(kp * 4 + 0)],
                       tloc.data[static_cast<std::size_t>(kp * 4 + 1)],
                       tloc.data[static_cast<std::size_t>(kp * 4 + 2)],
                       tloc.data[static_cast<std::size_t>(kp * 4 + 3)]};
    const DeltaBox fixed = flip_delta(raw, kind);
    corrected.data[static_cast<std::size_t>(r * 4 + 0)] = fixed.dcx;
    corrected.data[static_cast<std::size_t>(r * 4 + 1)] = fixed.dcy;
    corrected.data[static_cast<std::size_t>(r * 4 + 2)] = fixed.dw;
    corrected.data[static_cast<std::size_t>(r * 4 + 3)] = fixed.dh;
  }
  // mean over pairs of (1/4) * sum over components == mean over all M*4 cells
  Tensor picked = gather(sloc, std::move(srow), {M, 4});
  return mean_all(square(sub(picked, corrected)));
}

// ---------------------------------------------------------------------------
// Jensen-Shannon divergence
// ---------------------------------------------------------------------------

/// Plain-value JSD with natural log: JS(p,q) = (KL(p||m) + KL(q||m)) / 2,
/// m = (p+q)/2. Zero entries contribute zero. Bounded by ln 2.
inline double jsd(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) raise(ErrorCode::ShapeMismatch, "jsd operands must match");
  double sp = 0, sq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0 || q[i] < 0) raise(ErrorCode::NotADistribution, "negative probability");
    sp += p[i];
    sq += q[i];
  }
  if (std::abs(sp - 1.0) > 1e-9 || std::abs(sq - 1.0) > 1e-9)
    raise(ErrorCode::NotADistribution, "probabilities must sum to 1");
  double js = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0) js += 0.5 * p[i] * std::log(p[i] / m);
    if (q[i] > 0) js += 0.5 * q[i] * std::log(q[i] / m);
  }
  return js;
}

inline double jsd(const std::vector<double>& p, const std::vector<double>& q) {
  return jsd(std::span<const double>(p), std::span<const double>(q));
}

/// Taped JSD between rows of a taped distribution matrix and rows of a
/// plain one; returns the scalar sum over all rows (divide by row count
/// for a mean).
inline Tensor jsd_rows_sum(const Tensor& p, const Tensor& q) {
  if (p.shape != q.shape) raise(ErrorCode::ShapeMismatch, "jsd_rows operands must match");
  Tensor m = scale(add(p, q), 0.5);
  Tensor terms = add(kl_term(p, m), kl_term(q, m));
  return scale(sum_all(terms), 0.5);
}

/// Mean JSD between student class distributions and permuted teacher
/// distributions over the masked anchors. Teacher rows are plain data.
inline Tensor cls_consistency_total(const DetectorOutput& student_out,
                                    const DetectorOutput& teacher_out,
                                    const AnchorPermutation& perm,
                                    const std::vector<std::uint8_t>& mask) {
  const Tensor& scls = student_out.cls;
  if (scls.rank() != 2) raise(ErrorCode::ShapeMismatch, "student cls must be Kx(C+1)");
  const Tensor tcls = detach(teacher_out.cls);
  if (tcls.shape != scls.shape)
    raise(ErrorCode::ShapeMismatch, "student and teacher cls shapes disagree");
  const int K = scls.shape[0];
  const int C1 = scls.shape[1];
  if (perm.size() != K || static_cast<int>(mask.size()) != K)
    raise(ErrorCode::ShapeMismatch, "permutation/mask size does not match anchor count");

  const std::vector<int> idx = detail::mask_indices(mask);
  if (idx.empty()) {
    warn("cls consistency: no anchors selected (NoAnchors), returning 0");
    return Tensor::scalar(0.0);
  }
  const int M = static_cast<int>(idx.size());

  std::vector<std::int64_t> srow(static_cast<std::size_t>(M) * C1);
  Tensor trows = Tensor::zeros({M, C1});
  for (int r = 0; r < M; ++r) {
    const int k = idx[static_cast<std::size_t>(r)];
    const int kp = perm[k];
    for (int c = 0; c < C1; ++c) {
      srow[static_cast<std::size_t>(r * C1 + c)] = static_cast<std::int64_t>(k) * C1 + c;
      trows.data[static_cast<std::size_t>(r * C1 + c)] = tcls.data[static_cast<std::size_t>(kp * C1 + c)];
    }
  }
  Tensor picked = gather(scls, std::move(srow), {M, C1});
  return scale(jsd_rows_sum(picked, trows), 1.0 / static_cast<double>(M));
}

// ---------------------------------------------------------------------------
// Supervised detection loss
// ---------------------------------------------------------------------------

enum class AnchorRole : std::uint8_t { Negative = 0, Positive = 1, Ignore = 2 };

/// Per-anchor assignment produced by match_targets.
struct MatchedTargets {
  std::vector<AnchorRole> role;
  std::vector<int> gt_index;        // valid for positives
  std::vector<DeltaBox> delta;      // valid for positives
  std::vector<int> class_id;        // valid for positives
  int num_positive = 0;
  int num_negative = 0;
};

/// IoU-threshold assignment: an anchor is positive when its best IoU
/// reaches pos_threshold (argmax gt, ties to the lowest gt index),
/// negative when its best IoU is below neg_threshold, ignored in between.
/// Each gt additionally forces its single best-IoU anchor positive (ties
/// to the lowest anchor index; an anchor already forced by an earlier gt
/// keeps the earlier assignment).
inline MatchedTargets match_targets(const AnchorGrid& grid, const std::vector<GtBox>& gts,
                                    double pos_threshold = 0.5, double neg_threshold = 0.4) {
  if (!(0 <= neg_threshold && neg_threshold <= pos_threshold && pos_threshold <= 1))
    raise(ErrorCode::InvalidThresholds, "need 0 <= neg <= pos <= 1");
  const int K = grid.num_anchors();
  const int G = static_cast<int>(gts.size());
  MatchedTargets out;
  out.role.assign(static_cast<std::size_t>(K), AnchorRole::Negative);
  out.gt_index.assign(static_cast<std::size_t>(K), -1);
  out.delta.assign(static_cast<std::size_t>(K), DeltaBox{});
  out.class_id.assign(static_cast<std::size_t>(K), -1);
  if (G == 0) {
    out.num_negative = K;
    return out;
  }

  std::vector<double> best_iou(static_cast<std::size_t>(K), 0.0);
  std::vector<int> best_gt(static_cast<std::size_t>(K), -1);
  std::vector<double> gt_best_iou(static_cast<std::size_t>(G), -1.0);
  std::vector<int> gt_best_anchor(static_cast<std::size_t>(G), -1);
  for (int k = 0; k < K; ++k) {
    const BoxCWH a = grid.anchor(k);
    for (int g = 0; g < G; ++g) {
      const double v = iou(a, gts[static_cast<std::size_t>(g)].box);
      if (v > best_iou[static_cast<std::size_t>(k)]) {
        best_iou[static_cast<std::size_t>(k)] = v;
        best_gt[static_cast<std::size_t>(k)] = g;
      } else if (best_gt[static_cast<std::size_t>(k)] < 0) {
        best_gt[static_cast<std::size_t>(k)] = g;  // all-zero IoU: keep lowest index
      }
      if (v > gt_best_iou[static_cast<std::size_t>(g)]) {
        gt_best_iou[static_cast<std::size_t>(g)] = v;
        gt_best_anchor[static_cast<std::size_t>(g)] = k;
      }
    }
  }

  auto assign_positive = [&](int k, int g) {
    out.role[static_cast<std::size_t>(k)] = AnchorRole::Positive;
    out.gt_index[static_cast<std::size_t>(k)] = g;
    const GtBox& gt = gts[static_cast<std::size_t>(g)];
    out.delta[static_cast<std::size_t>(k)] = encode(gt.box, grid.anchor(k));
    out.class_id[static_cast<std::size_t>(k)] = gt.class_id;
  };

  for (int k = 0; k < K; ++k) {
    const double v = best_iou[static_cast<std::size_t>(k)];
    if (v >= pos_threshold)
      assign_positive(k, best_gt[static_cast<std::size_t>(k)]);
    else if (v < neg_threshold)
      out.role[static_cast<std::size_t>(k)] = AnchorRole::Negative;
    else
      out.role[static_cast<std::size_t>(k)] = AnchorRole::Ignore;
  }
  for (int g = 0; g < G; ++g) {
    const int k = gt_best_anchor[static_cast<std::size_t>(g)];
    if (k >= 0 && out.role[static_cast<std::size_t>(k)] != AnchorRole::Positive) assign_positive(k, g);
  }
  for (int k = 0; k < K; ++k) {
    if (out.role[static_cast<std::size_t>(k)] == AnchorRole::Positive) ++out.num_positive;
    if (out.role[static_cast<std::size_t>(k)] == AnchorRole::Negative) ++out.num_negative;
  }
  return out;
}

/// Cross-entropy over background + classes on positive and negative
/// anchors plus smooth-L1 on positive deltas; each term averaged over its
/// own contributor count, then summed.
inline Tensor supervised_loss(const DetectorOutput& student_out, const MatchedTargets& targets) {
  const Tensor& cls = student_out.cls;
  const Tensor& loc = student_out.loc;
  if (cls.rank() != 2 || loc.rank() != 2 || loc.shape[1] != 4 || cls.shape[0] != loc.shape[0])
    raise(ErrorCode::ShapeMismatch, "detector output must be Kx(C+1) and Kx4");
  const int K = cls.shape[0];
  const int C1 = cls.shape[1];
  if (static_cast<int>(targets.role.size()) != K)
    raise(ErrorCode::ShapeMismatch, "targets built for a different anchor count");

  std::vector<std::int64_t> ce_idx;
  std::vector<std::int64_t> pos_loc_idx;
  std::vector<double> pos_loc_target;
  for (int k = 0; k < K; ++k) {
    switch (targets.role[static_cast<std::size_t>(k)]) {
      case AnchorRole::Ignore: break;
      case AnchorRole::Negative:
        ce_idx.push_back(static_cast<std::int64_t>(k) * C1 + 0);
        break;
      case AnchorRole::Positive: {
        const int cls_col = 1 + targets.class_id[static_cast<std::size_t>(k)];
        if (cls_col < 1 || cls_col >= C1)
          raise(ErrorCode::ShapeMismatch, "target class id out of range");
        ce_idx.push_back(static_cast<std::int64_t>(k) * C1 + cls_col);
        const DeltaBox& d = targets.delta[static_cast<std::size_t>(k)];
        for (int c = 0; c < 4; ++c) pos_loc_idx.push_back(static_cast<std::int64_t>(k) * 4 + c);
        pos_loc_target.push_back(d.dcx);
        pos_loc_target.push_back(d.dcy);
        pos_loc_target.push_back(d.dw);
        pos_loc_target.push_back(d.dh);
        break;
      }
    }
  }

  if (ce_idx.empty()) {
    warn("supervised loss: every anchor is ignored, returning 0");
    return Tensor::scalar(0.0);
  }

  const int n_ce = static_cast<int>(ce_idx.size());
  Tensor picked = gather(cls, std::move(ce_idx), {n_ce});
  // non-strict log: an underflowed probability surfaces as a non-finite
  // loss, which the trainer reports with the offending batch
  Tensor ce = scale(neg(sum_all(log(picked, false))), 1.0 / static_cast<double>(n_ce));

  if (pos_loc_idx.empty()) return ce;

  const int n_pos = static_cast<int>(pos_loc_target.size()) / 4;
  Tensor pred = gather(loc, std::move(pos_loc_idx), {n_pos, 4});
  Tensor target({n_pos, 4}, std::move(pos_loc_target));
  Tensor l1 = scale(sum_all(smooth_l1(sub(pred, target))), 1.0 / static_cast<double>(n_pos));
  return add(ce, l1);
}

}  // namespace consisaug
