#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "consisaug/errors.hpp"
#include "consisaug/tensor.hpp"

namespace consisaug {

/// Axis-aligned box, continuous pixel coordinates. The image spans
/// [0, W] x [0, H]; a flip of coordinate x is W - x (no index off-by-one).
struct BoxCWH {
  double cx = 0, cy = 0, w = 0, h = 0;

  double x0() const { return cx - 0.5 * w; }
  double x1() const { return cx + 0.5 * w; }
  double y0() const { return cy - 0.5 * h; }
  double y1() const { return cy + 0.5 * h; }

  static BoxCWH from_corners(double x0, double y0, double x1, double y1) {
    return {0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0};
  }
};

/// Anchor-relative parameterization: normalized center displacement and
/// log-scale extents. Under a mirror flip only the mirrored center
/// component negates; dw and dh carry over unchanged.
struct DeltaBox {
  double dcx = 0, dcy = 0, dw = 0, dh = 0;
};

struct GtBox {
  int class_id = 0;
  BoxCWH box;
};

enum class FlipKind { Horizontal, Vertical, Rotate180 };

inline constexpr std::array<FlipKind, 3> kAllFlipKinds{FlipKind::Horizontal, FlipKind::Vertical,
                                                       FlipKind::Rotate180};

inline const char* flip_name(FlipKind k) {
  switch (k) {
    case FlipKind::Horizontal: return "horizontal";
    case FlipKind::Vertical: return "vertical";
    case FlipKind::Rotate180: return "rotate180";
  }
  return "?";
}

inline DeltaBox encode(const BoxCWH& box, const BoxCWH& anchor) {
  if (!(anchor.w > 0) || !(anchor.h > 0) || !(box.w > 0) || !(box.h > 0))
    raise(ErrorCode::DomainError, "encode requires positive box and anchor extents");
  return {(box.cx - anchor.cx) / anchor.w, (box.cy - anchor.cy) / anchor.h,
          std::log(box.w / anchor.w), std::log(box.h / anchor.h)};
}

inline BoxCWH decode(const DeltaBox& d, const BoxCWH& anchor) {
  return {anchor.cx + d.dcx * anchor.w, anchor.cy + d.dcy * anchor.h, anchor.w * std::exp(d.dw),
          anchor.h * std::exp(d.dh)};
}

inline BoxCWH flip_box(const BoxCWH& b, FlipKind k, double image_h, double image_w) {
  BoxCWH r = b;
  if (k == FlipKind::Horizontal || k == FlipKind::Rotate180) r.cx = image_w - b.cx;
  if (k == FlipKind::Vertical || k == FlipKind::Rotate180) r.cy = image_h - b.cy;
  return r;
}

inline DeltaBox flip_delta(const DeltaBox& d, FlipKind k) {
  DeltaBox r = d;
  if (k == FlipKind::Horizontal || k == FlipKind::Rotate180) r.dcx = -d.dcx;
  if (k == FlipKind::Vertical || k == FlipKind::Rotate180) r.dcy = -d.dcy;
  return r;
}

/// Flip a CxHxW image. Plain data transform; any tape linkage is dropped.
inline Tensor flip_image(const Tensor& image, FlipKind k) {
  if (image.rank() != 3) raise(ErrorCode::ShapeMismatch, "flip_image expects CxHxW");
  const int c = image.shape[0], h = image.shape[1], w = image.shape[2];
  const bool fx = k == FlipKind::Horizontal || k == FlipKind::Rotate180;
  const bool fy = k == FlipKind::Vertical || k == FlipKind::Rotate180;
  Tensor out = Tensor::zeros(image.shape);
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < h; ++y) {
      const int sy = fy ? h - 1 - y : y;
      for (int x = 0; x < w; ++x) {
        const int sx = fx ? w - 1 - x : x;
        out.data[static_cast<std::size_t>((ci * h + y) * w + x)] =
            image.data[static_cast<std::size_t>((ci * h + sy) * w + sx)];
      }
    }
  return out;
}

inline double iou(const BoxCWH& a, const BoxCWH& b) {
  if (!(a.w > 0) || !(a.h > 0) || !(b.w > 0) || !(b.h > 0))
    raise(ErrorCode::DomainError, "iou requires positive extents");
  const double ix = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  const double iy = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  const double inter = ix * iy;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return inter / uni;
}

/// Regular S x S grid of anchor centers with a fixed shape set per cell.
/// Anchor k decomposes as k = (i*S + j)*A + s with centers at
/// ((j+0.5)*stride, (i+0.5)*stride).
struct AnchorGrid {
  int grid_size = 0;
  double stride = 0;
  std::vector<std::pair<double, double>> anchor_shapes;  // (w, h) pixel pairs
  double image_size = 0;

  static AnchorGrid make(double image_size, double stride,
                         std::vector<std::pair<double, double>> shapes) {
    AnchorGrid g;
    g.stride = stride;
    g.image_size = image_size;
    g.anchor_shapes = std::move(shapes);
    const double cells = image_size / stride;
    g.grid_size = static_cast<int>(cells);
    if (static_cast<double>(g.grid_size) * stride != image_size)
      raise(ErrorCode::InvalidImageSize, "image size must be a multiple of the anchor stride");
    if (g.anchor_shapes.empty()) raise(ErrorCode::InvalidConfig, "anchor shape set is empty");
    return g;
  }

  int shapes_per_cell() const { return static_cast<int>(anchor_shapes.size()); }
  int num_anchors() const { return grid_size * grid_size * shapes_per_cell(); }

  BoxCWH anchor(int k) const {
    const int a = shapes_per_cell();
    const int s = k % a;
    const int cell = k / a;
    const int j = cell % grid_size;
    const int i = cell / grid_size;
    return {(j + 0.5) * stride, (i + 0.5) * stride, anchor_shapes[static_cast<std::size_t>(s)].first,
            anchor_shapes[static_cast<std::size_t>(s)].second};
  }
};

/// Bijection k -> k' pairing each anchor with the anchor at its flipped
/// center. Flips are involutions, so the permutation is self-inverse.
struct AnchorPermutation {
  std::vector<int> map;

  int operator[](int k) const { return map[static_cast<std::size_t>(k)]; }
  int size() const { return static_cast<int>(map.size()); }

  bool is_involution() const {
    for (int k = 0; k < size(); ++k) {
      const int m = (*this)[k];
      if (m < 0 || m >= size() || (*this)[m] != k) return false;
    }
    return true;
  }
};

inline AnchorPermutation anchor_permutation(const AnchorGrid& grid, FlipKind kind) {
  const int S = grid.grid_size;
  const int A = grid.shapes_per_cell();
  const bool fx = kind == FlipKind::Horizontal || kind == FlipKind::Rotate180;
  const bool fy = kind == FlipKind::Vertical || kind == FlipKind::Rotate180;
  AnchorPermutation perm;
  perm.map.resize(static_cast<std::size_t>(grid.num_anchors()));
  for (int i = 0; i < S; ++i)
    for (int j = 0; j < S; ++j)
      for (int s = 0; s < A; ++s) {
        const int ii = fy ? S - 1 - i : i;
        const int jj = fx ? S - 1 - j : j;
        perm.map[static_cast<std::size_t>((i * S + j) * A + s)] = (ii * S + jj) * A + s;
      }
  return perm;
}

}  // namespace consisaug
