#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "consisaug/autodiff.hpp"
#include "consisaug/boxgeom.hpp"
#include "consisaug/rng.hpp"
#include "consisaug/tensor.hpp"

namespace consisaug {

/// Architecture description: a 3->16->32->64 stride-2 backbone followed by
/// a 1x1 head emitting A*(C+1+4) channels at stride 8. The anchor set is
/// axis-aligned, so flips never exchange anchor widths and heights.
struct ModelSpec {
  int num_classes = 1;
  int image_size = 64;
  int stride = 8;
  std::vector<std::pair<double, double>> anchor_shapes{{12, 12}, {24, 24}, {16, 28}};

  int grid_size() const { return image_size / stride; }
  int anchors_per_cell() const { return static_cast<int>(anchor_shapes.size()); }
  int num_anchors() const { return grid_size() * grid_size() * anchors_per_cell(); }
  int fields_per_anchor() const { return num_classes + 1 + 4; }
  int head_channels() const { return anchors_per_cell() * fields_per_anchor(); }

  AnchorGrid anchor_grid() const {
    return AnchorGrid::make(image_size, stride, anchor_shapes);
  }

  void validate() const {
    if (image_size < stride || image_size % stride != 0)
      raise(ErrorCode::InvalidImageSize, "image size must be a positive multiple of " +
                                             std::to_string(stride));
    if (num_classes < 1) raise(ErrorCode::InvalidConfig, "need at least one foreground class");
  }

  std::string describe() const {
    std::string s = "conv3x3s2:3-16-32-64|head1x1:" + std::to_string(head_channels()) +
                    "|img:" + std::to_string(image_size) + "|classes:" + std::to_string(num_classes) +
                    "|anchors:";
    for (const auto& [w, h] : anchor_shapes)
      s += std::to_string(static_cast<int>(w)) + "x" + std::to_string(static_cast<int>(h)) + ",";
    return s;
  }

  /// FNV-1a over the architecture description; stored in checkpoints.
  std::uint32_t arch_hash() const {
    std::uint32_t h = 2166136261u;
    for (unsigned char c : describe()) {
      h ^= c;
      h *= 16777619u;
    }
    return h;
  }
};

/// One parameter set (student or teacher share this layout).
struct DetectorParams {
  Tensor c1w, c1b, c2w, c2b, c3w, c3b, hw, hb;
  std::uint64_t step = 0;

  template <typename F>
  void for_each(F&& f) {
    f("conv1.w", c1w);
    f("conv1.b", c1b);
    f("conv2.w", c2w);
    f("conv2.b", c2b);
    f("conv3.w", c3w);
    f("conv3.b", c3b);
    f("head.w", hw);
    f("head.b", hb);
  }

  template <typename F>
  void for_each(F&& f) const {
    const_cast<DetectorParams*>(this)->for_each(
        [&](const char* name, Tensor& t) { f(name, static_cast<const Tensor&>(t)); });
  }

  /// Drop tape references from all tensors (used after a training step).
  void release_tape() {
    for_each([](const char*, Tensor& t) {
      t.node = -1;
      t.tape = nullptr;
      t.requires_grad = false;
    });
  }
};

/// Per-anchor predictions. cls rows are post-softmax distributions over
/// background + classes; loc rows are [dcx, dcy, dw, dh].
struct DetectorOutput {
  Tensor cls;  // K x (C+1)
  Tensor loc;  // K x 4
};

struct StudentTeacher {
  DetectorParams student;
  DetectorParams teacher;
  double tau = 0.01;
};

namespace detail {

inline Tensor he_uniform(Shape shape, int fan_in, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = rng.uniform(-limit, limit);
  return t;
}

}  // namespace detail

/// Fan-in-scaled uniform init, deterministic per seed; the teacher starts
/// as an exact copy of the student.
inline StudentTeacher init_params(std::uint64_t seed, const ModelSpec& spec, double tau = 0.01) {
  spec.validate();
  Rng rng(mix_seed(seed, 0x1217u));
  StudentTeacher st;
  st.tau = tau;
  DetectorParams& p = st.student;
  p.c1w = detail::he_uniform({16, 3, 3, 3}, 3 * 9, rng);
  p.c1b = Tensor::zeros({16});
  p.c2w = detail::he_uniform({32, 16, 3, 3}, 16 * 9, rng);
  p.c2b = Tensor::zeros({32});
  p.c3w = detail::he_uniform({64, 32, 3, 3}, 32 * 9, rng);
  p.c3b = Tensor::zeros({64});
  p.hw = detail::he_uniform({spec.head_channels(), 64, 1, 1}, 64, rng);
  p.hb = Tensor::zeros({spec.head_channels()});
  p.step = 0;
  st.teacher = st.student;
  return st;
}

inline StudentTeacher init_params(std::uint64_t seed, int num_classes, int image_size,
                                  double tau = 0.01) {
  ModelSpec spec;
  spec.num_classes = num_classes;
  spec.image_size = image_size;
  return init_params(seed, spec, tau);
}

/// Forward pass. If the parameter tensors are watched on a tape the whole
/// graph is recorded; with plain parameters the result is plain data (this
/// is how the teacher and evaluation run).
inline DetectorOutput forward(const DetectorParams& p, const Tensor& image, const ModelSpec& spec) {
  if (image.shape != Shape{3, spec.image_size, spec.image_size})
    raise(ErrorCode::ShapeMismatch, "forward input must be 3x" + std::to_string(spec.image_size) +
                                        "x" + std::to_string(spec.image_size));
  Tensor x = relu(conv2d(image, p.c1w, p.c1b, 2, 1));
  x = relu(conv2d(x, p.c2w, p.c2b, 2, 1));
  x = relu(conv2d(x, p.c3w, p.c3b, 2, 1));
  Tensor head = conv2d(x, p.hw, p.hb, 1, 0);  // [A*F, S, S]

  const int S = spec.grid_size();
  const int A = spec.anchors_per_cell();
  const int F = spec.fields_per_anchor();
  const int C1 = spec.num_classes + 1;
  const int K = spec.num_anchors();

  std::vector<std::int64_t> cls_idx(static_cast<std::size_t>(K) * C1);
  std::vector<std::int64_t> loc_idx(static_cast<std::size_t>(K) * 4);
  for (int i = 0; i < S; ++i)
    for (int j = 0; j < S; ++j)
      for (int a = 0; a < A; ++a) {
        const int k = (i * S + j) * A + a;
        for (int f = 0; f < C1; ++f)
          cls_idx[static_cast<std::size_t>(k * C1 + f)] =
              (static_cast<std::int64_t>(a * F + f) * S + i) * S + j;
        for (int c = 0; c < 4; ++c)
          loc_idx[static_cast<std::size_t>(k * 4 + c)] =
              (static_cast<std::int64_t>(a * F + C1 + c) * S + i) * S + j;
      }

  DetectorOutput out;
  out.cls = softmax(gather(head, std::move(cls_idx), {K, C1}), 1);
  out.loc = gather(head, std::move(loc_idx), {K, 4});
  return out;
}

/// Eq.-style EMA: theta_t <- tau*theta_s + (1-tau)*theta_t. tau = 1 copies
/// the student, tau = 0 freezes the teacher; the common "decay" convention
/// is decay = 1 - tau.
inline void ema_update(StudentTeacher& st) {
  const double tau = st.tau;
  if (tau < 0.0 || tau > 1.0) raise(ErrorCode::InvalidConfig, "tau must lie in [0, 1]");
  DetectorParams& s = st.student;
  DetectorParams& t = st.teacher;
  auto blend = [&](Tensor& ts, Tensor& tt) {
    for (std::size_t i = 0; i < ts.data.size(); ++i)
      tt.data[i] = tau * ts.data[i] + (1.0 - tau) * tt.data[i];
  };
  blend(s.c1w, t.c1w);
  blend(s.c1b, t.c1b);
  blend(s.c2w, t.c2w);
  blend(s.c2b, t.c2b);
  blend(s.c3w, t.c3w);
  blend(s.c3b, t.c3b);
  blend(s.hw, t.hw);
  blend(s.hb, t.hb);
  t.step = s.step;
}

}  // namespace consisaug
