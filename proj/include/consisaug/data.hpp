#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "consisaug/boxgeom.hpp"
#include "consisaug/digest.hpp"
#include "consisaug/errors.hpp"
#include "consisaug/rng.hpp"
#include "consisaug/tensor.hpp"

namespace consisaug {

namespace fs = std::filesystem;

struct LabeledSample {
  Tensor image;  // 3xHxW, values in [0, 1]
  std::vector<GtBox> boxes;
  std::string id;
};

/// Knobs of one synthetic domain. Two built-in presets differ in palette,
/// lesion size distribution and texture so that train/test distribution
/// shift can be exercised without real data.
struct DomainConfig {
  std::array<double, 3> base_mean{0.78, 0.46, 0.42};
  std::array<double, 3> base_std{0.04, 0.03, 0.03};
  double vignette_strength = 0.55;
  int specular_min = 1, specular_max = 4;
  int polyp_min = 0, polyp_max = 3;
  double radius_min = 5.0, radius_max = 12.0;  // >= 3 px required
  double ecc_min = 0.65, ecc_max = 1.0;
  double texture_scale = 0.045;

  static DomainConfig domain_a() { return DomainConfig{}; }

  static DomainConfig domain_b() {
    DomainConfig c;
    c.base_mean = {0.62, 0.34, 0.36};
    c.base_std = {0.05, 0.04, 0.04};
    c.vignette_strength = 0.7;
    c.specular_min = 2;
    c.specular_max = 6;
    c.radius_min = 4.0;
    c.radius_max = 9.0;
    c.ecc_min = 0.6;
    c.texture_scale = 0.075;
    return c;
  }

  void validate() const {
    if (radius_min < 3.0 || radius_max < radius_min)
      raise(ErrorCode::InvalidConfig, "polyp radius range invalid (min 3 px)");
    if (polyp_min < 0 || polyp_max < polyp_min)
      raise(ErrorCode::InvalidConfig, "polyp count range invalid");
    if (specular_min < 0 || specular_max < specular_min)
      raise(ErrorCode::InvalidConfig, "specular count range invalid");
    if (!(ecc_min > 0) || ecc_max > 1.0 || ecc_max < ecc_min)
      raise(ErrorCode::InvalidConfig, "eccentricity range invalid");
  }
};

// ---------------------------------------------------------------------------
// PPM (P6, 8-bit) serialization
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> encode_ppm(const Tensor& image) {
  if (image.rank() != 3 || image.shape[0] != 3)
    raise(ErrorCode::ShapeMismatch, "encode_ppm expects a 3xHxW tensor");
  const int h = image.shape[1], w = image.shape[2];
  std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.reserve(bytes.size() + static_cast<std::size_t>(3 * h * w));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = image.data[static_cast<std::size_t>((c * h + y) * w + x)];
        const double q = std::clamp(v, 0.0, 1.0) * 255.0;
        bytes.push_back(static_cast<std::uint8_t>(std::lround(q)));
      }
  return bytes;
}

inline Tensor decode_ppm(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& why) -> void {
    raise(ErrorCode::CorruptImage, origin + ": " + why);
  };
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      const char c = static_cast<char>(bytes[pos]);
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> int {
    skip_ws();
    std::size_t start = pos;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') ++pos;
    if (pos == start) fail("expected integer in header");
    return std::stoi(std::string(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                                 bytes.begin() + static_cast<std::ptrdiff_t>(pos)));
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') fail("not a P6 ppm");
  pos = 2;
  const int w = read_int();
  const int h = read_int();
  const int maxval = read_int();
  if (w <= 0 || h <= 0 || maxval != 255) fail("unsupported ppm geometry");
  ++pos;  // single whitespace after maxval
  const std::size_t need = static_cast<std::size_t>(3) * w * h;
  if (bytes.size() - pos < need) fail("truncated pixel payload");
  Tensor image = Tensor::zeros({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        image.data[static_cast<std::size_t>((c * h + y) * w + x)] =
            static_cast<double>(bytes[pos + static_cast<std::size_t>((y * w + x) * 3 + c)]) / 255.0;
  return image;
}

inline void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) raise(ErrorCode::IoError, "cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) raise(ErrorCode::IoError, "write failed: " + path.string());
}

inline std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) raise(ErrorCode::IoError, "cannot open for reading: " + path.string());
  const auto size = f.tellg();
  f.seekg(0);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
  f.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!f) raise(ErrorCode::IoError, "read failed: " + path.string());
  return bytes;
}

// ---------------------------------------------------------------------------
// Label files: one `class cx cy w h` line per box, normalized to [0, 1]
// ---------------------------------------------------------------------------

inline std::string encode_labels(const std::vector<GtBox>& boxes, int image_h, int image_w) {
  std::string out;
  char line[160];
  for (const GtBox& b : boxes) {
    std::snprintf(line, sizeof(line), "%d %.17g %.17g %.17g %.17g\n", b.class_id,
                  b.box.cx / image_w, b.box.cy / image_h, b.box.w / image_w, b.box.h / image_h);
    out += line;
  }
  return out;
}

inline std::vector<GtBox> decode_labels(const std::string& text, int image_h, int image_w,
                                        const std::string& origin) {
  std::vector<GtBox> boxes;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    GtBox b;
    double cx, cy, w, h;
    if (!(ls >> b.class_id >> cx >> cy >> w >> h))
      raise(ErrorCode::ParseError,
            origin + ":" + std::to_string(line_no) + ": expected `class cx cy w h`");
    std::string rest;
    if (ls >> rest)
      raise(ErrorCode::ParseError, origin + ":" + std::to_string(line_no) + ": trailing fields");
    if (b.class_id < 0)
      raise(ErrorCode::ParseError, origin + ":" + std::to_string(line_no) + ": negative class id");
    if (!(w > 0) || !(h > 0))
      raise(ErrorCode::ParseError,
            origin + ":" + std::to_string(line_no) + ": box extents must be positive");
    b.box = {cx * image_w, cy * image_h, w * image_w, h * image_h};
    boxes.push_back(b);
  }
  return boxes;
}

// ---------------------------------------------------------------------------
// Synthetic dataset generation
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string path;  // relative to the dataset directory
  std::string sha256;
};

namespace detail {

inline double smoothstep(double edge0, double edge1, double x) {
  const double t = std::clamp((x - edge0) / (edge1 - edge0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

/// Low-resolution value noise upsampled bilinearly; gives the mucosa-like
/// blotchiness that per-pixel noise alone lacks.
inline std::vector<double> blotch_field(int h, int w, int cell, Rng& rng) {
  const int gh = h / cell + 2, gw = w / cell + 2;
  std::vector<double> grid(static_cast<std::size_t>(gh * gw));
  for (double& v : grid) v = rng.normal();
  std::vector<double> out(static_cast<std::size_t>(h * w));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double fy = static_cast<double>(y) / cell;
      const double fx = static_cast<double>(x) / cell;
      const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
      const double ty = fy - y0, tx = fx - x0;
      const double a = grid[static_cast<std::size_t>(y0 * gw + x0)];
      const double b = grid[static_cast<std::size_t>(y0 * gw + x0 + 1)];
      const double c = grid[static_cast<std::size_t>((y0 + 1) * gw + x0)];
      const double d = grid[static_cast<std::size_t>((y0 + 1) * gw + x0 + 1)];
      out[static_cast<std::size_t>(y * w + x)] =
          (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
    }
  return out;
}

}  // namespace detail

/// Render one synthetic endoscopy-like sample. Deterministic per
/// (config, seed, index); callers derive the per-image seed.
inline LabeledSample render_synthetic_sample(const DomainConfig& cfg, int image_size,
                                             std::uint64_t image_seed, const std::string& id) {
  const int H = image_size, W = image_size;
  Rng rng(image_seed);
  LabeledSample s;
  s.id = id;
  s.image = Tensor::zeros({3, H, W});

  std::array<double, 3> base{};
  for (int c = 0; c < 3; ++c) base[static_cast<std::size_t>(c)] = rng.normal(cfg.base_mean[static_cast<std::size_t>(c)], cfg.base_std[static_cast<std::size_t>(c)]);

  const auto blotch = detail::blotch_field(H, W, 8, rng);
  const double cx0 = 0.5 * W, cy0 = 0.5 * H;
  const double rmax = std::sqrt(cx0 * cx0 + cy0 * cy0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double r = std::sqrt((px - cx0) * (px - cx0) + (py - cy0) * (py - cy0)) / rmax;
      const double vig = 1.0 - cfg.vignette_strength * r * r;
      const double tex = blotch[static_cast<std::size_t>(y * W + x)] * cfg.texture_scale;
      for (int c = 0; c < 3; ++c) {
        const double chroma = c == 0 ? 1.0 : 0.75;  // texture tints red slightly more
        s.image.data[static_cast<std::size_t>((c * H + y) * W + x)] =
            (base[static_cast<std::size_t>(c)] + chroma * tex) * vig;
      }
    }

  // Elliptical lesions with soft edges and a slight color contrast.
  const int n_polyps = rng.uniform_int(cfg.polyp_min, cfg.polyp_max);
  for (int p = 0; p < n_polyps; ++p) {
    const double a = rng.uniform(cfg.radius_min, cfg.radius_max);
    const double b = a * rng.uniform(cfg.ecc_min, cfg.ecc_max);
    const double theta = rng.uniform(0.0, M_PI);
    const double ct = std::cos(theta), st = std::sin(theta);
    const double hx = std::sqrt(a * a * ct * ct + b * b * st * st);
    const double hy = std::sqrt(a * a * st * st + b * b * ct * ct);
    const double margin = 2.0;
    const double cx = rng.uniform(hx + margin, W - hx - margin);
    const double cy = rng.uniform(hy + margin, H - hy - margin);
    const double dr = rng.uniform(0.06, 0.16);
    const double lighten = rng.coin(0.35) ? 1.0 : -1.0;
    const std::array<double, 3> tint{lighten * dr * 1.1, lighten * dr * 0.35,
                                     lighten * dr * 0.30};

    const int x_lo = std::max(0, static_cast<int>(std::floor(cx - hx - 2)));
    const int x_hi = std::min(W - 1, static_cast<int>(std::ceil(cx + hx + 2)));
    const int y_lo = std::max(0, static_cast<int>(std::floor(cy - hy - 2)));
    const int y_hi = std::min(H - 1, static_cast<int>(std::ceil(cy + hy + 2)));
    for (int y = y_lo; y <= y_hi; ++y)
      for (int x = x_lo; x <= x_hi; ++x) {
        const double dx = (x + 0.5) - cx, dy = (y + 0.5) - cy;
        const double u = (dx * ct + dy * st) / a;
        const double v = (-dx * st + dy * ct) / b;
        const double d2 = u * u + v * v;
        const double alpha = 1.0 - detail::smoothstep(0.7, 1.0, std::sqrt(std::max(0.0, d2)));
        if (alpha <= 0.0) continue;
        for (int c = 0; c < 3; ++c) {
          auto& px = s.image.data[static_cast<std::size_t>((c * H + y) * W + x)];
          px += alpha * tint[static_cast<std::size_t>(c)];
        }
      }
    s.boxes.push_back(GtBox{0, BoxCWH{cx, cy, 2 * hx, 2 * hy}});
  }

  // Specular highlights on top.
  const int n_spec = rng.uniform_int(cfg.specular_min, cfg.specular_max);
  for (int i = 0; i < n_spec; ++i) {
    const double cx = rng.uniform(2.0, W - 2.0);
    const double cy = rng.uniform(2.0, H - 2.0);
    const double sigma = rng.uniform(0.6, 1.6);
    const int rad = static_cast<int>(std::ceil(3 * sigma));
    for (int y = std::max(0, static_cast<int>(cy) - rad);
         y <= std::min(H - 1, static_cast<int>(cy) + rad); ++y)
      for (int x = std::max(0, static_cast<int>(cx) - rad);
           x <= std::min(W - 1, static_cast<int>(cx) + rad); ++x) {
        const double dx = (x + 0.5) - cx, dy = (y + 0.5) - cy;
        const double g = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
        for (int c = 0; c < 3; ++c) {
          auto& px = s.image.data[static_cast<std::size_t>((c * H + y) * W + x)];
          px += 0.8 * g;
        }
      }
  }

  for (double& v : s.image.data) v = std::clamp(v, 0.0, 1.0);
  return s;
}

/// Write n samples as images/{id}.ppm + labels/{id}.txt plus manifest.txt
/// (relative path and SHA-256 of every file, sorted). Regeneration with the
/// same (config, seed) is bit-identical.
inline std::vector<ManifestEntry> generate_synthetic(const DomainConfig& cfg, int n,
                                                     std::uint64_t seed, const fs::path& out_dir,
                                                     int image_size = 64) {
  cfg.validate();
  if (n < 1) raise(ErrorCode::InvalidConfig, "need n >= 1 samples");
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "labels", ec);
  if (ec) raise(ErrorCode::IoError, "cannot create dataset directories under " + out_dir.string());

  std::vector<ManifestEntry> manifest;
  char idbuf[16];
  for (int i = 0; i < n; ++i) {
    std::snprintf(idbuf, sizeof(idbuf), "%05d", i);
    const std::string id = idbuf;
    LabeledSample s = render_synthetic_sample(cfg, image_size, mix_seed(seed, 0xDA7A, i), id);

    const auto ppm = encode_ppm(s.image);
    const std::string labels = encode_labels(s.boxes, image_size, image_size);
    write_file(out_dir / "images" / (id + ".ppm"), ppm);
    write_file(out_dir / "labels" / (id + ".txt"),
               std::vector<std::uint8_t>(labels.begin(), labels.end()));
    manifest.push_back({"images/" + id + ".ppm", sha256_hex(ppm)});
    manifest.push_back({"labels/" + id + ".txt", sha256_hex(labels)});
  }
  std::sort(manifest.begin(), manifest.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.path < b.path; });
  std::string mtext;
  for (const auto& e : manifest) mtext += e.path + " " + e.sha256 + "\n";
  write_file(out_dir / "manifest.txt", std::vector<std::uint8_t>(mtext.begin(), mtext.end()));
  return manifest;
}

/// Load a dataset directory (images/ + labels/), sorted by id. Missing
/// labels and undecodable images are hard errors, never skipped.
inline std::vector<LabeledSample> load_dataset(const fs::path& dir) {
  const fs::path images = dir / "images";
  if (!fs::exists(dir)) raise(ErrorCode::IoError, "dataset directory missing: " + dir.string());
  std::vector<fs::path> files;
  if (fs::exists(images))
    for (const auto& entry : fs::directory_iterator(images))
      if (entry.is_regular_file() && entry.path().extension() == ".ppm")
        files.push_back(entry.path());
  std::sort(files.begin(), files.end());

  std::vector<LabeledSample> out;
  for (const auto& img_path : files) {
    const std::string id = img_path.stem().string();
    const fs::path label_path = dir / "labels" / (id + ".txt");
    if (!fs::exists(label_path))
      raise(ErrorCode::MissingLabel, "no label file for image " + img_path.string());
    LabeledSample s;
    s.id = id;
    s.image = decode_ppm(read_file(img_path), img_path.string());
    const auto label_bytes = read_file(label_path);
    s.boxes = decode_labels(std::string(label_bytes.begin(), label_bytes.end()), s.image.shape[1],
                            s.image.shape[2], label_path.string());
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentResult {
  LabeledSample sample;
  int dropped_boxes = 0;
};

namespace detail {

/// Resample about the image center by factor s (bilinear, zero padding);
/// boxes map as c' = center + s*(c - center), extents scale by s.
inline LabeledSample scale_about_center(const LabeledSample& in, double s, int* dropped) {
  const int H = in.image.shape[1], W = in.image.shape[2];
  const double cx0 = 0.5 * W, cy0 = 0.5 * H;
  LabeledSample out;
  out.id = in.id;
  out.image = Tensor::zeros(in.image.shape);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      // source position of this output pixel center
      const double sx = cx0 + ((x + 0.5) - cx0) / s - 0.5;
      const double sy = cy0 + ((y + 0.5) - cy0) / s - 0.5;
      const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
      const double tx = sx - x0, ty = sy - y0;
      for (int c = 0; c < 3; ++c) {
        auto sample_at = [&](int yy, int xx) -> double {
          if (xx < 0 || xx >= W || yy < 0 || yy >= H) return 0.0;
          return in.image.data[static_cast<std::size_t>((c * H + yy) * W + xx)];
        };
        const double v = (sample_at(y0, x0) * (1 - tx) + sample_at(y0, x0 + 1) * tx) * (1 - ty) +
                         (sample_at(y0 + 1, x0) * (1 - tx) + sample_at(y0 + 1, x0 + 1) * tx) * ty;
        out.image.data[static_cast<std::size_t>((c * H + y) * W + x)] = v;
      }
    }
  for (const GtBox& b : in.boxes) {
    BoxCWH nb{cx0 + s * (b.box.cx - cx0), cy0 + s * (b.box.cy - cy0), s * b.box.w, s * b.box.h};
    // clip to image bounds
    const double x0 = std::max(0.0, nb.x0()), x1 = std::min(static_cast<double>(W), nb.x1());
    const double y0 = std::max(0.0, nb.y0()), y1 = std::min(static_cast<double>(H), nb.y1());
    if (x1 - x0 < 2.0 || y1 - y0 < 2.0) {  // degenerate after clipping
      if (dropped) ++*dropped;
      continue;
    }
    out.boxes.push_back(GtBox{b.class_id, BoxCWH::from_corners(x0, y0, x1, y1)});
  }
  return out;
}

}  // namespace detail

/// First augmentation stage: pixel noise, scale jitter and (optionally) a
/// flip, each applied with probability 1/2. All decision draws happen up
/// front in a fixed order so that runs with and without the flip toggle
/// stay aligned on the remaining draws.
inline AugmentResult initial_augment(const LabeledSample& sample, std::uint64_t rng_seed,
                                     bool enable_flip) {
  Rng rng(rng_seed);
  const bool do_noise = rng.coin();
  const double sigma = rng.uniform(0.0, 0.05);
  const bool do_scale = rng.coin();
  const double s = rng.uniform(0.75, 1.25);
  const bool do_flip = rng.coin();
  const FlipKind kind = kAllFlipKinds[static_cast<std::size_t>(rng.uniform_int(0, 2))];

  AugmentResult r;
  r.sample = sample;
  if (do_noise) {
    for (double& v : r.sample.image.data) v = std::clamp(v + rng.normal(0.0, sigma), 0.0, 1.0);
  }
  if (do_scale && s != 1.0) {
    r.sample = detail::scale_about_center(r.sample, s, &r.dropped_boxes);
  }
  if (enable_flip && do_flip) {
    const int H = r.sample.image.shape[1], W = r.sample.image.shape[2];
    r.sample.image = flip_image(r.sample.image, kind);
    for (GtBox& b : r.sample.boxes) b.box = flip_box(b.box, kind, H, W);
  }
  return r;
}

/// Second stage (teacher branch): one uniformly chosen flip of the whole
/// sample. The teacher input is exactly flip_image(student input).
struct AugmentedPair {
  LabeledSample student;
  LabeledSample teacher;
  FlipKind kind = FlipKind::Horizontal;
};

inline AugmentedPair make_pair(const LabeledSample& sample_after_initial, std::uint64_t rng_seed) {
  Rng rng(rng_seed);
  AugmentedPair pair;
  pair.kind = kAllFlipKinds[static_cast<std::size_t>(rng.uniform_int(0, 2))];
  pair.student = sample_after_initial;
  pair.teacher.id = sample_after_initial.id;
  const int H = sample_after_initial.image.shape[1], W = sample_after_initial.image.shape[2];
  pair.teacher.image = flip_image(sample_after_initial.image, pair.kind);
  for (const GtBox& b : sample_after_initial.boxes)
    pair.teacher.boxes.push_back(GtBox{b.class_id, flip_box(b.box, pair.kind, H, W)});
  return pair;
}

}  // namespace consisaug
