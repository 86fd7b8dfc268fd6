#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "consisaug/data.hpp"
#include "consisaug/eval.hpp"
#include "consisaug/model.hpp"
#include "consisaug/rng.hpp"

using namespace consisaug;

TEST_CASE("f-scores reproduce published arithmetic") {
  // P=0.575, R=0.453 -> F1=0.507, F2=0.473 (pins F_beta with beta=2)
  const auto [f1, f2] = f_scores(0.575, 0.453);
  CHECK(std::abs(f1 - 0.507) < 1e-3);
  CHECK(std::abs(f2 - 0.473) < 1e-3);
  CHECK(f1 == Catch::Approx(0.50676070038910506).margin(1e-12));
  CHECK(f2 == Catch::Approx(0.47307482746095169).margin(1e-12));

  const auto [e1, e2] = f_scores(0.5, 0.5);
  CHECK(e1 == Catch::Approx(0.5));
  CHECK(e2 == Catch::Approx(0.5));

  CHECK(f_scores(0, 0).first == 0.0);
  CHECK(f_scores(0, 0).second == 0.0);

  // F2 weights recall: P > R => F2 < F1 and vice versa
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const double p = rng.uniform(0.05, 0.95), r = rng.uniform(0.05, 0.95);
    const auto [a, b] = f_scores(p, r);
    if (p > r) CHECK(b < a);
    if (p < r) CHECK(b > a);
  }
}

TEST_CASE("decode_detections") {
  ModelSpec spec;
  const AnchorGrid grid = spec.anchor_grid();
  const int K = grid.num_anchors();
  DetectorOutput uniform;
  uniform.cls = Tensor::full({K, 2}, 0.5);
  uniform.loc = Tensor::zeros({K, 4});
  CHECK(decode_detections(uniform, grid, 0.6).empty());   // score 0.5 < 0.6
  CHECK(decode_detections(uniform, grid, 0.0).size() == static_cast<std::size_t>(K));

  // monotonicity: raising the threshold never adds detections
  Rng rng(7);
  DetectorOutput random_out;
  random_out.cls = Tensor::zeros({K, 2});
  for (int k = 0; k < K; ++k) {
    const double bg = rng.uniform(0.0, 1.0);
    random_out.cls.data[static_cast<std::size_t>(k * 2)] = bg;
    random_out.cls.data[static_cast<std::size_t>(k * 2 + 1)] = 1 - bg;
  }
  random_out.loc = Tensor::zeros({K, 4});
  std::size_t prev = K + 1;
  for (double thr : {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}) {
    const auto dets = decode_detections(random_out, grid, thr);
    CHECK(dets.size() <= prev);
    prev = dets.size();
    for (const auto& d : dets) CHECK(d.score >= thr);
  }
}

TEST_CASE("nms") {
  const Detection a{BoxCWH{10, 10, 6, 6}, 0, 0.9, 0};
  const Detection b{BoxCWH{10, 10, 6, 6}, 0, 0.8, 1};
  const auto kept = nms({a, b}, 0.45);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].score == 0.9);

  const Detection c{BoxCWH{40, 40, 6, 6}, 0, 0.7, 2};
  const auto kept2 = nms({a, b, c}, 0.45);
  CHECK(kept2.size() == 2);

  // subset with non-increasing scores; idempotent
  Rng rng(11);
  std::vector<Detection> dets;
  for (int i = 0; i < 40; ++i)
    dets.push_back(Detection{BoxCWH{rng.uniform(10, 54), rng.uniform(10, 54), rng.uniform(4, 16),
                                    rng.uniform(4, 16)},
                             0, rng.uniform(0, 1), i});
  const auto once = nms(dets, 0.5);
  CHECK(once.size() <= dets.size());
  for (std::size_t i = 1; i < once.size(); ++i) CHECK(once[i].score <= once[i - 1].score);
  const auto twice = nms(once, 0.5);
  REQUIRE(twice.size() == once.size());
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(twice[i].anchor_index == once[i].anchor_index);
}

TEST_CASE("average precision") {
  const GtBox gt{0, BoxCWH{20, 20, 10, 10}};

  // every gt matched once, no false positives
  std::vector<std::vector<Detection>> perfect{{Detection{gt.box, 0, 1.0, 0}}};
  std::vector<std::vector<GtBox>> gts{{gt}};
  CHECK(average_precision_50(perfect, gts) == Catch::Approx(1.0));

  // no detections at all
  std::vector<std::vector<Detection>> none{{}};
  CHECK(average_precision_50(none, gts) == 0.0);

  // 1 gt, two detections: 0.9 with IoU 0.6 matches first; 0.8 (IoU 0.7) is FP.
  // hand-built PR curve: (P=1, R=1) then (P=0.5, R=1); envelope integral = 1.0
  auto box_with_iou = [&](double target) {
    // for equal 10x10 boxes shifted horizontally by dx: IoU = (10-dx)/(10+dx)
    const double dx = 10.0 * (1 - target) / (1 + target);
    BoxCWH b = gt.box;
    b.cx += dx;
    return b;
  };
  const Detection d1{box_with_iou(0.6), 0, 0.9, 0};
  const Detection d2{box_with_iou(0.7), 0, 0.8, 1};
  CHECK(iou(d1.box, gt.box) == Catch::Approx(0.6).margin(1e-12));
  CHECK(iou(d2.box, gt.box) == Catch::Approx(0.7).margin(1e-12));
  std::vector<std::vector<Detection>> two{{d1, d2}};
  CHECK(average_precision_50(two, gts) == Catch::Approx(1.0));

  // invariance under strictly monotone transformation of scores
  Rng rng(13);
  std::vector<std::vector<Detection>> dets(4);
  std::vector<std::vector<GtBox>> many_gts(4);
  for (int img = 0; img < 4; ++img) {
    for (int g = 0; g < 3; ++g)
      many_gts[static_cast<std::size_t>(img)].push_back(
          GtBox{0, BoxCWH{rng.uniform(12, 52), rng.uniform(12, 52), 10, 10}});
    for (int i = 0; i < 8; ++i)
      dets[static_cast<std::size_t>(img)].push_back(
          Detection{BoxCWH{rng.uniform(12, 52), rng.uniform(12, 52), 10, 10}, 0,
                    rng.uniform(0.01, 0.99), i});
  }
  const double base = average_precision_50(dets, many_gts);
  auto transformed = dets;
  for (auto& img : transformed)
    for (auto& d : img) d.score = std::tanh(3 * d.score) + 2;  // strictly monotone
  CHECK(average_precision_50(transformed, many_gts) == Catch::Approx(base).margin(1e-12));
}

TEST_CASE("prf at threshold") {
  const GtBox gt{0, BoxCWH{20, 20, 10, 10}};
  std::vector<std::vector<GtBox>> gts{{gt}};

  // zero detections: all-zero convention
  const MetricsReport zero = prf_at_threshold({{}}, gts, 0.5);
  CHECK(zero.precision == 0.0);
  CHECK(zero.recall == 0.0);
  CHECK(zero.f1 == 0.0);
  CHECK(zero.f2 == 0.0);
  CHECK(zero.fn == 1);

  // perfect prediction fixed point
  std::vector<std::vector<Detection>> perfect{{Detection{gt.box, 0, 1.0, 0}}};
  const MetricsReport p = prf_at_threshold(perfect, gts, 0.5);
  CHECK(p.precision == 1.0);
  CHECK(p.recall == 1.0);
  CHECK(p.f1 == 1.0);
  CHECK(p.f2 == 1.0);

  // empty-label images contribute only false positives
  std::vector<std::vector<GtBox>> empty_gts{{}};
  std::vector<std::vector<Detection>> stray{{Detection{gt.box, 0, 0.9, 0}}};
  const MetricsReport fp = prf_at_threshold(stray, empty_gts, 0.5);
  CHECK(fp.tp == 0);
  CHECK(fp.fp == 1);
  CHECK(fp.fn == 0);
}

TEST_CASE("evaluate determinism") {
  ModelSpec spec;
  spec.image_size = 32;
  StudentTeacher st = init_params(3, spec);
  DomainConfig cfg = DomainConfig::domain_a();
  cfg.polyp_min = 1;
  std::vector<LabeledSample> ds;
  for (int i = 0; i < 5; ++i)
    ds.push_back(render_synthetic_sample(cfg, 32, mix_seed(4, 0xDA7A, i), "s" + std::to_string(i)));
  const MetricsReport a = evaluate(st.student, ds, spec);
  const MetricsReport b = evaluate(st.student, ds, spec);
  CHECK(a.precision == b.precision);
  CHECK(a.recall == b.recall);
  CHECK(a.map50 == b.map50);
  CHECK(a.f1 == b.f1);
  CHECK(a.tp == b.tp);
  CHECK_THROWS_AS(evaluate(st.student, {}, spec), Error);
}
