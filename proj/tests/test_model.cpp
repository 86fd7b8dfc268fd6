#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "consisaug/model.hpp"
#include "consisaug/rng.hpp"

using namespace consisaug;

namespace {

bool params_equal(const DetectorParams& a, const DetectorParams& b) {
  bool equal = true;
  a.for_each([&](const char* name, const Tensor& ta) {
    b.for_each([&](const char* name2, const Tensor& tb) {
      if (std::string(name) == name2 && ta.data != tb.data) equal = false;
    });
  });
  return equal;
}

Tensor random_image(int size, Rng& rng) {
  Tensor img = Tensor::zeros({3, size, size});
  for (double& v : img.data) v = rng.uniform();
  return img;
}

}  // namespace

TEST_CASE("init_params determinism and teacher copy") {
  const StudentTeacher a = init_params(42, 1, 64);
  const StudentTeacher b = init_params(42, 1, 64);
  CHECK(params_equal(a.student, b.student));         // bit-identical per seed
  CHECK(params_equal(a.student, a.teacher));         // same initial weight

  const StudentTeacher c = init_params(43, 1, 64);
  CHECK_FALSE(params_equal(a.student, c.student));

  CHECK_THROWS_AS(init_params(1, 1, 60), Error);  // not a multiple of the stride
  ModelSpec bad;
  bad.num_classes = 0;
  CHECK_THROWS_AS(init_params(1, bad), Error);
}

TEST_CASE("forward output contract") {
  ModelSpec spec;
  Rng rng(5);
  StudentTeacher st = init_params(7, spec);
  const Tensor img = random_image(64, rng);

  // zero head: uniform distributions, zero deltas
  StudentTeacher zero_head = st;
  for (double& v : zero_head.student.hw.data) v = 0;
  for (double& v : zero_head.student.hb.data) v = 0;
  const DetectorOutput uniform = forward(zero_head.student, img, spec);
  for (double v : uniform.cls.data) CHECK(v == Catch::Approx(0.5).margin(1e-12));
  for (double v : uniform.loc.data) CHECK(v == 0.0);

  // purity / determinism
  const DetectorOutput o1 = forward(st.student, img, spec);
  const DetectorOutput o2 = forward(st.student, img, spec);
  CHECK(o1.cls.data == o2.cls.data);
  CHECK(o1.loc.data == o2.loc.data);

  // rows are distributions
  const int C1 = spec.num_classes + 1;
  for (int k = 0; k < spec.num_anchors(); ++k) {
    double s = 0;
    for (int c = 0; c < C1; ++c) s += o1.cls.data[static_cast<std::size_t>(k * C1 + c)];
    CHECK(std::abs(s - 1.0) < 1e-9);
  }

  CHECK_THROWS_AS(forward(st.student, Tensor::zeros({3, 32, 32}), spec), Error);

  // K = (image_size/8)^2 * A across sizes
  for (int size : {8, 16, 32, 64}) {
    ModelSpec s2;
    s2.image_size = size;
    StudentTeacher st2 = init_params(1, s2);
    Rng r2(size);
    const DetectorOutput out = forward(st2.student, random_image(size, r2), s2);
    const int expected = (size / 8) * (size / 8) * 3;
    CHECK(out.cls.shape[0] == expected);
    CHECK(out.loc.shape[0] == expected);
  }
}

TEST_CASE("ema endpoints and scalar probe") {
  StudentTeacher st = init_params(11, 1, 64);
  Rng rng(13);
  st.teacher.for_each([&](const char*, Tensor& t) {
    for (double& v : t.data) v += rng.uniform(-0.1, 0.1);
  });

  StudentTeacher tau1 = st;
  tau1.tau = 1.0;
  ema_update(tau1);
  CHECK(params_equal(tau1.teacher, tau1.student));  // copies the student

  StudentTeacher tau0 = st;
  tau0.tau = 0.0;
  const DetectorParams before = tau0.teacher;
  ema_update(tau0);
  CHECK(params_equal(tau0.teacher, before));  // frozen teacher

  // scalar probe: tau=0.5, s=2, t=0 -> 1 exactly
  StudentTeacher probe = st;
  probe.tau = 0.5;
  probe.student.c1b.data[0] = 2.0;
  probe.teacher.c1b.data[0] = 0.0;
  ema_update(probe);
  CHECK(probe.teacher.c1b.data[0] == 1.0);
}

TEST_CASE("ema convexity") {
  // dyadic probe: exact arithmetic, zero tolerance
  StudentTeacher st = init_params(17, 1, 64);
  st.tau = 0.25;
  Rng rng(19);
  st.student.for_each([&](const char*, Tensor& t) {
    for (double& v : t.data) v = static_cast<double>(rng.uniform_int(-8, 8)) * 0.125;
  });
  st.teacher.for_each([&](const char*, Tensor& t) {
    for (double& v : t.data) v = static_cast<double>(rng.uniform_int(-8, 8)) * 0.125;
  });
  const DetectorParams prev = st.teacher;
  ema_update(st);
  int idx = 0;
  st.teacher.for_each([&](const char* name, const Tensor& t) {
    const Tensor* p = nullptr;
    prev.for_each([&](const char* n2, const Tensor& t2) {
      if (std::string(n2) == name) p = &t2;
    });
    const Tensor* s = nullptr;
    st.student.for_each([&](const char* n2, const Tensor& t2) {
      if (std::string(n2) == name) s = &t2;
    });
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      const double lo = std::min(p->data[i], s->data[i]);
      const double hi = std::max(p->data[i], s->data[i]);
      CHECK(t.data[i] >= lo);
      CHECK(t.data[i] <= hi);
    }
    ++idx;
  });

  // random-value probe with a few-ulp allowance
  StudentTeacher st2 = init_params(23, 1, 64);
  st2.tau = 0.37;
  Rng rng2(29);
  st2.teacher.for_each([&](const char*, Tensor& t) {
    for (double& v : t.data) v = rng2.uniform(-1, 1);
  });
  const DetectorParams prev2 = st2.teacher;
  ema_update(st2);
  st2.teacher.for_each([&](const char* name, const Tensor& t) {
    const Tensor* p = nullptr;
    prev2.for_each([&](const char* n2, const Tensor& t2) {
      if (std::string(n2) == name) p = &t2;
    });
    const Tensor* s = nullptr;
    st2.student.for_each([&](const char* n2, const Tensor& t2) {
      if (std::string(n2) == name) s = &t2;
    });
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      const double lo = std::min(p->data[i], s->data[i]);
      const double hi = std::max(p->data[i], s->data[i]);
      CHECK(t.data[i] >= lo - 4e-16);
      CHECK(t.data[i] <= hi + 4e-16);
    }
  });
}

TEST_CASE("ema geometric convergence with factor (1 - tau)") {
  // dyadic values keep every operation exact in binary floating point
  StudentTeacher st = init_params(31, 1, 64);
  st.tau = 0.5;
  st.student.for_each([&](const char*, Tensor& t) {
    for (double& v : t.data) v = 1.0;
  });
  st.teacher.for_each([&](const char*, Tensor& t) {
    for (double& v : t.data) v = 0.0;
  });
  double gap = 1.0;
  for (int n = 1; n <= 20; ++n) {
    ema_update(st);
    gap *= 0.5;
    st.teacher.for_each([&](const char*, const Tensor& t) {
      for (double v : t.data) CHECK(1.0 - v == gap);  // exact
    });
  }

  // general tau: |t - s| shrinks by exactly (1 - tau) within rounding
  StudentTeacher st2 = init_params(37, 1, 64);
  st2.tau = 0.01;
  Rng rng(41);
  st2.teacher.for_each([&](const char*, Tensor& t) {
    for (double& v : t.data) v += rng.uniform(-0.5, 0.5);
  });
  double before = 0, after = 0;
  st2.teacher.for_each([&](const char* name, const Tensor& t) {
    const Tensor* s = nullptr;
    st2.student.for_each([&](const char* n2, const Tensor& t2) {
      if (std::string(n2) == name) s = &t2;
    });
    for (std::size_t i = 0; i < t.data.size(); ++i) before += std::abs(t.data[i] - s->data[i]);
  });
  ema_update(st2);
  st2.teacher.for_each([&](const char* name, const Tensor& t) {
    const Tensor* s = nullptr;
    st2.student.for_each([&](const char* n2, const Tensor& t2) {
      if (std::string(n2) == name) s = &t2;
    });
    for (std::size_t i = 0; i < t.data.size(); ++i) after += std::abs(t.data[i] - s->data[i]);
  });
  CHECK(after == Catch::Approx(before * 0.99).epsilon(1e-12));
}

TEST_CASE("arch hash changes with the architecture") {
  ModelSpec a, b;
  b.image_size = 32;
  ModelSpec c;
  c.num_classes = 2;
  CHECK(a.arch_hash() != b.arch_hash());
  CHECK(a.arch_hash() != c.arch_hash());
  CHECK(a.arch_hash() == ModelSpec{}.arch_hash());
}
