#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "stair/grad_check.hpp"
#include "stair/ops.hpp"
#include "stair/optim.hpp"
#include "stair/rng.hpp"
#include "stair/tensor.hpp"

using namespace stair;

namespace {

Mat<double> random_mat(Index r, Index c, Rng& rng, double scale = 1.0) {
  Mat<double> m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = rng.normal() * scale;
  return m;
}

// Projects a matrix-valued op result to a scalar so finite differences can
// probe it through an arbitrary fixed direction.
Var<double> project(const Var<double>& x, const Mat<double>& dir) {
  return sum_all(mul(x, Var<double>::constant(dir)));
}

}  // namespace

TEST_CASE("matmul basics") {
  Mat<double> eye(2, 2);
  eye << 1, 0, 0, 1;
  Mat<double> v(2, 1);
  v << 3, 4;
  auto r = matmul(Var<double>(eye), Var<double>(v));
  CHECK(r.value()(0, 0) == 3);
  CHECK(r.value()(1, 0) == 4);

  Mat<double> a(1, 2);
  a << 1, 2;
  auto r2 = matmul(Var<double>(a), Var<double>(v));
  CHECK(r2.value()(0, 0) == doctest::Approx(11).epsilon(1e-15));

  Mat<double> bad(3, 3);
  CHECK_THROWS_AS(matmul(Var<double>(a), Var<double>(bad)), ShapeError);
  CHECK_THROWS_WITH_AS(matmul(Var<double>(a), Var<double>(bad)),
                       doctest::Contains("[1x2]"), ShapeError);
}

TEST_CASE("matmul matches a naive triple loop") {
  Rng rng(7, "matmul_oracle");
  Mat<double> a = random_mat(5, 4, rng);
  Mat<double> b = random_mat(4, 3, rng);
  auto r = matmul(Var<double>(a), Var<double>(b));
  for (Index i = 0; i < 5; ++i)
    for (Index j = 0; j < 3; ++j) {
      double acc = 0;
      for (Index k = 0; k < 4; ++k) acc += a(i, k) * b(k, j);
      CHECK(std::abs(r.value()(i, j) - acc) < 1e-12);
    }
}

TEST_CASE("softmax_rows examples and mask semantics") {
  Mat<double> x(1, 3);
  x << 0, 0, 0;
  auto r = softmax_rows(Var<double>(x));
  for (int j = 0; j < 3; ++j) CHECK(r.value()(0, j) == doctest::Approx(1.0 / 3).epsilon(1e-12));

  Mat<double> y(1, 3);
  y << 5, 100, 5;  // middle entry masked out, must not matter
  MaskMat m(1, 3);
  m << 1, 0, 1;
  auto r2 = softmax_rows(Var<double>(y), m);
  CHECK(r2.value()(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(r2.value()(0, 1) == 0.0);  // exactly zero
  CHECK(r2.value()(0, 2) == doctest::Approx(0.5).epsilon(1e-12));

  Mat<double> z(1, 3);
  z << 1, 2, 3;
  auto r3 = softmax_rows(Var<double>(z));
  CHECK(r3.value()(0, 0) == doctest::Approx(0.0900).epsilon(1e-2));
  CHECK(r3.value()(0, 1) == doctest::Approx(0.2447).epsilon(1e-2));
  CHECK(r3.value()(0, 2) == doctest::Approx(0.6652).epsilon(1e-2));
  // direct exp-normalize oracle
  double s = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int j = 0; j < 3; ++j)
    CHECK(std::abs(r3.value()(0, j) - std::exp(1.0 + j) / s) < 1e-12);

  MaskMat forbidden = MaskMat::Zero(1, 3);
  CHECK_THROWS_WITH_AS(softmax_rows(Var<double>(z), forbidden), doctest::Contains("row 0"),
                       MaskError);
}

TEST_CASE("softmax rows sum to one and respect masks exactly") {
  Rng rng(13, "softmax_prop");
  for (int trial = 0; trial < 20; ++trial) {
    const Index r = 1 + rng.uniform_int(6);
    const Index c = 1 + rng.uniform_int(9);
    Mat<double> x = random_mat(r, c, rng, 4.0);
    MaskMat m(r, c);
    for (Index i = 0; i < r; ++i) {
      bool any = false;
      for (Index j = 0; j < c; ++j) {
        m(i, j) = rng.uniform() < 0.5 ? 1 : 0;
        any = any || m(i, j);
      }
      if (!any) m(i, rng.uniform_int(c)) = 1;
    }
    auto y = softmax_rows(Var<double>(x), m);
    for (Index i = 0; i < r; ++i) {
      double sum = 0;
      for (Index j = 0; j < c; ++j) {
        if (!m(i, j)) CHECK(y.value()(i, j) == 0.0);
        if (m(i, j)) CHECK(y.value()(i, j) > 0.0);
        sum += y.value()(i, j);
      }
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("layer_norm examples") {
  Var<double> gain(Mat<double>::Ones(1, 4));
  Var<double> bias(Mat<double>::Zero(1, 4));

  Mat<double> c = Mat<double>::Constant(1, 4, 3.7);
  auto r = layer_norm(Var<double>(c), gain, bias);
  for (int j = 0; j < 4; ++j) CHECK(std::abs(r.value()(0, j)) < 1e-6);

  Var<double> gain2(Mat<double>::Ones(1, 2));
  Var<double> bias2(Mat<double>::Zero(1, 2));
  Mat<double> two(1, 2);
  two << 1, 3;
  auto r2 = layer_norm(Var<double>(two), gain2, bias2);
  CHECK(r2.value()(0, 0) == doctest::Approx(-1.0).epsilon(1e-4));  // population variance
  CHECK(r2.value()(0, 1) == doctest::Approx(1.0).epsilon(1e-4));

  // explicit mean/variance loop oracle on a random block
  Rng rng(3, "ln_oracle");
  Mat<double> x = random_mat(4, 8, rng, 2.0);
  Var<double> g8(random_mat(1, 8, rng)), b8(random_mat(1, 8, rng));
  auto y = layer_norm(Var<double>(x), g8, b8);
  for (Index i = 0; i < 4; ++i) {
    double mean = 0;
    for (Index j = 0; j < 8; ++j) mean += x(i, j);
    mean /= 8;
    double var = 0;
    for (Index j = 0; j < 8; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= 8;
    for (Index j = 0; j < 8; ++j) {
      double expect = (x(i, j) - mean) / std::sqrt(var + 1e-5) * g8.value()(0, j) +
                      b8.value()(0, j);
      CHECK(std::abs(y.value()(i, j) - expect) < 1e-10);
    }
  }

  CHECK_THROWS_AS(layer_norm(Var<double>(Mat<double>(2, 0)), Var<double>(Mat<double>(1, 0)),
                             Var<double>(Mat<double>(1, 0))),
                  ShapeError);
}

TEST_CASE("cross_entropy examples") {
  // uniform logits over V=100
  Mat<double> u = Mat<double>::Zero(1, 100);
  auto l = cross_entropy(Var<double>(u), {7});
  CHECK(l.value()(0, 0) == doctest::Approx(std::log(100.0)).epsilon(1e-12));

  // one-hot-correct logits: loss -> 0 as the margin grows
  double prev = 1e9;
  for (double margin : {2.0, 5.0, 10.0, 20.0}) {
    Mat<double> hot = Mat<double>::Zero(1, 5);
    hot(0, 2) = margin;
    auto lm = cross_entropy(Var<double>(hot), {2});
    CHECK(lm.value()(0, 0) < prev);
    prev = lm.value()(0, 0);
  }
  CHECK(prev < 1e-8);

  // log-sum-exp oracle on random logits, with an ignored row
  Rng rng(11, "ce_oracle");
  Mat<double> x = random_mat(3, 7, rng, 3.0);
  std::vector<int> targets{2, kIgnoreIndex, 5};
  auto loss = cross_entropy(Var<double>(x), targets);
  double total = 0;
  int n = 0;
  for (Index i = 0; i < 3; ++i) {
    if (targets[i] == kIgnoreIndex) continue;
    double mx = x.row(i).maxCoeff();
    double lse = 0;
    for (Index j = 0; j < 7; ++j) lse += std::exp(x(i, j) - mx);
    total += mx + std::log(lse) - x(i, targets[i]);
    ++n;
  }
  CHECK(std::abs(loss.value()(0, 0) - total / n) < 1e-10);

  CHECK_THROWS_AS(cross_entropy(Var<double>(x), {kIgnoreIndex, kIgnoreIndex, kIgnoreIndex}),
                  NumericError);
  CHECK_THROWS_AS(cross_entropy(Var<double>(x), {9, 0, 0}), VocabError);
}

TEST_CASE("adam examples") {
  SUBCASE("first step moves every element by exactly -lr") {
    Mat<float> w = Mat<float>::Constant(2, 3, 5.0f);
    Mat<float> before = w;
    AdamState<float> st;
    std::vector<ParamRef<float>> refs{{"w", &w}};
    std::vector<Mat<float>> grads{Mat<float>::Ones(2, 3)};
    adam_step(refs, grads, st, 0.1f);
    CHECK(st.step_count == 1);
    for (Index i = 0; i < w.size(); ++i)
      CHECK(w.reshaped()(i) == doctest::Approx(before.reshaped()(i) - 0.1).epsilon(1e-5));
  }
  SUBCASE("zero gradients leave parameters unchanged") {
    Mat<float> w = Mat<float>::Constant(2, 2, 1.5f);
    AdamState<float> st;
    std::vector<ParamRef<float>> refs{{"w", &w}};
    std::vector<Mat<float>> grads{Mat<float>::Zero(2, 2)};
    adam_step(refs, grads, st, 0.1f);
    CHECK(w(0, 0) == 1.5f);
    CHECK(w(1, 1) == 1.5f);
  }
  SUBCASE("descends w^2 from w=3") {
    Mat<double> w = Mat<double>::Constant(1, 1, 3.0);
    AdamState<double> st;
    std::vector<ParamRef<double>> refs{{"w", &w}};
    double prev = w(0, 0);
    for (int step = 0; step < 3; ++step) {
      std::vector<Mat<double>> grads{Mat<double>::Constant(1, 1, 2.0 * w(0, 0))};
      adam_step(refs, grads, st, 0.1);
      CHECK(w(0, 0) < prev);
      CHECK(w(0, 0) > 0.0);
      prev = w(0, 0);
    }
  }
  SUBCASE("non-finite gradient names the parameter") {
    Mat<float> w = Mat<float>::Zero(1, 1);
    AdamState<float> st;
    std::vector<ParamRef<float>> refs{{"layer0/wq", &w}};
    std::vector<Mat<float>> grads{Mat<float>::Constant(1, 1, std::nanf(""))};
    CHECK_THROWS_WITH_AS(adam_step(refs, grads, st, 0.1f), doctest::Contains("layer0/wq"),
                         NumericError);
  }
}

TEST_CASE("clip_global_norm") {
  SUBCASE("under the threshold: identity") {
    std::vector<Mat<double>> g{Mat<double>::Constant(1, 1, 0.05)};
    CHECK(clip_global_norm(g, 0.1) == 1.0);
    CHECK(g[0](0, 0) == 0.05);
  }
  SUBCASE("3-4-5 gradient scales to the max norm, direction preserved") {
    Mat<double> m(1, 2);
    m << 3, 4;
    std::vector<Mat<double>> g{m};
    double s = clip_global_norm(g, 0.1);
    CHECK(s == doctest::Approx(0.02).epsilon(1e-12));
    CHECK(std::abs(g[0].norm() - 0.1) < 1e-12);
    CHECK(g[0](0, 1) / g[0](0, 0) == doctest::Approx(4.0 / 3.0).epsilon(1e-12));
  }
  SUBCASE("post-clip norm across many tensors") {
    Rng rng(5, "clip");
    std::vector<Mat<double>> g;
    for (int i = 0; i < 6; ++i) g.push_back(random_mat(3, 4, rng, 2.0));
    clip_global_norm(g, 0.1);
    double sq = 0;
    for (const auto& m : g) sq += m.squaredNorm();
    CHECK(std::sqrt(sq) <= 0.1 + 1e-9);
  }
  SUBCASE("never increases the norm, never flips direction") {
    Rng rng(17, "clip_prop");
    for (int trial = 0; trial < 25; ++trial) {
      std::vector<Mat<double>> g{random_mat(2, 3, rng, 3.0)};
      Mat<double> before = g[0];
      double norm_before = before.norm();
      double max_norm = rng.uniform() * 4.0 + 1e-3;
      double s = clip_global_norm(g, max_norm);
      CHECK(g[0].norm() <= norm_before + 1e-12);
      CHECK(s <= 1.0);
      CHECK((g[0] - s * before).norm() < 1e-12);  // pure scaling
    }
  }
}

TEST_CASE("finite_diff_check on closed forms") {
  SUBCASE("f(w) = w^2 at w = 3") {
    Var<double> w(Mat<double>::Constant(1, 1, 3.0), true);
    std::vector<Var<double>> params{w};
    auto f = [&]() { return mul(w, w); };
    auto report = finite_diff_check<double>(f, params, 1e-5);
    CHECK(report.max_rel_err < 1e-8);
  }
  SUBCASE("constant function has zero gradient everywhere") {
    Var<double> w(Mat<double>::Constant(1, 1, 2.0), true);
    std::vector<Var<double>> params{w};
    auto f = [&]() { return Var<double>(Mat<double>::Constant(1, 1, 4.0)); };
    auto report = finite_diff_check<double>(f, params, 1e-5);
    CHECK(report.max_rel_err == 0.0);
  }
  SUBCASE("non-deterministic f is rejected") {
    Var<double> w(Mat<double>::Constant(1, 1, 2.0), true);
    std::vector<Var<double>> params{w};
    int calls = 0;
    auto f = [&]() { return Var<double>(Mat<double>::Constant(1, 1, double(++calls))); };
    CHECK_THROWS_AS(finite_diff_check<double>(f, params, 1e-5), OracleError);
  }
}

TEST_CASE("backward of every primitive matches central differences") {
  Rng shapes(23, "prim_shapes");
  auto rnd = [&](Index r, Index c, double s = 1.0) {
    Rng rng(shapes.next_u64(), "prim_fill");
    return random_mat(r, c, rng, s);
  };

  const Index m = 2 + shapes.uniform_int(3);
  const Index k = 2 + shapes.uniform_int(3);
  const Index n = 2 + shapes.uniform_int(3);

  SUBCASE("matmul / matmul_nt / add / sub / mul / scale / relu / slices") {
    Var<double> a(rnd(m, k), true);
    Var<double> b(rnd(k, n), true);
    Var<double> c(rnd(m, k), true);
    Var<double> row(rnd(1, k), true);
    Mat<double> dir1 = rnd(m, n), dir2 = rnd(m, k);
    std::vector<Var<double>> params{a, b, c, row};
    auto f = [&]() {
      auto p1 = project(matmul(a, b), dir1);
      auto p2 = project(matmul_nt(a, c), rnd(1, 1)(0, 0) * Mat<double>::Ones(m, m));
      auto p3 = project(add(a, c), dir2);
      auto p4 = project(sub(a, c), dir2);
      auto p5 = project(mul(a, c), dir2);
      auto p6 = project(scale(a, 1.7), dir2);
      auto p7 = project(relu(a), dir2);
      auto p8 = project(add_rowvec(a, row), dir2);
      auto p9 = project(slice_rows(a, 1, m - 1), dir2.middleRows(1, m - 1));
      auto p10 = project(slice_cols(a, 1, k - 1), Mat<double>(dir2.middleCols(1, k - 1)));
      auto p11 = project(concat_rows<double>({a, c}), rnd(2 * m, k));
      auto p12 = project(concat_cols<double>({a, c}), rnd(m, 2 * k));
      auto s = add(add(add(p1, p2), add(p3, p4)), add(add(p5, p6), add(p7, p8)));
      return add(s, add(add(p9, p10), add(p11, p12)));
    };
    auto report = finite_diff_check<double>(f, params, 1e-6);
    CHECK(report.max_rel_err < 1e-4);
  }

  SUBCASE("layer_norm / softmax / cross_entropy / embedding / gather_rel / sum_all") {
    Var<double> x(rnd(m, k, 2.0), true);
    Var<double> gain(rnd(1, k), true);
    Var<double> bias(rnd(1, k), true);
    Var<double> table(rnd(6, k), true);
    Var<double> qr(rnd(m, 5), true);
    MaskMat mask(m, k);
    Rng mr(9, "mask");
    for (Index i = 0; i < m; ++i) {
      for (Index j = 0; j < k; ++j) mask(i, j) = mr.uniform() < 0.6 ? 1 : 0;
      mask(i, 0) = 1;
    }
    IdxMat idx(m, k);
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < k; ++j) idx(i, j) = static_cast<int>(mr.uniform_int(5));
    std::vector<int> ids;
    for (Index i = 0; i < m; ++i) ids.push_back(static_cast<int>(mr.uniform_int(6)));
    std::vector<int> targets;
    for (Index i = 0; i < m; ++i)
      targets.push_back(i == 1 ? kIgnoreIndex : static_cast<int>(mr.uniform_int(k)));
    Mat<double> dir = rnd(m, k);
    std::vector<Var<double>> params{x, gain, bias, table, qr};
    auto f = [&]() {
      auto p1 = project(layer_norm(x, gain, bias), dir);
      auto p2 = project(softmax_rows(x, mask), dir);
      auto p3 = cross_entropy(x, targets);
      auto p4 = project(embedding_lookup(table, ids), dir);
      auto p5 = project(gather_rel(qr, idx), dir);
      auto p6 = sum_all(x);
      return add(add(p1, p2), add(add(p3, p4), add(p5, p6)));
    };
    auto report = finite_diff_check<double>(f, params, 1e-6);
    CHECK(report.max_rel_err < 1e-4);
  }
}

TEST_CASE("two forward+backward passes are bitwise identical") {
  Rng rng(31, "determinism");
  Mat<double> av = random_mat(4, 5, rng);
  Mat<double> bv = random_mat(5, 3, rng);
  auto run = [&]() {
    Var<double> a(av, true);
    Var<double> b(bv, true);
    Tape<double> tape;
    auto y = sum_all(relu(matmul(a, b)));
    tape.backward(y);
    return std::make_tuple(y.value()(0, 0), Mat<double>(a.grad()), Mat<double>(b.grad()));
  };
  auto [y1, ga1, gb1] = run();
  auto [y2, ga2, gb2] = run();
  CHECK(y1 == y2);
  CHECK((ga1 - ga2).cwiseAbs().maxCoeff() == 0.0);
  CHECK((gb1 - gb2).cwiseAbs().maxCoeff() == 0.0);
}
