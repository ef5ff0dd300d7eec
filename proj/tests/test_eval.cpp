#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "temp_dir.hpp"

#include "cae/eval.hpp"

#include <fstream>
#include <set>

using namespace cae;

namespace {

ErrorKind kind_of(const auto& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::io;
}

// Two Gaussian clouds `gap` apart along a random direction.
FeatureTable blobs(std::size_t n, std::size_t d, double gap, std::uint64_t seed) {
  Rng rng(seed);
  FeatureTable t;
  t.name = "test";
  for (std::size_t k = 0; k < d; ++k) t.feature_names.push_back("f" + std::to_string(k));
  for (std::size_t i = 0; i < n; ++i) {
    const int y = int(i % 2);
    std::vector<double> row(d);
    for (auto& v : row) v = rng.normal() + (y ? gap / std::sqrt(double(d)) : 0.0);
    t.rows.push_back(row);
    t.labels.push_back(y);
    t.groups.push_back("g" + std::to_string(i));
  }
  return t;
}

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("auroc examples") {
  CHECK(auroc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == 0.75);
  CHECK(auroc({0.1, 0.2, 0.3, 0.9}, {0, 0, 1, 1}) == 1.0);
  CHECK(auroc({0.9, 0.8, 0.3, 0.1}, {0, 0, 1, 1}) == 0.0);
  CHECK(auroc({0.5, 0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1, 1}) == 0.5);
  CHECK(kind_of([] { auroc({0.1, 0.2}, {1, 1}); }) == ErrorKind::invalid_argument);
  CHECK(kind_of([] { auroc({0.1, 0.2}, {1}); }) == ErrorKind::invalid_argument);
}

TEST_CASE("auroc equals brute-force pair counting") {
  Rng rng(9);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.below(49);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = rng.uniform();
      y[i] = int(rng.below(2));
    }
    y[0] = 0;
    y[1] = 1;
    // inject ties, including across classes
    for (std::size_t k = 0; k < n / 3; ++k) s[rng.below(n)] = s[rng.below(n)];
    if (trial % 7 == 0) for (auto& v : s) v = std::round(v * 4) / 4;
    REQUIRE(auroc(s, y) == oracle::auroc_pairs(s, y));
  }
}

TEST_CASE("auroc is invariant under monotone transforms") {
  Rng rng(2);
  std::vector<double> s(40), t(40);
  std::vector<int> y(40);
  for (std::size_t i = 0; i < 40; ++i) {
    s[i] = rng.uniform(-2, 2);
    t[i] = std::exp(3 * s[i]) + 7;
    y[i] = int(i % 3 == 0);
  }
  CHECK(auroc(s, y) == auroc(t, y));
}

TEST_CASE("gini") {
  CHECK(gini(5, 0) == 0.0);
  CHECK(gini(0, 3) == 0.0);
  CHECK(gini(4, 4) == 0.5);
  CHECK(gini(1, 3) == doctest::Approx(0.375));
}

TEST_CASE("logreg gradient matches finite differences") {
  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t n = 12, d = 4;
    std::vector<std::vector<double>> z(n, std::vector<double>(d));
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (auto& v : z[i]) v = rng.normal();
      y[i] = int(rng.below(2));
    }
    std::vector<double> w(d);
    for (auto& v : w) v = rng.normal();
    double b = rng.normal();
    std::vector<double> g;
    logreg_objective(z, y, w, b, 0.3, &g);
    const double h = 1e-6;
    for (std::size_t k = 0; k <= d; ++k) {
      auto at = [&](double delta) {
        auto w2 = w;
        double b2 = b;
        (k < d ? w2[k] : b2) += delta;
        return logreg_objective(z, y, w2, b2, 0.3);
      };
      const double numeric = (at(h) - at(-h)) / (2 * h);
      CHECK(std::abs(numeric - g[k]) <= 1e-6 * std::max(1.0, std::abs(g[k])));
    }
  }
}

TEST_CASE("logreg basics") {
  LogRegModel zero{{0, 0}, {1, 1}, {0, 0}, 0, 0, 0};
  for (double p : zero.predict_proba({{1, 2}, {-3, 4}})) CHECK(p == 0.5);

  FeatureTable t;
  t.feature_names = {"x"};
  for (int i = 0; i < 20; ++i) {
    t.rows.push_back({double(i) - 9.5});
    t.labels.push_back(i >= 10);
    t.groups.push_back(std::to_string(i));
  }
  auto m = fit_logreg(t);
  CHECK(m.gradient_norm < 1e-6);
  CHECK(auroc(m.predict_proba(t.rows), t.labels) == 1.0);
  CHECK(m.weights[0] > 0);
}

TEST_CASE("logreg ranking is invariant to feature scaling") {
  auto t = blobs(80, 5, 1.0, 3);
  auto scaled = t;
  for (auto& r : scaled.rows)
    for (auto& v : r) v *= 10;
  auto [train, test] = split(t, 0.25, 1);
  auto [strain, stest] = split(scaled, 0.25, 1);
  const double a = auroc(fit_logreg(train).predict_proba(test.rows), test.labels);
  const double b = auroc(fit_logreg(strain).predict_proba(stest.rows), stest.labels);
  CHECK(std::abs(a - b) <= 1e-3);
}

TEST_CASE("random forest") {
  SUBCASE("one tree separates an axis-aligned problem") {
    auto t = blobs(40, 3, 0.0, 5);
    for (std::size_t i = 0; i < t.size(); ++i) t.labels[i] = t.rows[i][0] > 0;
    RandomForestConfig cfg;
    cfg.trees = 1;
    cfg.bootstrap = false;
    cfg.max_features = 3;
    auto m = fit_rf(t, cfg);
    const auto p = m.predict_proba(t.rows);
    for (std::size_t i = 0; i < t.size(); ++i) CHECK((p[i] > 0.5) == bool(t.labels[i]));
    CHECK(m.trees[0].nodes[0].feature == 0);
  }
  SUBCASE("deterministic per seed") {
    auto t = blobs(60, 6, 2.0, 6);
    RandomForestConfig cfg;
    cfg.trees = 20;
    cfg.seed = 3;
    const auto a = fit_rf(t, cfg).predict_proba(t.rows);
    const auto b = fit_rf(t, cfg).predict_proba(t.rows);
    CHECK(a == b);
    cfg.seed = 4;
    CHECK(fit_rf(t, cfg).predict_proba(t.rows) != a);
  }
  SUBCASE("separable blobs score well out of sample") {
    auto t = blobs(100, 8, 4.0, 7);
    auto [train, test] = split(t, 0.2, 2);
    CHECK(auroc(fit_rf(train).predict_proba(test.rows), test.labels) > 0.9);
  }
  SUBCASE("single-class training set") {
    auto t = blobs(10, 2, 1.0, 8);
    for (auto& y : t.labels) y = 1;
    CHECK(kind_of([&] { fit_rf(t); }) == ErrorKind::invalid_argument);
  }
}

TEST_CASE("split is group aware") {
  auto t = blobs(50, 2, 1.0, 1);
  for (std::size_t i = 0; i < t.size(); ++i) t.groups[i] = "s" + std::to_string(i / 3);
  auto [train, test] = split(t, 0.2, 11);
  CHECK(train.size() + test.size() == 50);
  std::set<std::string> a(train.groups.begin(), train.groups.end());
  for (const auto& g : test.groups) CHECK(a.count(g) == 0);
  auto [train2, test2] = split(t, 0.2, 11);
  CHECK(test2.groups == test.groups);
  CHECK(kind_of([&] { split(t.subset({0, 1, 2, 3}), 0.2, 1); }) == ErrorKind::invalid_argument);
}

TEST_CASE("run_eval and shuffled null") {
  auto t = blobs(100, 6, 4.0, 12);
  auto r = run_eval(t, Classifier::logreg, 5, "blobs");
  CHECK(r.auroc > 0.9);
  CHECK(r.test_size == 20);
  CHECK(r.train_size == 80);

  Rng rng(1);
  double mean = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto shuffled = t;
    rng.shuffle(shuffled.labels.begin(), shuffled.labels.end());
    mean += run_eval(shuffled, Classifier::logreg, seed, "null").auroc / 20;
  }
  CHECK(mean >= 0.35);
  CHECK(mean <= 0.65);
}

TEST_CASE("feature table files") {
  TempDir dir;
  auto t = blobs(6, 2, 1.0, 1);
  t.rows[0][0] = 0.1;
  write_feature_table(t, dir / "f.csv");
  auto back = read_feature_table(dir / "f.csv", "test");
  CHECK(back.feature_names == t.feature_names);
  CHECK(back.rows == t.rows);
  CHECK(back.labels == t.labels);
  CHECK(back.groups == t.groups);

  std::ofstream(dir / "bad.csv") << "a,b,label,group\n1,2,3,g\n";
  CHECK(kind_of([&] { read_feature_table(dir / "bad.csv"); }) == ErrorKind::invalid_argument);
  std::ofstream(dir / "nan.csv") << "a,label,group\nnan,1,g\n";
  CHECK(kind_of([&] { read_feature_table(dir / "nan.csv"); }) == ErrorKind::numeric);
  std::ofstream(dir / "ragged.csv") << "a,label,group\n1,1\n";
  CHECK(kind_of([&] { read_feature_table(dir / "ragged.csv"); }) == ErrorKind::inconsistent);

  EvalReport r{"t", "CAE-3D", Classifier::random_forest, 0.75, 3, 8, 2};
  append_report(r, dir / "r.csv");
  append_report(r, dir / "r.csv");
  std::ifstream in(dir / "r.csv");
  std::string all((std::istreambuf_iterator<char>(in)), {});
  CHECK(all == "task,feature_set,classifier,auroc,seed,train_size,test_size\nt,CAE-3D,rf,0.75,3,8,2\nt,CAE-3D,rf,0.75,3,8,2\n");
}

}  // TEST_SUITE
