#include "cae/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "byte_io.hpp"
#include "cae/error.hpp"
#include "cae/random.hpp"
#include "cae/split.hpp"

namespace cae {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

double parse_double(const std::string& s, const std::string& where) {
  double v = 0;
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) fail(ErrorKind::inconsistent, where + ": not a number '" + s + "'");
  return v;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double sigmoid(double m) {
  if (m >= 0) return 1.0 / (1.0 + std::exp(-m));
  const double e = std::exp(m);
  return e / (1.0 + e);
}

double softplus(double m) { return std::max(m, 0.0) + std::log1p(std::exp(-std::abs(m))); }

void require_both_classes(const std::vector<int>& labels, std::size_t at_least, const std::string& what) {
  const auto pos = std::size_t(std::count(labels.begin(), labels.end(), 1));
  const auto neg = labels.size() - pos;
  if (pos < at_least || neg < at_least)
    fail(ErrorKind::invalid_argument, what + " needs at least " + std::to_string(at_least) +
                                          " rows of each class (has " + std::to_string(neg) + " negative, " +
                                          std::to_string(pos) + " positive)");
}

}  // namespace

void FeatureTable::validate() const {
  if (labels.size() != rows.size() || groups.size() != rows.size())
    fail(ErrorKind::inconsistent, "feature table: " + std::to_string(rows.size()) + " rows, " +
                                      std::to_string(labels.size()) + " labels, " +
                                      std::to_string(groups.size()) + " groups");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != feature_names.size())
      fail(ErrorKind::inconsistent, "feature table: row " + std::to_string(i) + " has " +
                                        std::to_string(rows[i].size()) + " features, expected " +
                                        std::to_string(feature_names.size()));
    for (double v : rows[i])
      if (!std::isfinite(v)) fail(ErrorKind::numeric, "feature table: non-finite value in row " + std::to_string(i));
    if (labels[i] != 0 && labels[i] != 1)
      fail(ErrorKind::invalid_argument, "feature table: label " + std::to_string(labels[i]) + " in row " +
                                            std::to_string(i) + " is not 0 or 1");
  }
}

FeatureTable FeatureTable::subset(const std::vector<std::size_t>& which) const {
  FeatureTable out{name, feature_names, {}, {}, {}};
  for (auto i : which) {
    out.rows.push_back(rows.at(i));
    out.labels.push_back(labels.at(i));
    out.groups.push_back(groups.at(i));
  }
  return out;
}

FeatureTable read_feature_table(const std::filesystem::path& path, std::string name) {
  const auto bytes = bytes::read_file(path);
  std::stringstream in(std::string(bytes.begin(), bytes.end()));
  const std::string where = path.string();
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::inconsistent, where + ": empty feature table");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto header = split_csv_line(line);
  if (header.size() < 2 || header[header.size() - 2] != "label" || header.back() != "group")
    fail(ErrorKind::inconsistent, where + ": header must end with label,group");
  FeatureTable t;
  t.name = std::move(name);
  t.feature_names.assign(header.begin(), header.end() - 2);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    const std::string at = where + ":" + std::to_string(lineno);
    if (cells.size() != header.size())
      fail(ErrorKind::inconsistent, at + ": " + std::to_string(cells.size()) + " cells, header has " +
                                        std::to_string(header.size()));
    std::vector<double> row;
    for (std::size_t c = 0; c + 2 < cells.size(); ++c) row.push_back(parse_double(cells[c], at));
    t.rows.push_back(std::move(row));
    const double label = parse_double(cells[cells.size() - 2], at);
    if (label != 0 && label != 1) fail(ErrorKind::invalid_argument, at + ": label must be 0 or 1");
    t.labels.push_back(int(label));
    t.groups.push_back(cells.back());
  }
  t.validate();
  return t;
}

void write_feature_table(const FeatureTable& t, const std::filesystem::path& path) {
  t.validate();
  std::string out;
  for (const auto& n : t.feature_names) out += n + ",";
  out += "label,group\n";
  for (std::size_t i = 0; i < t.size(); ++i) {
    for (double v : t.rows[i]) out += fmt(v) + ",";
    out += std::to_string(t.labels[i]) + "," + t.groups[i] + "\n";
  }
  bytes::write_file(path, std::vector<unsigned char>(out.begin(), out.end()));
}

std::pair<FeatureTable, FeatureTable> split(const FeatureTable& t, double test_fraction,
                                            std::uint64_t seed) {
  t.validate();
  if (t.size() < 5)
    fail(ErrorKind::invalid_argument, "split needs at least 5 rows, got " + std::to_string(t.size()));
  const auto flags = group_split(t.groups, test_fraction, seed);
  std::vector<std::size_t> train, test;
  for (std::size_t i = 0; i < flags.size(); ++i) (flags[i] ? test : train).push_back(i);
  return {t.subset(train), t.subset(test)};
}

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    fail(ErrorKind::invalid_argument, "auroc: " + std::to_string(scores.size()) + " scores, " +
                                          std::to_string(labels.size()) + " labels");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  // Mid-ranks (1-based) doubled so every rank is an integer.
  double positive_rank2 = 0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double rank2 = double(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) {
        positive_rank2 += rank2;
        ++positives;
      } else if (labels[order[k]] != 0) {
        fail(ErrorKind::invalid_argument, "auroc: labels must be 0 or 1");
      }
    i = j;
  }
  const std::size_t negatives = n - positives;
  if (positives == 0 || negatives == 0) fail(ErrorKind::invalid_argument, "auroc: both classes must be present");
  // Twice the Mann-Whitney U, then the same (concordant + ties/2) / (P * N) ratio.
  const double u2 = positive_rank2 - double(positives) * double(positives + 1);
  return u2 / (2.0 * double(positives) * double(negatives));
}

double logreg_objective(const std::vector<std::vector<double>>& z, const std::vector<int>& labels,
                        const std::vector<double>& weights, double bias, double lambda,
                        std::vector<double>* gradient) {
  const std::size_t n = z.size(), d = weights.size();
  double loss = 0;
  if (gradient) gradient->assign(d + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double m = bias;
    for (std::size_t k = 0; k < d; ++k) m += weights[k] * z[i][k];
    loss += softplus(m) - labels[i] * m;
    if (gradient) {
      const double r = sigmoid(m) - labels[i];
      for (std::size_t k = 0; k < d; ++k) (*gradient)[k] += r * z[i][k];
      (*gradient)[d] += r;
    }
  }
  double penalty = 0;
  for (double w : weights) penalty += w * w;
  if (gradient) {
    for (auto& g : *gradient) g /= double(n);
    for (std::size_t k = 0; k < d; ++k) (*gradient)[k] += lambda * weights[k];
  }
  return loss / double(n) + 0.5 * lambda * penalty;
}

std::vector<double> LogRegModel::predict_proba(const std::vector<std::vector<double>>& rows) const {
  std::vector<double> out;
  for (const auto& r : rows) {
    if (r.size() != weights.size())
      fail(ErrorKind::shape, "logreg: row has " + std::to_string(r.size()) + " features, model " +
                                 std::to_string(weights.size()));
    double m = bias;
    for (std::size_t k = 0; k < r.size(); ++k) m += weights[k] * (r[k] - mean[k]) / stddev[k];
    out.push_back(sigmoid(m));
  }
  return out;
}

LogRegModel fit_logreg(const FeatureTable& train, const LogRegConfig& cfg) {
  train.validate();
  require_both_classes(train.labels, 1, "logistic regression");
  const std::size_t n = train.size(), d = train.width();
  LogRegModel m;
  m.mean.assign(d, 0.0);
  m.stddev.assign(d, 0.0);
  for (const auto& r : train.rows)
    for (std::size_t k = 0; k < d; ++k) m.mean[k] += r[k] / double(n);
  for (const auto& r : train.rows)
    for (std::size_t k = 0; k < d; ++k) m.stddev[k] += (r[k] - m.mean[k]) * (r[k] - m.mean[k]) / double(n);
  for (auto& s : m.stddev) s = s > 0 ? std::sqrt(s) : 1.0;
  std::vector<std::vector<double>> z(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) z[i][k] = (train.rows[i][k] - m.mean[k]) / m.stddev[k];

  const double lambda = cfg.lambda < 0 ? 1.0 / double(n) : cfg.lambda;
  m.weights.assign(d, 0.0);
  std::vector<double> g, trial_w(d);
  double f = logreg_objective(z, train.labels, m.weights, m.bias, lambda, &g);
  double step = 1.0;
  for (m.iterations = 0; m.iterations < cfg.max_iters; ++m.iterations) {
    double g2 = 0;
    for (double v : g) g2 += v * v;
    m.gradient_norm = std::sqrt(g2);
    if (m.gradient_norm < cfg.tolerance) break;
    step *= 2;
    while (true) {
      for (std::size_t k = 0; k < d; ++k) trial_w[k] = m.weights[k] - step * g[k];
      const double trial_b = m.bias - step * g[d];
      const double ft = logreg_objective(z, train.labels, trial_w, trial_b, lambda);
      if (ft <= f - 0.5 * step * g2 || step < 1e-12) {
        m.weights = trial_w;
        m.bias = trial_b;
        break;
      }
      step *= 0.5;
    }
    f = logreg_objective(z, train.labels, m.weights, m.bias, lambda, &g);
  }
  return m;
}

double gini(std::size_t negatives, std::size_t positives) {
  const double n = double(negatives + positives);
  if (n == 0) return 0;
  const double p = double(positives) / n, q = double(negatives) / n;
  return 1.0 - p * p - q * q;
}

double DecisionTree::predict(const std::vector<double>& row) const {
  std::size_t at = 0;
  while (nodes[at].feature >= 0)
    at = row[std::size_t(nodes[at].feature)] <= nodes[at].threshold ? nodes[at].left : nodes[at].right;
  return nodes[at].positive_fraction;
}

std::vector<double> RandomForestModel::predict_proba(const std::vector<std::vector<double>>& rows) const {
  std::vector<double> out;
  for (const auto& r : rows) {
    double votes = 0;
    for (const auto& t : trees) {
      const double p = t.predict(r);
      votes += p > 0.5 ? 1.0 : p == 0.5 ? 0.5 : 0.0;
    }
    out.push_back(votes / double(trees.size()));
  }
  return out;
}

namespace {

struct SplitChoice {
  int feature = -1;
  double threshold = 0;
  double impurity = 0;
};

// Best Gini split of `idx` on feature f, with at least min_leaf rows per side.
void best_split_on(const FeatureTable& t, std::vector<std::size_t>& idx, std::size_t f,
                   std::size_t min_leaf, SplitChoice& best) {
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return t.rows[a][f] < t.rows[b][f]; });
  const std::size_t n = idx.size();
  std::size_t total_pos = 0;
  for (auto i : idx) total_pos += std::size_t(t.labels[i]);
  std::size_t left_pos = 0;
  for (std::size_t k = 1; k < n; ++k) {
    left_pos += std::size_t(t.labels[idx[k - 1]]);
    const double lo = t.rows[idx[k - 1]][f], hi = t.rows[idx[k]][f];
    if (lo == hi || k < min_leaf || n - k < min_leaf) continue;
    const double impurity = (double(k) * gini(k - left_pos, left_pos) +
                             double(n - k) * gini(n - k - (total_pos - left_pos), total_pos - left_pos)) /
                            double(n);
    if (best.feature < 0 || impurity < best.impurity) {
      double mid = lo + (hi - lo) / 2;
      if (!(mid < hi)) mid = lo;
      best = {int(f), mid, impurity};
    }
  }
}

DecisionTree grow_tree(const FeatureTable& t, std::vector<std::size_t> sample, const RandomForestConfig& cfg,
                       std::size_t max_features, Rng& rng) {
  DecisionTree tree;
  struct Pending {
    std::size_t node;
    std::vector<std::size_t> idx;
    std::size_t depth;
  };
  std::vector<Pending> stack;
  tree.nodes.emplace_back();
  stack.push_back({0, std::move(sample), 0});
  std::vector<std::size_t> features(t.width());
  while (!stack.empty()) {
    auto [node, idx, depth] = std::move(stack.back());
    stack.pop_back();
    std::size_t pos = 0;
    for (auto i : idx) pos += std::size_t(t.labels[i]);
    tree.nodes[node].positive_fraction = double(pos) / double(idx.size());
    const bool pure = pos == 0 || pos == idx.size();
    if (pure || idx.size() < 2 * cfg.min_leaf || (cfg.max_depth && depth >= cfg.max_depth)) continue;

    // Sample features without replacement; keep drawing past max_features
    // until some feature admits a split.
    std::iota(features.begin(), features.end(), 0);
    SplitChoice best;
    for (std::size_t k = 0; k < features.size(); ++k) {
      if (k >= max_features && best.feature >= 0) break;
      std::swap(features[k], features[k + rng.below(features.size() - k)]);
      best_split_on(t, idx, features[k], cfg.min_leaf, best);
    }
    if (best.feature < 0) continue;
    std::vector<std::size_t> left, right;
    for (auto i : idx) (t.rows[i][std::size_t(best.feature)] <= best.threshold ? left : right).push_back(i);
    const std::size_t l = tree.nodes.size();
    tree.nodes.emplace_back();
    tree.nodes.emplace_back();
    tree.nodes[node].feature = best.feature;
    tree.nodes[node].threshold = best.threshold;
    tree.nodes[node].left = l;
    tree.nodes[node].right = l + 1;
    stack.push_back({l + 1, std::move(right), depth + 1});
    stack.push_back({l, std::move(left), depth + 1});
  }
  return tree;
}

}  // namespace

RandomForestModel fit_rf(const FeatureTable& train, const RandomForestConfig& cfg) {
  train.validate();
  require_both_classes(train.labels, 2, "random forest");
  if (cfg.trees == 0 || cfg.min_leaf == 0) fail(ErrorKind::invalid_argument, "random forest: trees and min_leaf must be positive");
  if (train.width() == 0) fail(ErrorKind::invalid_argument, "random forest: no features");
  const std::size_t n = train.size(), d = train.width();
  const std::size_t max_features =
      cfg.max_features ? std::min(cfg.max_features, d) : std::size_t(std::ceil(std::sqrt(double(d))));
  RandomForestModel model;
  model.trees.resize(cfg.trees);
#pragma omp parallel for schedule(dynamic)
  for (long k = 0; k < long(cfg.trees); ++k) {
    Rng rng = Rng::derive(cfg.seed, std::uint64_t(k));
    std::vector<std::size_t> sample(n);
    if (cfg.bootstrap)
      for (auto& s : sample) s = rng.below(n);
    else
      std::iota(sample.begin(), sample.end(), 0);
    model.trees[std::size_t(k)] = grow_tree(train, std::move(sample), cfg, max_features, rng);
  }
  return model;
}

const char* to_string(Classifier c) { return c == Classifier::logreg ? "logreg" : "rf"; }

Classifier parse_classifier(const std::string& name) {
  if (name == "logreg" || name == "lr") return Classifier::logreg;
  if (name == "rf" || name == "random_forest") return Classifier::random_forest;
  fail(ErrorKind::invalid_argument, "unknown classifier '" + name + "' (logreg | rf)");
}

EvalReport run_eval(const FeatureTable& features, Classifier classifier, std::uint64_t seed,
                    const std::string& task, double test_fraction) {
  auto [train, test] = split(features, test_fraction, seed);
  if (test.size() == 0) fail(ErrorKind::invalid_argument, "eval: empty test split");
  std::vector<double> scores;
  if (classifier == Classifier::logreg) {
    scores = fit_logreg(train).predict_proba(test.rows);
  } else {
    RandomForestConfig cfg;
    cfg.seed = seed;
    scores = fit_rf(train, cfg).predict_proba(test.rows);
  }
  return {task, features.name, classifier, auroc(scores, test.labels), seed, train.size(), test.size()};
}

void append_report(const EvalReport& r, const std::filesystem::path& path) {
  std::vector<unsigned char> out;
  std::error_code ec;
  if (std::filesystem::exists(path, ec)) out = bytes::read_file(path);
  else {
    const std::string head = "task,feature_set,classifier,auroc,seed,train_size,test_size\n";
    out.assign(head.begin(), head.end());
  }
  const std::string row = r.task + "," + r.feature_set + "," + to_string(r.classifier) + "," + fmt(r.auroc) +
                          "," + std::to_string(r.seed) + "," + std::to_string(r.train_size) + "," +
                          std::to_string(r.test_size) + "\n";
  out.insert(out.end(), row.begin(), row.end());
  bytes::write_file(path, out);
}

}  // namespace cae
