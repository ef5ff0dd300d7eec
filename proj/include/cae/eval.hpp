#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace cae {

struct FeatureTable {
  std::string name;  // feature set: CAES, CAEJ, CAE-3D, external
  std::vector<std::string> feature_names;
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::vector<std::string> groups;

  std::size_t size() const { return rows.size(); }
  std::size_t width() const { return feature_names.size(); }

  // Throws inconsistent on ragged rows or count mismatches, numeric on
  // non-finite entries, invalid_argument on labels outside {0, 1}.
  void validate() const;

  FeatureTable subset(const std::vector<std::size_t>& which) const;
};

// CSV: feature columns, then `label`, then `group`.
FeatureTable read_feature_table(const std::filesystem::path& path, std::string name = "external");
void write_feature_table(const FeatureTable& t, const std::filesystem::path& path);

// Group-aware random split (see group_split). Requires n >= 5.
std::pair<FeatureTable, FeatureTable> split(const FeatureTable& t, double test_fraction,
                                            std::uint64_t seed);

// Mann-Whitney statistic with half credit for ties. Both classes must occur.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

struct LogRegConfig {
  double lambda = -1;  // L2 strength on the weights; negative = 1/n
  std::size_t max_iters = 20000;
  double tolerance = 1e-6;  // gradient norm
};

struct LogRegModel {
  std::vector<double> mean, stddev;  // z-score statistics of the training features
  std::vector<double> weights;
  double bias = 0;
  std::size_t iterations = 0;
  double gradient_norm = 0;

  std::vector<double> predict_proba(const std::vector<std::vector<double>>& rows) const;
};

// Mean log-loss + lambda/2 * ||w||^2 on already standardized rows; the bias is
// not penalized. Gradient order: weights, then bias.
double logreg_objective(const std::vector<std::vector<double>>& z, const std::vector<int>& labels,
                        const std::vector<double>& weights, double bias, double lambda,
                        std::vector<double>* gradient = nullptr);

// Gradient descent with backtracking line search from w = 0.
LogRegModel fit_logreg(const FeatureTable& train, const LogRegConfig& cfg = {});

// 1 - sum p_k^2 over the class fractions.
double gini(std::size_t negatives, std::size_t positives);

struct RandomForestConfig {
  std::size_t trees = 100;
  std::size_t max_depth = 0;     // 0 = unlimited
  std::size_t min_leaf = 1;
  std::size_t max_features = 0;  // 0 = ceil(sqrt(d))
  bool bootstrap = true;
  std::uint64_t seed = 0;
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0;
  std::size_t left = 0, right = 0;
  double positive_fraction = 0;
};

struct DecisionTree {
  std::vector<TreeNode> nodes;
  double predict(const std::vector<double>& row) const;  // leaf positive fraction
};

struct RandomForestModel {
  std::vector<DecisionTree> trees;
  // Fraction of trees whose leaf votes positive (a 50/50 leaf gives half a vote).
  std::vector<double> predict_proba(const std::vector<std::vector<double>>& rows) const;
};

RandomForestModel fit_rf(const FeatureTable& train, const RandomForestConfig& cfg = {});

enum class Classifier { logreg, random_forest };
const char* to_string(Classifier c);
Classifier parse_classifier(const std::string& name);  // logreg | rf

struct EvalReport {
  std::string task;
  std::string feature_set;
  Classifier classifier = Classifier::logreg;
  double auroc = 0;
  std::uint64_t seed = 0;
  std::size_t train_size = 0, test_size = 0;
};

EvalReport run_eval(const FeatureTable& features, Classifier classifier, std::uint64_t seed,
                    const std::string& task, double test_fraction = 0.2);

// Appends one row, writing the header first when the file is new.
void append_report(const EvalReport& r, const std::filesystem::path& path);

}  // namespace cae
