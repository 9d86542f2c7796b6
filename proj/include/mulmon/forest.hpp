#pragma once

#include <cstdint>
#include <vector>

#include "mulmon/tensor.hpp"

namespace mulmon {

// CART regression forest with impurity-decrease feature attributions.
// Defaults mirror the common library settings: bootstrap sampling, all
// features considered at every split, unbounded depth, leaves down to one
// sample.
struct ForestConfig {
  int n_trees = 100;
  int min_samples_leaf = 1;
  int max_depth = 0;  // 0 = unbounded
  bool bootstrap = true;
};

class RandomForestRegressor {
 public:
  // X: [N, D] row-major features; y: [N] targets
  void fit(const Tensor<double>& X, const std::vector<double>& y,
           const ForestConfig& cfg, uint64_t seed);

  double predict_row(const double* x) const;
  std::vector<double> predict(const Tensor<double>& X) const;

  // Per-feature impurity decrease summed over all splits of all trees,
  // normalized to sum to 1 (all-zero if the forest never split).
  const std::vector<double>& feature_importances() const { return importances_; }

 private:
  struct Node {
    int feature = -1;       // -1 marks a leaf
    double threshold = 0;   // goes left if x[feature] <= threshold
    double value = 0;       // leaf prediction
    int left = -1, right = -1;
  };
  struct Tree {
    std::vector<Node> nodes;
  };

  int build_node(Tree& tree, std::vector<int>& idx, int lo, int hi, int depth,
                 const Tensor<double>& X, const std::vector<double>& y,
                 const ForestConfig& cfg);

  int64_t dims_ = 0;
  std::vector<Tree> trees_;
  std::vector<double> importances_;
};

}  // namespace mulmon
