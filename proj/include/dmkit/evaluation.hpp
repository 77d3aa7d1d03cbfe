#pragma once

#include <string>
#include <vector>

#include "dmkit/nn.hpp"
#include "dmkit/policy.hpp"
#include "dmkit/schema.hpp"
#include "json.hpp"

namespace dmkit {

struct EvalConfig {
  int epochs = 50;
  int hidden = 16;
  double learning_rate = 0.05;
  double momentum = 0.9;
  int batch_size = 16;
  uint64_t seed = 0;
  int min_trajectories = 100;  // discriminative-score floor

  nlohmann::json to_json() const;
  std::string digest() const;
};

struct MetricReport {
  std::string metric;
  double value = 0.0;
  double ci = 0.0;
  std::vector<uint64_t> seeds;
  std::string config_digest;
  nlohmann::json extra;

  nlohmann::json to_json() const;
};

// Rank-based AUROC with tie averaging; labels in {0,1}, both present.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

// Train-on-synthetic / test-on-real: a recurrent classifier is fitted on
// `synthetic` to predict the binary `target` one step ahead ("action" or a
// binary temporal feature name), then scored by AUROC on `real`.
MetricReport predictive_score(const BatchDataset& synthetic,
                              const BatchDataset& real,
                              const std::string& target,
                              const EvalConfig& cfg);

// |test accuracy - 0.5| of a real-vs-synthetic recurrent discriminator
// trained on a 50/50 split; in [0, 0.5], lower means harder to tell apart.
MetricReport discriminative_score(const BatchDataset& synthetic,
                                  const BatchDataset& real,
                                  const EvalConfig& cfg);

struct ActionMatch {
  double agreement = 0.0;  // argmax agreement rate over probe prefixes
  double mean_tv = 0.0;
};

ActionMatch action_match(const PolicySpec& a, const PolicySpec& b,
                         const BatchDataset& probes);

// Per-knob error report between an estimated and a true parameterisation.
// Skeleton mismatches yield {"comparable": false, ...}, never a crash.
nlohmann::json compare_ground_truth(const GroundTruth& theta_hat,
                                    const GroundTruth& theta);

// Two-component PCA of per-timestep observations of both datasets, written
// as "x,y,source" CSV rows. Returns the number of points written.
size_t project2d(const BatchDataset& real, const BatchDataset& synthetic,
                 const std::string& out_path);

}  // namespace dmkit
