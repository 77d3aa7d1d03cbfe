#pragma once

#include <memory>

#include "dmkit/environment.hpp"
#include "dmkit/policy.hpp"
#include "dmkit/schema.hpp"

namespace dmkit {

// (domain, environment, policy) plus the confounding projection. The policy
// and environment always see the full feature set; only exported / live
// observations are projected.
struct Scenario {
  DomainSchema domain;
  std::shared_ptr<const EnvModel> env;
  PolicySpec policy;
  std::vector<std::string> confounding;
  int horizon = 10;
  int min_len = 5;
  uint64_t seed = 0;

  void validate() const;
  nlohmann::json config_json() const;
  std::string digest() const;  // provenance: hash of the canonical config
  std::vector<int> hidden_indices() const;
};

// Batch generation per the environment/policy factorisation. Trajectory i
// draws from independent substreams of seed, so --jobs parallelism cannot
// change the output.
BatchDataset generate_batch(const Scenario& s, int n, int jobs = 1);

// Removes the named temporal columns from every observation; returns the
// projected dataset and the confoundedness measure dim X' / dim X.
std::pair<BatchDataset, double> hide_confounders(
    const BatchDataset& d, const std::vector<std::string>& hidden);

// Gym-style live interaction. No reward is ever part of the return shape.
// Observations are projected by the scenario's confounding set.
class LiveSession {
 public:
  LiveSession(const Scenario& s, uint64_t trajectory_index = 0);

  struct Reset {
    Vec static_features;
    Vec observation;
    bool done = false;
  };
  struct Step {
    Vec observation;
    bool done = false;
  };

  Reset reset();
  Step step(int action);  // SessionError when stepping a finished episode

  int episode_length() const { return episode_length_; }
  // The policy substream generate_batch would use for this trajectory;
  // lets an external driver reproduce batch rollouts exactly.
  RngStream policy_stream() const;

 private:
  const Scenario& scenario_;
  uint64_t index_;
  RngStream env_rng_;
  std::unique_ptr<EnvState> state_;
  int episode_length_ = 0;
  int t_ = 0;
  bool active_ = false;
  bool done_ = true;

  Vec project(const Vec& x) const;
};

// Samples one full (unprojected) trajectory the way generate_batch does.
Trajectory sample_trajectory(const Scenario& s, uint64_t index);

}  // namespace dmkit
