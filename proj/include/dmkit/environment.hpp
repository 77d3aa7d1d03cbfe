#pragma once

#include <memory>
#include <string>
#include <vector>

#include "dmkit/nn.hpp"
#include "dmkit/rng.hpp"
#include "dmkit/schema.hpp"
#include "json.hpp"

namespace dmkit {

// Observed prefix (x_1..x_{t-1}, y_1..y_{t-1}) for analysis queries.
struct History {
  std::vector<Vec> observations;
  std::vector<int> actions;
  int length() const { return int(observations.size()); }
};

// Next-step distribution: a mixture of factored heads. Non-latent models
// emit a single component; the discrete-latent model emits one component
// per filtered state.
struct StepDistribution {
  HeadSpec head;
  std::vector<double> weights;
  std::vector<Vec> params;

  double logpdf(const Vec& x) const;
  Vec sample(RngStream& rng) const;
};

// Per-rollout internal state (latents, recurrent hidden, ...).
struct EnvState {
  virtual ~EnvState() = default;
  int t = 1;
};

struct ElboEstimate {
  double mean = 0.0;
  double std_err = 0.0;
  int n = 0;
};

// Environment side of the generative factorisation: initialisation
// P(x_s, x_1) plus auto-regression P(x_t | history). Trained models are
// immutable during sampling; all randomness comes from caller streams.
class EnvModel {
 public:
  virtual ~EnvModel() = default;

  virtual std::string kind() const = 0;
  virtual const DomainSchema& schema() const = 0;

  virtual std::unique_ptr<EnvState> reset(RngStream& rng, Vec& x_s,
                                          Vec& x1) const = 0;
  virtual Vec step(EnvState& state, int action, RngStream& rng) const = 0;

  // Exact where tractable (single head / filtered mixture); the continuous
  // latent model propagates the latent mean path.
  virtual StepDistribution step_distribution(const History& h,
                                             const Vec& x_s) const = 0;

  virtual nlohmann::json config_json() const = 0;
};

// One-hot over the action space.
Vec onehot_action(int action, int cardinality);

void check_history(const History& h, const DomainSchema& s);

}  // namespace dmkit
