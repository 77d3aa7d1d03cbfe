#pragma once

#include "dmkit/environment.hpp"
#include "dmkit/init_model.hpp"
#include "dmkit/nn.hpp"

namespace dmkit {

// Directly autoregressive environment: a gated recurrent cell over
// (x_t, one-hot y_t, x_s) tokens feeding a dense head over the next
// observation. With balancing_weight > 0 an adversarial action head reads
// the gradient-reversed hidden state, pushing the representation towards
// action-independence. balancing_weight == 0 reduces exactly to plain
// teacher forcing.
class RecurrentEnv : public EnvModel {
 public:
  DomainSchema domain;
  InitModel init;
  GruSpec gru;       // input dim = temporal + |Y| + static
  MlpSpec head_mlp;  // hidden -> head params
  HeadSpec head;
  MlpSpec adv_mlp;  // hidden -> |Y| logits; present only for the balanced kind
  bool balanced_kind = false;
  double balancing_weight = 0.0;
  ParamStore params;

  static RecurrentEnv make(const DomainSchema& schema, int hidden,
                           std::vector<int> head_hidden, uint64_t seed,
                           bool balanced, double balancing_weight);

  // mean per-step emission NLL and adversarial NLL over one trajectory;
  // `optimized` (when non-null) receives the scalar actually differentiated,
  // with the gradient-reversal already applied to the adversarial path.
  std::pair<ad::Var, ad::Var> trajectory_losses(ModelCtx& ctx,
                                                const Trajectory& traj,
                                                ad::Var* optimized) const;

  // reported total per the contract: nll - lambda * adversarial nll
  std::pair<double, double> balanced_repr_loss(const Trajectory& traj) const;

  Vec input_token(const Vec& x, int action, const Vec& x_s) const;

  std::string kind() const override { return balanced_kind ? "balanced" : "tforce"; }
  const DomainSchema& schema() const override { return domain; }
  std::unique_ptr<EnvState> reset(RngStream& rng, Vec& x_s, Vec& x1) const override;
  Vec step(EnvState& state, int action, RngStream& rng) const override;
  StepDistribution step_distribution(const History& h, const Vec& x_s) const override;
  nlohmann::json config_json() const override;
};

}  // namespace dmkit
