#pragma once

#include <memory>
#include <vector>

#include "dmkit/attention.hpp"
#include "dmkit/environment.hpp"
#include "dmkit/init_model.hpp"
#include "dmkit/nn.hpp"

namespace dmkit {

// Approximate posterior over the latent states, factorised sequentially.
// `prefix` holds the already-sampled states z_1..z_{t-1}.
struct CssPosterior {
  virtual ~CssPosterior() = default;
  virtual void prepare(const Trajectory&) {}
  virtual Vec dist(const Trajectory& traj, int t,
                   const std::vector<int>& prefix) const = 0;
};

// Discrete-latent attentive state-space environment. Transitions are an
// attention-weighted sum of per-action baseline matrices; the emission net
// maps (state one-hot, x_s) to the parameters of a factored head, so two
// states can emit differently for different statics.
class CssModel : public EnvModel {
 public:
  DomainSchema domain;
  int n_states = 2;
  AttentionSpec attention;
  InitModel init;  // only the static part participates in sampling
  MlpSpec emis_mlp;
  HeadSpec emis_head;
  GruSpec enc_gru;  // backward summary for the inference net
  MlpSpec enc_mlp;  // [z_{t-1} one-hot (zeros at t=1); summary] -> Z logits
  ParamStore params;

  static CssModel make(const DomainSchema& schema, int n_states,
                       AttentionSpec attention, std::vector<int> emis_hidden,
                       int enc_hidden, uint64_t seed);

  Vec initial_dist() const;              // softmax of the pi logits
  Mat transition_matrix(int action) const;  // row-stochastic
  Vec transition_flat(int action) const;    // row-major, index r*Z + c
  Vec emission_params(int z, const Vec& x_s) const;

  // Exact log p(x_1..x_T | y, x_s) by marginalising the latent chain with a
  // forward recursion over tuples of the last `window` states. Guarded:
  // throws SizeError pointing at the ELBO when the instance is too large.
  double exact_loglik(const Trajectory& traj) const;

  // Same recursion on the tape; used by the exact trainer.
  ad::Var loglik_var(ModelCtx& ctx, const Trajectory& traj) const;

  // Rao-Blackwellised ELBO estimate: ancestors are sampled from q, the
  // expectation over z_t is taken exactly at each step. Unbiased for the
  // ELBO value.
  ElboEstimate elbo(const Trajectory& traj, const CssPosterior& q, int n_mc,
                    RngStream& rng) const;
  ElboEstimate elbo(const Trajectory& traj, int n_mc, RngStream& rng) const;

  // One-sample ELBO on the tape for variational training. When
  // `fixed_path` is given the latent path is not resampled (used by the
  // finite-difference checks).
  ad::Var elbo_var(ModelCtx& ctx, const Trajectory& traj, RngStream& rng,
                   const std::vector<int>* fixed_path = nullptr) const;

  // The model's own inference net as a posterior.
  std::unique_ptr<CssPosterior> net_posterior() const;

  // EnvModel
  std::string kind() const override { return "css"; }
  const DomainSchema& schema() const override { return domain; }
  std::unique_ptr<EnvState> reset(RngStream& rng, Vec& x_s,
                                  Vec& x1) const override;
  Vec step(EnvState& state, int action, RngStream& rng) const override;
  StepDistribution step_distribution(const History& h,
                                     const Vec& x_s) const override;
  nlohmann::json config_json() const override;

  struct Filter {
    double loglik = 0.0;
    std::vector<double> belief;  // over state tuples, normalised
    int tuple_len = 0;
  };
  // Forward filter over an observed prefix (m = #observations consumed).
  Filter forward_filter(const std::vector<Vec>& obs,
                        const std::vector<int>& acts, const Vec& x_s,
                        int m) const;

  void guard_tractable(int T) const;
  Vec attn_logits() const;

 private:
  std::vector<double> alpha_at(int t) const;
};

}  // namespace dmkit
