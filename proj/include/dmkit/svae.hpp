#pragma once

#include "dmkit/environment.hpp"
#include "dmkit/init_model.hpp"
#include "dmkit/nn.hpp"

namespace dmkit {

// Continuous-latent sequential environment: z_1 ~ N(0, I), gaussian
// transitions conditioned on (z_{t-1}, y_{t-1}), factored emissions from
// (z_t, x_s). Inference uses a backward recurrent summary, mirroring the
// discrete-latent encoder.
class SvaeModel : public EnvModel {
 public:
  DomainSchema domain;
  int latent_dim = 2;
  InitModel init;    // static part only
  MlpSpec trans_mlp;  // [z; one-hot y] -> (mean, logvar) over z'
  MlpSpec emis_mlp;   // [z; x_s] -> head params
  HeadSpec emis_head;
  GruSpec enc_gru;  // backward over (x_t, one-hot y_t)
  MlpSpec enc_mlp;  // [z_{t-1} (zeros at t=1); summary] -> (mean, logvar)
  ParamStore params;

  static SvaeModel make(const DomainSchema& schema, int latent_dim,
                        std::vector<int> hidden, int enc_hidden, uint64_t seed);

  struct Gauss {
    Vec mean;
    Vec logvar;
  };
  Gauss transition(const Vec& z, int action) const;
  Vec emission_params(const Vec& z, const Vec& x_s) const;

  // Monte Carlo ELBO with analytic per-step gaussian KL. encoder_as_prior
  // substitutes the prior for q, making every KL term exactly zero.
  ElboEstimate elbo(const Trajectory& traj, int n_mc, RngStream& rng,
                  bool encoder_as_prior = false) const;

  // Reconstruction-only estimate E_prior[log p(x | z)], for the KL = 0 check.
  ElboEstimate prior_reconstruction(const Trajectory& traj, int n_mc,
                                  RngStream& rng) const;

  // Single-sample reparameterised ELBO on the tape. `fixed_noise`, when
  // given, freezes the standard-normal draws (finite-difference checks).
  ad::Var elbo_var(ModelCtx& ctx, const Trajectory& traj, RngStream& rng,
                   const std::vector<Vec>* fixed_noise = nullptr) const;

  std::string kind() const override { return "svae"; }
  const DomainSchema& schema() const override { return domain; }
  std::unique_ptr<EnvState> reset(RngStream& rng, Vec& x_s, Vec& x1) const override;
  Vec step(EnvState& state, int action, RngStream& rng) const override;
  // Propagates the latent mean path through the transitions (observations
  // do not re-condition the latent); deterministic given the history.
  StepDistribution step_distribution(const History& h, const Vec& x_s) const override;
  nlohmann::json config_json() const override;
};

}  // namespace dmkit
