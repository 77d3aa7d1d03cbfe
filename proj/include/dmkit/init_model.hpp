#pragma once

#include "dmkit/rng.hpp"
#include "dmkit/schema.hpp"
#include "json.hpp"

namespace dmkit {

using Mat = Eigen::MatrixXd;

// Initialisation model P(x_s, x_1): factored gaussian/bernoulli statics and
// a linear-gaussian + linear-bernoulli first observation conditioned on x_s.
struct InitModel {
  FeatureSpace static_space;
  FeatureSpace temporal_space;

  // statics: continuous block ~ N(mean, L L^T), binary block ~ Bern(p)
  Vec static_mean;
  Mat static_cov_factor;  // lower-triangular factor L
  Vec static_bin_p;

  // first observation given x_s; design vector is [1; x_s]
  Mat first_cont_coef;    // C_t x (1 + S)
  Vec first_cont_logvar;  // C_t
  Mat first_bin_coef;     // B_t x (1 + S), linear probability, clamped

  Vec sample_static(RngStream& rng) const;
  Vec sample_first(const Vec& x_s, RngStream& rng) const;
  // (x_s, x_1) in one draw
  std::pair<Vec, Vec> sample(RngStream& rng) const {
    Vec x_s = sample_static(rng);
    Vec x1 = sample_first(x_s, rng);
    return {std::move(x_s), std::move(x1)};
  }

  // Mean of x_s under the model (continuous block, then bernoulli probs).
  Vec static_mean_full() const;

  // Moment fit for the statics, ridge least squares for the conditionals.
  static InitModel fit(const BatchDataset& data);
  // Neutral hand-spec baseline: zero means, diagonal unit factors, p = 0.5.
  static InitModel neutral(const DomainSchema& schema);

  nlohmann::json to_json() const;
  static InitModel from_json(const nlohmann::json& j);
};

}  // namespace dmkit
