#include "dmkit/environment.hpp"

#include <cmath>

#include "dmkit/errors.hpp"

namespace dmkit {

double StepDistribution::logpdf(const Vec& x) const {
  if (weights.size() != params.size() || weights.empty())
    throw DimensionError("malformed step distribution");
  if (weights.size() == 1) return -head_nll(head, params[0], x);
  // log of the mixture density, stabilised
  double best = -1e300;
  std::vector<double> terms(weights.size());
  for (size_t i = 0; i < weights.size(); ++i) {
    double lw = std::log(std::max(weights[i], 1e-300));
    terms[i] = lw - head_nll(head, params[i], x);
    best = std::max(best, terms[i]);
  }
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - best);
  return best + std::log(acc);
}

Vec StepDistribution::sample(RngStream& rng) const {
  size_t k = 0;
  if (weights.size() > 1)
    k = size_t(rng.categorical(std::span<const double>(weights.data(),
                                                       weights.size())));
  return head_sample(head, params[k], rng);
}

Vec onehot_action(int action, int cardinality) {
  if (action < 0 || action >= cardinality)
    throw DimensionError("action index outside action space");
  Vec v = Vec::Zero(cardinality);
  v[action] = 1.0;
  return v;
}

void check_history(const History& h, const DomainSchema& s) {
  for (const Vec& x : h.observations)
    if (int(x.size()) != s.temporal_space.dim())
      throw DimensionError("history observation dimension mismatch");
  for (int a : h.actions)
    if (a < 0 || a >= s.action_space.cardinality)
      throw DimensionError("history action outside action space");
}

}  // namespace dmkit
