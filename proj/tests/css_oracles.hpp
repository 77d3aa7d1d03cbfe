#pragma once

// Test-side oracles for the discrete-latent environment, kept independent of
// the production forward recursion: a textbook forward algorithm (markov
// attention) and a naive sum over every latent path (any attention).

#include <cmath>

#include "dmkit/css.hpp"

namespace dmkit_test {

using namespace dmkit;

inline DomainSchema oracle_schema(int Y) {
  DomainSchema s;
  s.name = "tiny";
  s.static_space = {1, 0, {"s0"}};
  s.temporal_space = {1, 1, {"f0", "f1"}};
  s.action_space = {Y};
  s.max_length = 10;
  s.validate();
  return s;
}

inline CssModel random_css(const DomainSchema& schema, int Z,
                           AttentionSpec att, uint64_t seed) {
  CssModel m = CssModel::make(schema, Z, att, {}, 4, seed);
  RngStream rng(seed);
  for (auto& [name, t] : m.params.tensors) {
    if (name.rfind("enc.", 0) == 0) continue;
    for (int c = 0; c < t.cols(); ++c)
      for (int r = 0; r < t.rows(); ++r) t(r, c) = rng.normal();
  }
  return m;
}

inline Trajectory random_css_traj(const DomainSchema& schema, int T,
                                  uint64_t seed) {
  RngStream rng(seed);
  Trajectory t;
  t.static_features = Vec(schema.static_space.dim());
  for (int i = 0; i < schema.static_space.dim(); ++i)
    t.static_features[i] = rng.normal();
  for (int k = 0; k < T; ++k) {
    Vec x(schema.temporal_space.dim());
    for (int i = 0; i < schema.temporal_space.dim(); ++i)
      x[i] = schema.temporal_space.is_binary(i) ? double(rng.bernoulli(0.5))
                                                : rng.normal();
    t.observations.push_back(x);
    t.actions.push_back(
        int(rng.uniform_int(0, schema.action_space.cardinality - 1)));
  }
  return t;
}

inline double forward_algorithm_oracle(const CssModel& m,
                                       const Trajectory& traj) {
  int Z = m.n_states;
  int T = traj.length();
  std::vector<Vec> emis(static_cast<size_t>(Z));
  for (int z = 0; z < Z; ++z)
    emis[size_t(z)] = m.emission_params(z, traj.static_features);

  Vec alpha(Z);
  Vec pi = m.initial_dist();
  for (int z = 0; z < Z; ++z)
    alpha[z] = pi[z] * std::exp(-head_nll(m.emis_head, emis[size_t(z)],
                                          traj.observations[0]));
  double ll = std::log(alpha.sum());
  alpha /= alpha.sum();
  for (int t = 2; t <= T; ++t) {
    Mat P = m.transition_matrix(traj.actions[size_t(t - 2)]);
    Vec next = Vec::Zero(Z);
    for (int j = 0; j < Z; ++j) {
      double e = std::exp(-head_nll(m.emis_head, emis[size_t(j)],
                                    traj.observations[size_t(t - 1)]));
      for (int i = 0; i < Z; ++i) next[j] += alpha[i] * P(i, j) * e;
    }
    ll += std::log(next.sum());
    alpha = next / next.sum();
  }
  return ll;
}

inline double enumeration_oracle(const CssModel& m, const Trajectory& traj) {
  int Z = m.n_states;
  int T = traj.length();
  std::vector<Vec> emis(static_cast<size_t>(Z));
  for (int z = 0; z < Z; ++z)
    emis[size_t(z)] = m.emission_params(z, traj.static_features);
  std::vector<Mat> P;
  for (int a = 0; a < m.domain.action_space.cardinality; ++a)
    P.push_back(m.transition_matrix(a));
  Vec pi = m.initial_dist();

  Vec attn_logits = m.attn_logits();
  auto alpha_of = [&](int t) {
    return css_attention(m.attention, t,
                         m.attention.kind == AttentionSpec::Kind::Learned
                             ? &attn_logits
                             : nullptr);
  };

  // per-path log weights summed with log-sum-exp, so deep-tail instances do
  // not underflow
  long long paths = 1;
  for (int t = 0; t < T; ++t) paths *= Z;
  std::vector<double> logw(static_cast<size_t>(paths));
  std::vector<int> z(static_cast<size_t>(T));
  for (long long code = 0; code < paths; ++code) {
    long long c = code;
    for (int t = 0; t < T; ++t) {
      z[size_t(t)] = int(c % Z);
      c /= Z;
    }
    double lw = std::log(pi[z[0]]) - head_nll(m.emis_head, emis[size_t(z[0])],
                                              traj.observations[0]);
    for (int t = 2; t <= T; ++t) {
      auto a = alpha_of(t);
      double trans = 0.0;
      for (int lag = 1; lag <= t - 1; ++lag) {
        if (a[size_t(lag - 1)] == 0.0) continue;
        trans += a[size_t(lag - 1)] *
                 P[size_t(traj.actions[size_t(t - lag - 1)])](
                     z[size_t(t - lag - 1)], z[size_t(t - 1)]);
      }
      lw += std::log(trans) - head_nll(m.emis_head,
                                       emis[size_t(z[size_t(t - 1)])],
                                       traj.observations[size_t(t - 1)]);
    }
    logw[size_t(code)] = lw;
  }
  double mx = -1e300;
  for (double lw : logw) mx = std::max(mx, lw);
  double acc = 0.0;
  for (double lw : logw) acc += std::exp(lw - mx);
  return mx + std::log(acc);
}

// exact posterior over z_t given the sampled prefix and the whole trajectory
struct TabularPosterior : CssPosterior {
  const CssModel& model;
  explicit TabularPosterior(const CssModel& m) : model(m) {}

  Vec dist(const Trajectory& traj, int t,
           const std::vector<int>& prefix) const override {
    int Z = model.n_states;
    int T = traj.length();
    std::vector<Vec> emis(static_cast<size_t>(Z));
    for (int z = 0; z < Z; ++z)
      emis[size_t(z)] = model.emission_params(z, traj.static_features);
    std::vector<Mat> P;
    for (int a = 0; a < model.domain.action_space.cardinality; ++a)
      P.push_back(model.transition_matrix(a));
    Vec pi = model.initial_dist();
    Vec attn_logits = model.attn_logits();

    Vec out = Vec::Zero(Z);
    int free = T - t;
    long long completions = 1;
    for (int i = 0; i < free; ++i) completions *= Z;

    std::vector<int> z(static_cast<size_t>(T));
    for (int i = 0; i < t - 1; ++i) z[size_t(i)] = prefix[size_t(i)];
    for (int zt = 0; zt < Z; ++zt) {
      z[size_t(t - 1)] = zt;
      for (long long code = 0; code < completions; ++code) {
        long long c = code;
        for (int i = t; i < T; ++i) {
          z[size_t(i)] = int(c % Z);
          c /= Z;
        }
        double p = pi[z[0]] * std::exp(-head_nll(model.emis_head,
                                                 emis[size_t(z[0])],
                                                 traj.observations[0]));
        for (int s = 2; s <= T; ++s) {
          auto a = css_attention(
              model.attention, s,
              model.attention.kind == AttentionSpec::Kind::Learned
                  ? &attn_logits
                  : nullptr);
          double trans = 0.0;
          for (int lag = 1; lag <= s - 1; ++lag) {
            if (a[size_t(lag - 1)] == 0.0) continue;
            trans += a[size_t(lag - 1)] *
                     P[size_t(traj.actions[size_t(s - lag - 1)])](
                         z[size_t(s - lag - 1)], z[size_t(s - 1)]);
          }
          p *= trans * std::exp(-head_nll(model.emis_head,
                                          emis[size_t(z[size_t(s - 1)])],
                                          traj.observations[size_t(s - 1)]));
        }
        out[zt] += p;
      }
    }
    return out / out.sum();
  }
};

inline AttentionSpec random_attention(RngStream& rng) {
  AttentionSpec att;
  switch (rng.uniform_int(0, 2)) {
    case 0:
      break;
    case 1: {
      att.kind = AttentionSpec::Kind::Fixed;
      int w = int(rng.uniform_int(1, 3));
      for (int i = 0; i < w; ++i) att.weights.push_back(0.1 + rng.uniform());
      break;
    }
    default:
      att.kind = AttentionSpec::Kind::Learned;
      att.window = int(rng.uniform_int(1, 3));
  }
  return att;
}

}  // namespace dmkit_test
