#include "dmkit/css.hpp"

#include <algorithm>
#include <cmath>

#include "dmkit/errors.hpp"

namespace dmkit {

namespace {

// digit k of tuple index s, base Z; digit 0 is the most recent state
inline int tuple_digit(long long s, int k, int Z) {
  long long p = 1;
  for (int i = 0; i < k; ++i) p *= Z;
  return int((s / p) % Z);
}

inline long long ipow(int base, int e) {
  long long p = 1;
  for (int i = 0; i < e; ++i) p *= base;
  return p;
}

Vec softmax_vec(const Vec& x) {
  double m = x.maxCoeff();
  Vec e = (x.array() - m).exp();
  return e / e.sum();
}

std::string trans_name(int action, int row) {
  return "trans.y" + std::to_string(action) + ".r" + std::to_string(row);
}

struct CssState : EnvState {
  Vec x_s;
  std::vector<int> states;
  std::vector<int> actions;
};

}  // namespace

CssModel CssModel::make(const DomainSchema& schema, int n_states,
                        AttentionSpec att, std::vector<int> emis_hidden,
                        int enc_hidden, uint64_t seed) {
  if (n_states < 2) throw ConfigError("css needs |Z| >= 2");
  att.validate();
  CssModel m;
  m.domain = schema;
  m.n_states = n_states;
  m.attention = att;
  m.init = InitModel::neutral(schema);
  m.emis_head = HeadSpec::for_space(schema.temporal_space);

  m.emis_mlp.prefix = "emis";
  m.emis_mlp.dims.push_back(n_states + schema.static_space.dim());
  for (int h : emis_hidden) m.emis_mlp.dims.push_back(h);
  m.emis_mlp.dims.push_back(m.emis_head.param_dim());

  m.enc_gru.prefix = "enc.gru";
  m.enc_gru.input = schema.temporal_space.dim() + schema.action_space.cardinality;
  m.enc_gru.hidden = enc_hidden;
  m.enc_mlp.prefix = "enc.mlp";
  m.enc_mlp.dims = {n_states + enc_hidden, n_states};

  m.params.seed = seed;
  m.params.add_zeros("pi.logits", n_states, 1);
  for (int a = 0; a < schema.action_space.cardinality; ++a)
    for (int r = 0; r < n_states; ++r)
      m.params.add_zeros(trans_name(a, r), n_states, 1);
  if (att.kind == AttentionSpec::Kind::Learned)
    m.params.add_zeros("attn.logits", att.window, 1);
  m.emis_mlp.init(m.params);
  m.enc_gru.init(m.params);
  m.enc_mlp.init(m.params);
  return m;
}

Vec CssModel::initial_dist() const {
  return softmax_vec(params.at("pi.logits").col(0));
}

Mat CssModel::transition_matrix(int action) const {
  Mat P(n_states, n_states);
  for (int r = 0; r < n_states; ++r)
    P.row(r) = softmax_vec(params.at(trans_name(action, r)).col(0)).transpose();
  return P;
}

Vec CssModel::transition_flat(int action) const {
  Vec flat(n_states * n_states);
  for (int r = 0; r < n_states; ++r)
    flat.segment(r * n_states, n_states) =
        softmax_vec(params.at(trans_name(action, r)).col(0));
  return flat;
}

Vec CssModel::attn_logits() const {
  if (attention.kind != AttentionSpec::Kind::Learned) return Vec();
  return params.at("attn.logits").col(0);
}

std::vector<double> CssModel::alpha_at(int t) const {
  Vec logits = attn_logits();
  return css_attention(attention, t,
                       attention.kind == AttentionSpec::Kind::Learned ? &logits
                                                                      : nullptr);
}

Vec CssModel::emission_params(int z, const Vec& x_s) const {
  ad::Tape tape;
  ModelCtx ctx(tape, params);
  Vec in(n_states + x_s.size());
  in.setZero();
  in[z] = 1.0;
  in.tail(x_s.size()) = x_s;
  return emis_mlp.forward(ctx, ctx.c(in)).val().col(0);
}

void CssModel::guard_tractable(int T) const {
  int w = std::min(attention.effective_window(), std::max(T - 1, 0));
  double enumeration = std::pow(double(n_states), double(T));
  double windowed = double(T) * std::pow(double(n_states), double(w + 1));
  if (enumeration <= 1e6 || windowed <= 1e7) return;
  throw SizeError(
      "exact latent marginalisation too large (|Z|^T = " +
      std::to_string(enumeration) + "); use the ELBO instead");
}

CssModel::Filter CssModel::forward_filter(const std::vector<Vec>& obs,
                                          const std::vector<int>& acts,
                                          const Vec& x_s, int m) const {
  const int Z = n_states;
  const int w = attention.effective_window();

  // emission parameters depend only on (z, x_s); evaluate once
  std::vector<Vec> emis(Z);
  for (int z = 0; z < Z; ++z) emis[size_t(z)] = emission_params(z, x_s);

  std::vector<Vec> flatP(size_t(domain.action_space.cardinality));
  for (int a = 0; a < domain.action_space.cardinality; ++a)
    flatP[size_t(a)] = transition_flat(a);

  // per-step emission likelihoods are max-shifted before exponentiation so a
  // deep-tail observation cannot underflow the normaliser
  auto shifted_emission = [&](const Vec& x, double& shift) {
    std::vector<double> e(static_cast<size_t>(Z));
    shift = -1e300;
    for (int z = 0; z < Z; ++z) {
      e[size_t(z)] = -head_nll(emis_head, emis[size_t(z)], x);
      shift = std::max(shift, e[size_t(z)]);
    }
    for (int z = 0; z < Z; ++z) e[size_t(z)] = std::exp(e[size_t(z)] - shift);
    return e;
  };

  Filter f;
  Vec pi = initial_dist();
  std::vector<double> belief(static_cast<size_t>(Z));
  double shift0 = 0.0;
  std::vector<double> e0 = shifted_emission(obs[0], shift0);
  double c0 = 0.0;
  for (int z = 0; z < Z; ++z) {
    belief[size_t(z)] = pi[z] * e0[size_t(z)];
    c0 += belief[size_t(z)];
  }
  c0 = std::max(c0, 1e-300);
  for (double& b : belief) b /= c0;
  f.loglik = std::log(c0) + shift0;
  f.tuple_len = 1;

  for (int t = 2; t <= m; ++t) {
    std::vector<double> alpha = alpha_at(t);
    int wp = f.tuple_len;  // = min(w, t-2+1)
    long long K = ipow(Z, wp);
    bool at_capacity = wp == w;
    long long Kn = at_capacity ? K : K * Z;
    std::vector<double> next(size_t(Kn), 0.0);

    double shift = 0.0;
    std::vector<double> e = shifted_emission(obs[size_t(t - 1)], shift);

    long long keep = at_capacity ? ipow(Z, w - 1) : K;
    for (long long s = 0; s < K; ++s) {
      double bs = belief[size_t(s)];
      if (bs == 0.0) continue;
      for (int z = 0; z < Z; ++z) {
        double trans = 0.0;
        int max_lag = std::min(wp, t - 1);
        for (int lag = 1; lag <= max_lag; ++lag) {
          double a = alpha[size_t(lag - 1)];
          if (a == 0.0) continue;
          int zlag = tuple_digit(s, lag - 1, Z);
          int action = acts[size_t(t - lag - 1)];  // y_{t-lag}
          trans += a * flatP[size_t(action)][zlag * Z + z];
        }
        long long sn = (s % keep) * Z + z;
        next[size_t(sn)] += bs * trans * e[size_t(z)];
      }
    }
    double c = 0.0;
    for (double v : next) c += v;
    c = std::max(c, 1e-300);
    for (double& v : next) v /= c;
    f.loglik += std::log(c) + shift;
    belief = std::move(next);
    f.tuple_len = std::min(wp + 1, w);
  }
  f.belief = std::move(belief);
  return f;
}

double CssModel::exact_loglik(const Trajectory& traj) const {
  if (traj.length() < 1) throw DimensionError("empty trajectory");
  guard_tractable(traj.length());
  Filter f = forward_filter(traj.observations, traj.actions,
                            traj.static_features, traj.length());
  return f.loglik;
}

// ---- tape version of the same recursion ----

ad::Var CssModel::loglik_var(ModelCtx& ctx, const Trajectory& traj) const {
  using namespace ad;
  const int Z = n_states;
  const int w = attention.effective_window();
  const int T = traj.length();
  guard_tractable(T);

  // row-softmaxed transition matrices, flattened row-major
  std::vector<Var> flatP;
  for (int a = 0; a < domain.action_space.cardinality; ++a) {
    std::vector<Var> rows;
    for (int r = 0; r < Z; ++r)
      rows.push_back(softmax_col(ctx.p(trans_name(a, r))));
    flatP.push_back(concat(rows));
  }

  // emission nets, one per state
  std::vector<Var> emis;
  for (int z = 0; z < Z; ++z) {
    Vec in(Z + traj.static_features.size());
    in.setZero();
    in[z] = 1.0;
    in.tail(traj.static_features.size()) = traj.static_features;
    emis.push_back(emis_mlp.forward(ctx, ctx.c(in)));
  }

  // max-shifted (Z x 1) likelihood column for x_t; the shift is a plain
  // constant that cancels in the gradient and is re-added to the accumulator
  auto emission_lik = [&](int t, double& shift) {
    std::vector<Var> parts;
    for (int z = 0; z < Z; ++z)
      parts.push_back(-head_nll_var(ctx, emis_head, emis[size_t(z)],
                                    traj.observations[size_t(t - 1)]));
    Var le = concat(parts);
    shift = le.val().maxCoeff();
    return exp_(le + ctx.c(Mat::Constant(Z, 1, -shift)));
  };

  Var attn_sm{nullptr, -1};
  bool learned = attention.kind == AttentionSpec::Kind::Learned;

  Var pi = softmax_col(ctx.p("pi.logits"));
  double shift0 = 0.0;
  Var b = cmul(pi, emission_lik(1, shift0));
  Var c = sum(b);
  b = div_scalar(b, c);
  Var ll = log_(c) + ctx.c(shift0);
  int tuple_len = 1;

  for (int t = 2; t <= T; ++t) {
    std::vector<double> alpha_fixed;
    int avail = 0;
    if (learned) {
      avail = std::min(w, t - 1);
      attn_sm = softmax_col(slice_rows(ctx.p("attn.logits"), 0, avail));
    } else {
      alpha_fixed = alpha_at(t);
    }

    int wp = tuple_len;
    long long K = ipow(Z, wp);
    bool at_capacity = wp == w;
    long long keep = at_capacity ? ipow(Z, w - 1) : K;
    long long Kp = K * Z;  // expanded (s, z) pairs, index p = s*Z + z

    std::vector<int> parent(static_cast<size_t>(Kp)), zeros(size_t(Kp), 0),
        znew(static_cast<size_t>(Kp));
    for (long long p = 0; p < Kp; ++p) {
      parent[size_t(p)] = int(p / Z);
      znew[size_t(p)] = int(p % Z);
    }

    Var b_rep = gather_elems(b, parent, zeros);
    double shift = 0.0;
    Var e_col = gather_elems(emission_lik(t, shift), znew, zeros);

    Var trans{nullptr, -1};
    int max_lag = std::min(wp, t - 1);
    for (int lag = 1; lag <= max_lag; ++lag) {
      int action = traj.actions[size_t(t - lag - 1)];
      std::vector<int> rows(static_cast<size_t>(Kp));
      for (long long p = 0; p < Kp; ++p)
        rows[size_t(p)] =
            tuple_digit(parent[size_t(p)], lag - 1, Z) * Z + znew[size_t(p)];
      Var term = gather_elems(flatP[size_t(action)], rows, zeros);
      if (learned) {
        term = mul_scalar(term, slice_rows(attn_sm, lag - 1, 1));
      } else {
        double a = alpha_fixed[size_t(lag - 1)];
        if (a == 0.0) continue;
        term = a * term;
      }
      trans = trans.valid() ? trans + term : term;
    }

    Var joint = cmul(cmul(b_rep, trans), e_col);
    Var nb{nullptr, -1};
    if (at_capacity && Z > 1 && K > keep) {
      // marginalise the dropped oldest digit: contiguous blocks of size
      // keep*Z share the same surviving tuple
      long long block = keep * Z;
      for (int d = 0; d < Z; ++d) {
        Var part = slice_rows(joint, int(d * block), int(block));
        nb = nb.valid() ? nb + part : part;
      }
    } else {
      nb = joint;
    }
    Var ct = sum(nb);
    b = div_scalar(nb, ct);
    ll = ll + log_(ct) + ctx.c(shift);
    tuple_len = std::min(wp + 1, w);
  }
  return ll;
}

// ---- ELBO ----

namespace {

// Posterior from the model's inference net: a backward recurrent summary of
// (x, y), combined with the previous state.
struct NetPosterior : CssPosterior {
  const CssModel& model;
  std::vector<std::vector<Vec>> table;  // [t-1][z_prev+1] -> dist over z_t

  explicit NetPosterior(const CssModel& m) : model(m) {}

  void prepare(const Trajectory& traj) override {
    ad::Tape tape;
    ModelCtx ctx(tape, model.params);
    int T = traj.length();
    int Y = model.domain.action_space.cardinality;

    std::vector<ad::Var> summary(static_cast<size_t>(T));
    ad::Var h = model.enc_gru.h0(ctx);
    for (int t = T; t >= 1; --t) {
      Vec u(model.domain.temporal_space.dim() + Y);
      u.setZero();
      u.head(model.domain.temporal_space.dim()) = traj.observations[size_t(t - 1)];
      u[model.domain.temporal_space.dim() + traj.actions[size_t(t - 1)]] = 1.0;
      h = model.enc_gru.step(ctx, ctx.c(u), h);
      summary[size_t(t - 1)] = h;
    }

    int Z = model.n_states;
    table.assign(size_t(T), {});
    for (int t = 1; t <= T; ++t) {
      auto& row = table[size_t(t - 1)];
      int n_prev = t == 1 ? 1 : Z;
      for (int zp = 0; zp < n_prev; ++zp) {
        Vec in(Z + model.enc_gru.hidden);
        in.setZero();
        if (t > 1) in[zp] = 1.0;
        in.tail(model.enc_gru.hidden) = summary[size_t(t - 1)].val().col(0);
        ad::Var logits = model.enc_mlp.forward(ctx, ctx.c(in));
        row.push_back(softmax_vec(logits.val().col(0)));
      }
    }
  }

  Vec dist(const Trajectory&, int t, const std::vector<int>& prefix) const override {
    int zp = t == 1 ? 0 : prefix[size_t(t - 2)];
    return table[size_t(t - 1)][size_t(zp)];
  }
};

}  // namespace

std::unique_ptr<CssPosterior> CssModel::net_posterior() const {
  return std::make_unique<NetPosterior>(*this);
}

ElboEstimate CssModel::elbo(const Trajectory& traj, const CssPosterior& q,
                            int n_mc, RngStream& rng) const {
  if (n_mc < 1) throw ConfigError("n_mc must be >= 1");
  const int Z = n_states;
  const int T = traj.length();

  std::vector<Vec> emis(static_cast<size_t>(Z));
  std::vector<Vec> lp_emit(static_cast<size_t>(T), Vec(Z));  // log p(x_t | z)
  for (int z = 0; z < Z; ++z)
    emis[size_t(z)] = emission_params(z, traj.static_features);
  for (int t = 1; t <= T; ++t)
    for (int z = 0; z < Z; ++z)
      lp_emit[size_t(t - 1)][z] =
          -head_nll(emis_head, emis[size_t(z)], traj.observations[size_t(t - 1)]);

  Vec log_pi = initial_dist().array().max(1e-12).log();
  std::vector<Mat> P(size_t(domain.action_space.cardinality));
  for (int a = 0; a < domain.action_space.cardinality; ++a)
    P[size_t(a)] = transition_matrix(a);

  // plain path-sampling estimator: log p(x, z | y) - log q(z | x, y) with
  // z ~ q; unbiased, and exactly the log-likelihood when q is the true
  // posterior (zero-variance in the zero-KL-gap case)
  double acc = 0.0, acc_sq = 0.0;
  std::vector<int> prefix;
  for (int s = 0; s < n_mc; ++s) {
    prefix.clear();
    double est = 0.0;
    for (int t = 1; t <= T; ++t) {
      Vec qt = q.dist(traj, t, prefix);
      int zt = rng.categorical(
          std::span<const double>(qt.data(), size_t(qt.size())));
      double lp_z;
      if (t == 1) {
        lp_z = log_pi[zt];
      } else {
        std::vector<double> alpha = alpha_at(t);
        double p = 0.0;
        for (int lag = 1; lag <= t - 1; ++lag) {
          double a = alpha[size_t(lag - 1)];
          if (a == 0.0) continue;
          p += a * P[size_t(traj.actions[size_t(t - lag - 1)])](
                       prefix[size_t(t - lag - 1)], zt);
        }
        lp_z = std::log(std::max(p, 1e-12));
      }
      est += lp_emit[size_t(t - 1)][zt] + lp_z -
             std::log(std::max(qt[zt], 1e-300));
      prefix.push_back(zt);
    }
    acc += est;
    acc_sq += est * est;
  }
  ElboEstimate e;
  e.n = n_mc;
  e.mean = acc / n_mc;
  double var = std::max(acc_sq / n_mc - e.mean * e.mean, 0.0);
  e.std_err = n_mc > 1 ? std::sqrt(var / (n_mc - 1)) : 0.0;
  return e;
}

ElboEstimate CssModel::elbo(const Trajectory& traj, int n_mc,
                            RngStream& rng) const {
  auto post = net_posterior();
  post->prepare(traj);
  return elbo(traj, *post, n_mc, rng);
}

ad::Var CssModel::elbo_var(ModelCtx& ctx, const Trajectory& traj,
                           RngStream& rng,
                           const std::vector<int>* fixed_path) const {
  using namespace ad;
  const int Z = n_states;
  const int T = traj.length();
  const int Y = domain.action_space.cardinality;

  std::vector<Var> flatP;
  for (int a = 0; a < Y; ++a) {
    std::vector<Var> rows;
    for (int r = 0; r < Z; ++r)
      rows.push_back(softmax_col(ctx.p(trans_name(a, r))));
    flatP.push_back(concat(rows));
  }
  Var log_pi = log_softmax_col(ctx.p("pi.logits"));

  std::vector<Var> emis;
  for (int z = 0; z < Z; ++z) {
    Vec in(Z + traj.static_features.size());
    in.setZero();
    in[z] = 1.0;
    in.tail(traj.static_features.size()) = traj.static_features;
    emis.push_back(emis_mlp.forward(ctx, ctx.c(in)));
  }

  // backward recurrent summary
  std::vector<Var> summary(static_cast<size_t>(T));
  Var h = enc_gru.h0(ctx);
  for (int t = T; t >= 1; --t) {
    Vec u(domain.temporal_space.dim() + Y);
    u.setZero();
    u.head(domain.temporal_space.dim()) = traj.observations[size_t(t - 1)];
    u[domain.temporal_space.dim() + traj.actions[size_t(t - 1)]] = 1.0;
    h = enc_gru.step(ctx, ctx.c(u), h);
    summary[size_t(t - 1)] = h;
  }

  Var elbo = ctx.c(0.0);
  std::vector<int> prefix;
  for (int t = 1; t <= T; ++t) {
    Var enc_in;
    {
      Vec zprev = Vec::Zero(Z);
      if (t > 1) zprev[prefix[size_t(t - 2)]] = 1.0;
      enc_in = concat({ctx.c(zprev), summary[size_t(t - 1)]});
    }
    Var q_logits = enc_mlp.forward(ctx, enc_in);
    Var q = softmax_col(q_logits);
    Var log_q = log_softmax_col(q_logits);

    for (int z = 0; z < Z; ++z) {
      Var lp_emit = -head_nll_var(ctx, emis_head, emis[size_t(z)],
                                  traj.observations[size_t(t - 1)]);
      Var lp_z{nullptr, -1};
      if (t == 1) {
        lp_z = slice_rows(log_pi, z, 1);
      } else {
        std::vector<double> alpha = alpha_at(t);
        Var p{nullptr, -1};
        for (int lag = 1; lag <= t - 1; ++lag) {
          double a = alpha[size_t(lag - 1)];
          if (a == 0.0) continue;
          int row = prefix[size_t(t - lag - 1)];
          Var entry = gather_elems(flatP[size_t(traj.actions[size_t(t - lag - 1)])],
                                   {row * Z + z}, {0});
          entry = a * entry;
          p = p.valid() ? p + entry : entry;
        }
        lp_z = log_(clamp(p, 1e-12, 1e300));
      }
      Var term = lp_emit + lp_z - slice_rows(log_q, z, 1);
      elbo = elbo + mul_scalar(term, slice_rows(q, z, 1));
    }

    int zt;
    if (fixed_path) {
      zt = (*fixed_path)[size_t(t - 1)];
    } else {
      Vec qv = q.val().col(0);
      zt = rng.categorical(std::span<const double>(qv.data(), size_t(qv.size())));
    }
    prefix.push_back(zt);
  }
  return elbo;
}

// ---- sampling ----

std::unique_ptr<EnvState> CssModel::reset(RngStream& rng, Vec& x_s,
                                          Vec& x1) const {
  auto state = std::make_unique<CssState>();
  x_s = init.sample_static(rng);
  Vec pi = initial_dist();
  int z1 = rng.categorical(std::span<const double>(pi.data(), size_t(pi.size())));
  x1 = head_sample(emis_head, emission_params(z1, x_s), rng);
  state->states.push_back(z1);
  state->x_s = x_s;
  return state;
}

Vec CssModel::step(EnvState& state, int action, RngStream& rng) const {
  auto& s = dynamic_cast<CssState&>(state);
  s.actions.push_back(action);
  int t = int(s.states.size()) + 1;
  std::vector<double> alpha = alpha_at(t);
  Vec probs = Vec::Zero(n_states);
  for (int lag = 1; lag <= t - 1; ++lag) {
    double a = alpha[size_t(lag - 1)];
    if (a == 0.0) continue;
    Mat P = transition_matrix(s.actions[size_t(t - lag - 1)]);
    probs += a * P.row(s.states[size_t(t - lag - 1)]).transpose();
  }
  int z = rng.categorical(std::span<const double>(probs.data(), size_t(probs.size())));
  s.states.push_back(z);
  s.t = t;
  return head_sample(emis_head, emission_params(z, s.x_s), rng);
}

StepDistribution CssModel::step_distribution(const History& h,
                                             const Vec& x_s) const {
  if (h.length() < 1) throw DimensionError("history must hold >= 1 observation");
  if (int(h.actions.size()) != h.length())
    throw DimensionError("history needs one action per observation");
  check_history(h, domain);
  int t = h.length() + 1;
  guard_tractable(t);
  Filter f = forward_filter(h.observations, h.actions, x_s, h.length());

  const int Z = n_states;
  std::vector<Vec> flatP(size_t(domain.action_space.cardinality));
  for (int a = 0; a < domain.action_space.cardinality; ++a)
    flatP[size_t(a)] = transition_flat(a);

  std::vector<double> alpha = alpha_at(t);
  int wp = f.tuple_len;
  std::vector<double> wz(size_t(Z), 0.0);
  long long K = ipow(Z, wp);
  for (long long s = 0; s < K; ++s) {
    double bs = f.belief[size_t(s)];
    if (bs == 0.0) continue;
    for (int z = 0; z < Z; ++z) {
      double trans = 0.0;
      for (int lag = 1; lag <= std::min(wp, t - 1); ++lag) {
        double a = alpha[size_t(lag - 1)];
        if (a == 0.0) continue;
        int zlag = tuple_digit(s, lag - 1, Z);
        int action = h.actions[size_t(t - lag - 1)];
        trans += a * flatP[size_t(action)][zlag * Z + z];
      }
      wz[size_t(z)] += bs * trans;
    }
  }

  StepDistribution d;
  d.head = emis_head;
  for (int z = 0; z < Z; ++z) {
    d.weights.push_back(wz[size_t(z)]);
    d.params.push_back(emission_params(z, x_s));
  }
  return d;
}

nlohmann::json CssModel::config_json() const {
  return {{"kind", "css"},
          {"states", n_states},
          {"attention", attention.to_json()},
          {"emission_dims", emis_mlp.dims},
          {"encoder_hidden", enc_gru.hidden},
          {"init_seed", params.seed}};
}

}  // namespace dmkit
