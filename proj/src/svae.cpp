#include "dmkit/svae.hpp"

#include <cmath>

#include "dmkit/errors.hpp"

namespace dmkit {

namespace {

struct SvaeState : EnvState {
  Vec x_s;
  Vec z;
};

constexpr double kLvLo = -10.0, kLvHi = 10.0;

double clamp_lv(double lv) { return std::min(std::max(lv, kLvLo), kLvHi); }

// KL(N(mq, e^lq) || N(mp, e^lp)) per dimension, summed
double gauss_kl(const Vec& mq, const Vec& lq, const Vec& mp, const Vec& lp) {
  double kl = 0.0;
  for (int i = 0; i < mq.size(); ++i) {
    double lqc = clamp_lv(lq[i]), lpc = clamp_lv(lp[i]);
    double d = mq[i] - mp[i];
    kl += 0.5 * (lpc - lqc + (std::exp(lqc) + d * d) * std::exp(-lpc) - 1.0);
  }
  return kl;
}

}  // namespace

SvaeModel SvaeModel::make(const DomainSchema& schema, int latent_dim,
                          std::vector<int> hidden, int enc_hidden,
                          uint64_t seed) {
  if (latent_dim < 1) throw ConfigError("latent dim must be >= 1");
  SvaeModel m;
  m.domain = schema;
  m.latent_dim = latent_dim;
  m.init = InitModel::neutral(schema);
  m.emis_head = HeadSpec::for_space(schema.temporal_space);

  m.trans_mlp.prefix = "trans";
  m.trans_mlp.dims.push_back(latent_dim + schema.action_space.cardinality);
  for (int h : hidden) m.trans_mlp.dims.push_back(h);
  m.trans_mlp.dims.push_back(2 * latent_dim);

  m.emis_mlp.prefix = "emis";
  m.emis_mlp.dims.push_back(latent_dim + schema.static_space.dim());
  for (int h : hidden) m.emis_mlp.dims.push_back(h);
  m.emis_mlp.dims.push_back(m.emis_head.param_dim());

  m.enc_gru.prefix = "enc.gru";
  m.enc_gru.input = schema.temporal_space.dim() + schema.action_space.cardinality;
  m.enc_gru.hidden = enc_hidden;
  m.enc_mlp.prefix = "enc.mlp";
  m.enc_mlp.dims = {latent_dim + enc_hidden, 2 * latent_dim};

  m.params.seed = seed;
  m.trans_mlp.init(m.params);
  m.emis_mlp.init(m.params);
  m.enc_gru.init(m.params);
  m.enc_mlp.init(m.params);
  return m;
}

SvaeModel::Gauss SvaeModel::transition(const Vec& z, int action) const {
  ad::Tape tape;
  ModelCtx ctx(tape, params);
  Vec in = Vec::Zero(latent_dim + domain.action_space.cardinality);
  in.head(latent_dim) = z;
  in[latent_dim + action] = 1.0;
  Vec out = trans_mlp.forward(ctx, ctx.c(in)).val().col(0);
  return {out.head(latent_dim), out.tail(latent_dim)};
}

Vec SvaeModel::emission_params(const Vec& z, const Vec& x_s) const {
  ad::Tape tape;
  ModelCtx ctx(tape, params);
  Vec in(latent_dim + x_s.size());
  in.head(latent_dim) = z;
  in.tail(x_s.size()) = x_s;
  return emis_mlp.forward(ctx, ctx.c(in)).val().col(0);
}

// ---- ELBO (plain doubles) ----

ElboEstimate SvaeModel::elbo(const Trajectory& traj, int n_mc, RngStream& rng,
                             bool encoder_as_prior) const {
  if (n_mc < 1) throw ConfigError("n_mc must be >= 1");
  const int T = traj.length();
  const int d = latent_dim;
  const int Y = domain.action_space.cardinality;
  const int D = domain.temporal_space.dim();

  // backward summaries (values only)
  ad::Tape tape;
  ModelCtx ctx(tape, params);
  std::vector<Vec> summary(static_cast<size_t>(T));
  {
    ad::Var h = enc_gru.h0(ctx);
    for (int t = T; t >= 1; --t) {
      Vec u = Vec::Zero(D + Y);
      u.head(D) = traj.observations[size_t(t - 1)];
      u[D + traj.actions[size_t(t - 1)]] = 1.0;
      h = enc_gru.step(ctx, ctx.c(u), h);
      summary[size_t(t - 1)] = h.val().col(0);
    }
  }

  auto encoder = [&](int t, const Vec& z_prev) -> Gauss {
    Vec in = Vec::Zero(d + enc_gru.hidden);
    if (t > 1) in.head(d) = z_prev;
    in.tail(enc_gru.hidden) = summary[size_t(t - 1)];
    ad::Tape tp;
    ModelCtx cx(tp, params);
    Vec out = enc_mlp.forward(cx, cx.c(in)).val().col(0);
    return {out.head(d), out.tail(d)};
  };

  double acc = 0.0, acc_sq = 0.0;
  for (int s = 0; s < n_mc; ++s) {
    double est = 0.0;
    Vec z_prev = Vec::Zero(d);
    for (int t = 1; t <= T; ++t) {
      Gauss prior = t == 1 ? Gauss{Vec::Zero(d), Vec::Zero(d)}
                           : transition(z_prev, traj.actions[size_t(t - 2)]);
      Gauss q = encoder_as_prior ? prior : encoder(t, z_prev);
      est -= gauss_kl(q.mean, q.logvar, prior.mean, prior.logvar);
      Vec z(d);
      for (int i = 0; i < d; ++i)
        z[i] = q.mean[i] + std::exp(0.5 * clamp_lv(q.logvar[i])) * rng.normal();
      est -= head_nll(emis_head, emission_params(z, traj.static_features),
                      traj.observations[size_t(t - 1)]);
      z_prev = z;
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

ElboEstimate SvaeModel::prior_reconstruction(const Trajectory& traj, int n_mc,
                                             RngStream& rng) const {
  if (n_mc < 1) throw ConfigError("n_mc must be >= 1");
  const int T = traj.length();
  const int d = latent_dim;
  double acc = 0.0, acc_sq = 0.0;
  for (int s = 0; s < n_mc; ++s) {
    double est = 0.0;
    Vec z = Vec::Zero(d);
    for (int t = 1; t <= T; ++t) {
      Gauss prior = t == 1 ? Gauss{Vec::Zero(d), Vec::Zero(d)}
                           : transition(z, traj.actions[size_t(t - 2)]);
      Vec znew(d);
      for (int i = 0; i < d; ++i)
        znew[i] = prior.mean[i] +
                  std::exp(0.5 * clamp_lv(prior.logvar[i])) * rng.normal();
      z = znew;
      est -= head_nll(emis_head, emission_params(z, traj.static_features),
                      traj.observations[size_t(t - 1)]);
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

// ---- tape ELBO for training ----

ad::Var SvaeModel::elbo_var(ModelCtx& ctx, const Trajectory& traj,
                            RngStream& rng,
                            const std::vector<Vec>* fixed_noise) const {
  using namespace ad;
  const int T = traj.length();
  const int d = latent_dim;
  const int Y = domain.action_space.cardinality;
  const int D = domain.temporal_space.dim();

  std::vector<Var> summary(static_cast<size_t>(T));
  Var h = enc_gru.h0(ctx);
  for (int t = T; t >= 1; --t) {
    Vec u = Vec::Zero(D + Y);
    u.head(D) = traj.observations[size_t(t - 1)];
    u[D + traj.actions[size_t(t - 1)]] = 1.0;
    h = enc_gru.step(ctx, ctx.c(u), h);
    summary[size_t(t - 1)] = h;
  }

  Var elbo = ctx.c(0.0);
  Var z_prev{nullptr, -1};
  for (int t = 1; t <= T; ++t) {
    Var prior_mean{nullptr, -1}, prior_lv{nullptr, -1};
    if (t == 1) {
      prior_mean = ctx.c(Mat::Zero(d, 1));
      prior_lv = ctx.c(Mat::Zero(d, 1));
    } else {
      Vec yoh = Vec::Zero(Y);
      yoh[traj.actions[size_t(t - 2)]] = 1.0;
      Var in = concat({z_prev, ctx.c(yoh)});
      Var out = trans_mlp.forward(ctx, in);
      prior_mean = slice_rows(out, 0, d);
      prior_lv = clamp(slice_rows(out, d, d), kLvLo, kLvHi);
    }

    Var enc_first = t == 1 ? ctx.c(Mat::Zero(d, 1)) : z_prev;
    Var enc_in = concat({enc_first, summary[size_t(t - 1)]});
    Var enc_out = enc_mlp.forward(ctx, enc_in);
    Var q_mean = slice_rows(enc_out, 0, d);
    Var q_lv = clamp(slice_rows(enc_out, d, d), kLvLo, kLvHi);

    // analytic KL between diagonal gaussians
    Var diff = q_mean - prior_mean;
    Var kl = 0.5 * sum(prior_lv - q_lv +
                       cmul(exp_(q_lv) + cmul(diff, diff), exp_(-prior_lv)) -
                       ctx.c(Mat::Ones(d, 1)));
    elbo = elbo - kl;

    Vec xi(d);
    if (fixed_noise) {
      xi = (*fixed_noise)[size_t(t - 1)];
    } else {
      for (int i = 0; i < d; ++i) xi[i] = rng.normal();
    }
    Var z = q_mean + cmul(exp_(0.5 * q_lv), ctx.c(xi));

    Var emis_in = concat({z, ctx.c(traj.static_features)});
    Var hp = emis_mlp.forward(ctx, emis_in);
    elbo = elbo - head_nll_var(ctx, emis_head, hp,
                               traj.observations[size_t(t - 1)]);
    z_prev = z;
  }
  return elbo;
}

// ---- sampling ----

std::unique_ptr<EnvState> SvaeModel::reset(RngStream& rng, Vec& x_s,
                                           Vec& x1) const {
  auto state = std::make_unique<SvaeState>();
  x_s = init.sample_static(rng);
  Vec z(latent_dim);
  for (int i = 0; i < latent_dim; ++i) z[i] = rng.normal();
  x1 = head_sample(emis_head, emission_params(z, x_s), rng);
  state->x_s = x_s;
  state->z = z;
  return state;
}

Vec SvaeModel::step(EnvState& state, int action, RngStream& rng) const {
  auto& s = dynamic_cast<SvaeState&>(state);
  Gauss g = transition(s.z, action);
  Vec z(latent_dim);
  for (int i = 0; i < latent_dim; ++i)
    z[i] = g.mean[i] + std::exp(0.5 * clamp_lv(g.logvar[i])) * rng.normal();
  s.z = z;
  s.t += 1;
  return head_sample(emis_head, emission_params(z, s.x_s), rng);
}

StepDistribution SvaeModel::step_distribution(const History& h,
                                              const Vec& x_s) const {
  if (h.length() < 1) throw DimensionError("history must hold >= 1 observation");
  if (int(h.actions.size()) != h.length())
    throw DimensionError("history needs one action per observation");
  check_history(h, domain);
  Vec z = Vec::Zero(latent_dim);  // prior mean at t = 1
  for (int i = 0; i < h.length(); ++i)
    z = transition(z, h.actions[size_t(i)]).mean;

  StepDistribution d;
  d.head = emis_head;
  d.weights = {1.0};
  d.params = {emission_params(z, x_s)};
  return d;
}

nlohmann::json SvaeModel::config_json() const {
  return {{"kind", "svae"},
          {"latent", latent_dim},
          {"trans_dims", trans_mlp.dims},
          {"encoder_hidden", enc_gru.hidden},
          {"init_seed", params.seed}};
}

}  // namespace dmkit
