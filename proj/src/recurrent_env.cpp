#include "dmkit/recurrent_env.hpp"

#include "dmkit/errors.hpp"

namespace dmkit {

namespace {

struct RecState : EnvState {
  ad::Tape tape;
  std::unique_ptr<ModelCtx> ctx;
  ad::Var h{nullptr, -1};
  Vec x_s;
  Vec x_last;
};

}  // namespace

RecurrentEnv RecurrentEnv::make(const DomainSchema& schema, int hidden,
                                std::vector<int> head_hidden, uint64_t seed,
                                bool balanced, double balancing_weight) {
  RecurrentEnv m;
  m.domain = schema;
  m.init = InitModel::neutral(schema);
  m.head = HeadSpec::for_space(schema.temporal_space);
  m.balanced_kind = balanced;
  m.balancing_weight = balanced ? balancing_weight : 0.0;
  if (m.balancing_weight < 0.0)
    throw ConfigError("balancing weight must be >= 0");

  m.gru.prefix = "gru";
  m.gru.input = schema.temporal_space.dim() + schema.action_space.cardinality +
                schema.static_space.dim();
  m.gru.hidden = hidden;

  m.head_mlp.prefix = "head";
  m.head_mlp.dims.push_back(hidden);
  for (int hdim : head_hidden) m.head_mlp.dims.push_back(hdim);
  m.head_mlp.dims.push_back(m.head.param_dim());

  m.params.seed = seed;
  m.gru.init(m.params);
  m.head_mlp.init(m.params);
  if (balanced) {
    m.adv_mlp.prefix = "adv";
    m.adv_mlp.dims = {hidden, schema.action_space.cardinality};
    m.adv_mlp.init(m.params);
  }
  return m;
}

Vec RecurrentEnv::input_token(const Vec& x, int action, const Vec& x_s) const {
  int D = domain.temporal_space.dim();
  int Y = domain.action_space.cardinality;
  Vec u = Vec::Zero(D + Y + x_s.size());
  u.head(D) = x;
  u[D + action] = 1.0;
  u.tail(x_s.size()) = x_s;
  return u;
}

std::pair<ad::Var, ad::Var> RecurrentEnv::trajectory_losses(
    ModelCtx& ctx, const Trajectory& traj, ad::Var* optimized) const {
  using namespace ad;
  int T = traj.length();
  Var h = gru.h0(ctx);
  Var nll = ctx.c(0.0);
  Var adv = ctx.c(0.0);
  int steps = 0;

  for (int t = 2; t <= T; ++t) {
    // consume (x_{t-1}, y_{t-1}); h then encodes the history feeding x_t
    Var u = ctx.c(input_token(traj.observations[size_t(t - 2)],
                              traj.actions[size_t(t - 2)],
                              traj.static_features));
    h = gru.step(ctx, u, h);
    Var hp = head_mlp.forward(ctx, h);
    nll = nll + head_nll_var(ctx, head, hp, traj.observations[size_t(t - 1)]);
    if (balanced_kind) {
      // predict the upcoming action from the (gradient-reversed)
      // representation; identity on the forward pass
      Var logits = adv_mlp.forward(ctx, grad_reverse(h, balancing_weight));
      adv = adv + categorical_nll(logits, traj.actions[size_t(t - 1)]);
    }
    ++steps;
  }
  double inv = steps > 0 ? 1.0 / double(steps) : 0.0;
  nll = inv * nll;
  adv = inv * adv;
  if (optimized) {
    *optimized = balanced_kind ? nll + adv : nll;
  }
  return {nll, adv};
}

std::pair<double, double> RecurrentEnv::balanced_repr_loss(
    const Trajectory& traj) const {
  ad::Tape tape;
  ModelCtx ctx(tape, params);
  auto [nll, adv] = trajectory_losses(ctx, traj, nullptr);
  return {nll.val()(0, 0), adv.val()(0, 0)};
}

std::unique_ptr<EnvState> RecurrentEnv::reset(RngStream& rng, Vec& x_s,
                                              Vec& x1) const {
  auto state = std::make_unique<RecState>();
  x_s = init.sample_static(rng);
  x1 = init.sample_first(x_s, rng);
  state->ctx = std::make_unique<ModelCtx>(state->tape, params);
  state->h = gru.h0(*state->ctx);
  state->x_s = x_s;
  state->x_last = x1;
  return state;
}

Vec RecurrentEnv::step(EnvState& state, int action, RngStream& rng) const {
  auto& s = dynamic_cast<RecState&>(state);
  ad::Var u = s.ctx->c(input_token(s.x_last, action, s.x_s));
  s.h = gru.step(*s.ctx, u, s.h);
  ad::Var hp = head_mlp.forward(*s.ctx, s.h);
  Vec x = head_sample(head, hp.val().col(0), rng);
  s.x_last = x;
  s.t += 1;
  return x;
}

StepDistribution RecurrentEnv::step_distribution(const History& h,
                                                 const Vec& x_s) const {
  if (h.length() < 1) throw DimensionError("history must hold >= 1 observation");
  if (int(h.actions.size()) != h.length())
    throw DimensionError("history needs one action per observation");
  check_history(h, domain);

  ad::Tape tape;
  ModelCtx ctx(tape, params);
  ad::Var hv = gru.h0(ctx);
  for (int i = 0; i < h.length(); ++i) {
    hv = gru.step(ctx, ctx.c(input_token(h.observations[size_t(i)],
                                         h.actions[size_t(i)], x_s)),
                  hv);
  }
  ad::Var hp = head_mlp.forward(ctx, hv);

  StepDistribution d;
  d.head = head;
  d.weights = {1.0};
  d.params = {hp.val().col(0)};
  return d;
}

nlohmann::json RecurrentEnv::config_json() const {
  nlohmann::json j{{"kind", kind()},
                   {"hidden", gru.hidden},
                   {"head_dims", head_mlp.dims},
                   {"init_seed", params.seed}};
  if (balanced_kind) j["balancing_weight"] = balancing_weight;
  return j;
}

}  // namespace dmkit
