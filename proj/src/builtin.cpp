#include "dmkit/builtin.hpp"

#include <cmath>

#include "dmkit/errors.hpp"

namespace dmkit {

using nlohmann::json;

namespace {

int popcount3(int a) { return (a & 1) + ((a >> 1) & 1) + ((a >> 2) & 1); }

Vec log_probs(std::initializer_list<double> probs) {
  Vec v(int(probs.size()));
  int i = 0;
  for (double p : probs) v[i++] = std::log(std::max(p, 1e-18));
  return v;
}

void set_transition_row(CssModel& m, int action, int row, const Vec& probs) {
  Mat logits(probs.size(), 1);
  for (int i = 0; i < probs.size(); ++i)
    logits(i, 0) = std::log(std::max(probs[i], 1e-18));
  m.params.tensors["trans.y" + std::to_string(action) + ".r" +
                   std::to_string(row)] = logits;
}

// Shared three-stage structure; per-domain numbers differ.
CssModel make_truth_css(const DomainSchema& schema, AttentionSpec att,
                        double drift, double event_gain, uint64_t seed) {
  CssModel m = CssModel::make(schema, 3, att, {}, 8, seed);

  m.params.tensors["pi.logits"] = log_probs({0.6, 0.3, 0.1});

  int Y = schema.action_space.cardinality;
  for (int a = 0; a < Y; ++a) {
    double i = double(popcount3(a)) / 3.0;  // treatment intensity
    Vec r0(3), r1(3), r2(3);
    // tridiagonal: stage moves one step at a time
    double worsen0 = 0.05 + 0.20 * (1.0 - i);
    r0 << 1.0 - worsen0, worsen0, 0.0;
    double improve1 = 0.05 + drift * i;
    double worsen1 = 0.03 + 0.22 * (1.0 - i);
    r1 << improve1, 1.0 - improve1 - worsen1, worsen1;
    double improve2 = 0.04 + drift * i;
    r2 << 0.0, improve2, 1.0 - improve2;
    set_transition_row(m, a, 0, r0);
    set_transition_row(m, a, 1, r1);
    set_transition_row(m, a, 2, r2);
  }

  // single linear emission layer: [stage one-hot; x_s] -> head params
  int S = schema.static_space.dim();
  int C = schema.temporal_space.continuous_dims;
  int B = schema.temporal_space.binary_dims;
  Mat W = Mat::Zero(2 * C + B, 3 + S);
  Vec b = Vec::Zero(2 * C + B);
  for (int j = 0; j < C; ++j) {
    b[j] = 0.1 * double(j % 7) - 0.3;
    double gain = 0.6 + 0.05 * double(j % 5);
    for (int z = 0; z < 3; ++z) W(j, z) = double(z - 1) * gain;
    W(j, 3 + (j % S)) = 0.15;  // statics shift the means
    b[C + j] = -1.2;           // log-variance
    W(C + j, 2) = 0.3;         // the critical stage is noisier
  }
  for (int j = 0; j < B; ++j) {
    b[2 * C + j] = -1.5 - 0.2 * double(j % 3);
    W(2 * C + j, 2) = event_gain;  // acute events cluster in stage 2
    W(2 * C + j, 1) = 0.5 * event_gain;
    W(2 * C + j, 3 + ((j + 1) % S)) = 0.2;
  }
  m.params.tensors["emis.W0"] = W;
  m.params.tensors["emis.b0"] = Mat(b);

  // statics: mildly correlated continuous block, mixed-rate binaries
  int sc = schema.static_space.continuous_dims;
  int sb = schema.static_space.binary_dims;
  m.init.static_mean = Vec::Zero(sc);
  Mat L = 0.8 * Mat::Identity(sc, sc);
  for (int r = 1; r < sc; ++r) L(r, r - 1) = 0.2;
  m.init.static_cov_factor = L;
  for (int i = 0; i < sb; ++i)
    m.init.static_bin_p[i] = 0.2 + 0.12 * double(i % 5);
  return m;
}

}  // namespace

CssModel ward_truth_css() {
  AttentionSpec att;
  att.kind = AttentionSpec::Kind::Fixed;
  att.weights = {0.7, 0.3};
  return make_truth_css(ward_synth_schema(), att, 0.45, 2.4, 11);
}

CssModel icu_truth_css() {
  AttentionSpec att;  // markov
  return make_truth_css(icu_synth_schema(), att, 0.55, 2.8, 13);
}

// ---- action-copy environments ----

namespace {

std::shared_ptr<EnvModel> action_copy_css(const DomainSchema& schema) {
  if (schema.temporal_space.binary_dims < 1)
    throw ConfigError("action-copy needs a binary temporal feature");
  CssModel m = CssModel::make(schema, 2, AttentionSpec{}, {}, 4, 17);

  m.params.tensors["pi.logits"] = log_probs({0.5, 0.5});
  int Y = schema.action_space.cardinality;
  for (int a = 0; a < Y; ++a) {
    int target = a & 1;  // state tracks bit 0 of the action
    for (int r = 0; r < 2; ++r) {
      Vec probs(2);
      probs << (target == 0 ? 1.0 : 1e-18), (target == 1 ? 1.0 : 1e-18);
      set_transition_row(m, a, r, probs);
    }
  }

  int S = schema.static_space.dim();
  int C = schema.temporal_space.continuous_dims;
  int B = schema.temporal_space.binary_dims;
  Mat W = Mat::Zero(2 * C + B, 2 + S);
  Vec b = Vec::Zero(2 * C + B);
  // binary feature 0 flags state 1; the rest stays near-neutral noise
  b[2 * C] = -25.0;
  W(2 * C, 1) = 50.0;
  m.params.tensors["emis.W0"] = W;
  m.params.tensors["emis.b0"] = Mat(b);
  m.init = InitModel::neutral(schema);
  return std::make_shared<CssModel>(std::move(m));
}

std::shared_ptr<EnvModel> action_copy_recurrent(const DomainSchema& schema,
                                                bool balanced) {
  if (schema.temporal_space.binary_dims < 1)
    throw ConfigError("action-copy needs a binary temporal feature");
  RecurrentEnv m = RecurrentEnv::make(schema, 4, {}, 19, balanced, 0.0);

  int D = schema.temporal_space.dim();
  int Y = schema.action_space.cardinality;
  int C = schema.temporal_space.continuous_dims;

  for (const char* g : {"z", "r", "c"}) {
    m.params.tensors["gru.W" + std::string(g)].setZero();
    m.params.tensors["gru.U" + std::string(g)].setZero();
    m.params.tensors["gru.b" + std::string(g)].setZero();
  }
  m.params.tensors["gru.bz"].setConstant(25.0);  // update gate pinned open
  Mat& Wc = m.params.tensors["gru.Wc"];
  for (int a = 0; a < Y; ++a)
    if (a & 1) Wc(0, D + a) = 4.0;  // hidden 0 tracks bit 0

  Mat& Wh = m.params.tensors["head.W0"];
  Vec bh = Vec::Zero(Wh.rows());
  Wh.setZero();
  // hidden 0 is tanh(4) when bit 0 was set, 0 otherwise
  Wh(2 * C, 0) = 50.0 / std::tanh(4.0);
  bh[2 * C] = -25.0;
  m.params.tensors["head.b0"] = Mat(bh);
  return std::make_shared<RecurrentEnv>(std::move(m));
}

std::shared_ptr<EnvModel> action_copy_svae(const DomainSchema& schema) {
  if (schema.temporal_space.binary_dims < 1)
    throw ConfigError("action-copy needs a binary temporal feature");
  SvaeModel m = SvaeModel::make(schema, 2, {}, 4, 23);

  int Y = schema.action_space.cardinality;
  int C = schema.temporal_space.continuous_dims;
  int d = 2;

  Mat& Wt = m.params.tensors["trans.W0"];  // (2d) x (d + Y)
  Wt.setZero();
  Vec bt = Vec::Zero(2 * d);
  for (int a = 0; a < Y; ++a)
    if (a & 1) Wt(0, d + a) = 6.0;  // latent 0 mean: +3 for odd, -3 for even
  bt[0] = -3.0;
  bt[d] = -8.0;  // tight transition noise
  bt[d + 1] = -8.0;
  m.params.tensors["trans.b0"] = Mat(bt);

  Mat& We = m.params.tensors["emis.W0"];
  We.setZero();
  Vec be = Vec::Zero(We.rows());
  We(2 * C, 0) = 10.0;  // binary feature 0 reads the latent sign
  m.params.tensors["emis.b0"] = Mat(be);
  return std::make_shared<SvaeModel>(std::move(m));
}

}  // namespace

std::shared_ptr<EnvModel> action_copy_env(const std::string& kind,
                                          const DomainSchema& schema) {
  if (kind == "css") return action_copy_css(schema);
  if (kind == "tforce") return action_copy_recurrent(schema, false);
  if (kind == "balanced") return action_copy_recurrent(schema, true);
  if (kind == "svae") return action_copy_svae(schema);
  throw ConfigError("unknown environment kind: " + kind);
}

std::shared_ptr<EnvModel> seeded_env(const std::string& kind,
                                     const DomainSchema& schema,
                                     uint64_t init_seed, const json& hyper) {
  auto geti = [&](const char* key, int fallback) {
    return hyper.contains(key) ? hyper.at(key).get<int>() : fallback;
  };
  if (kind == "tforce" || kind == "balanced") {
    double lambda = hyper.contains("balancing_weight")
                        ? hyper.at("balancing_weight").get<double>()
                        : 1.0;
    std::vector<int> head_hidden;
    if (int hh = geti("head_hidden", 0); hh > 0) head_hidden.push_back(hh);
    return std::make_shared<RecurrentEnv>(
        RecurrentEnv::make(schema, geti("hidden", 16), head_hidden, init_seed,
                           kind == "balanced", lambda));
  }
  if (kind == "css") {
    AttentionSpec att;
    if (hyper.contains("attention"))
      att = AttentionSpec::from_json(hyper.at("attention"));
    std::vector<int> emis_hidden;
    if (int eh = geti("emission_hidden", 16); eh > 0)
      emis_hidden.push_back(eh);
    return std::make_shared<CssModel>(
        CssModel::make(schema, geti("states", 3), att, emis_hidden,
                       geti("encoder_hidden", 8), init_seed));
  }
  if (kind == "svae") {
    std::vector<int> hidden;
    if (int hh = geti("hidden", 16); hh > 0) hidden.push_back(hh);
    return std::make_shared<SvaeModel>(
        SvaeModel::make(schema, geti("latent", 4), hidden,
                        geti("encoder_hidden", 8), init_seed));
  }
  throw ConfigError("unknown environment kind: " + kind);
}

std::shared_ptr<EnvModel> make_env(const json& cfg, const DomainSchema& schema) {
  std::string kind = cfg.at("kind").get<std::string>();

  if (cfg.contains("checkpoint"))
    return load_env_checkpoint(cfg.at("checkpoint").get<std::string>());

  if (cfg.contains("builtin")) {
    std::string name = cfg.at("builtin").get<std::string>();
    if (name == "action_copy") return action_copy_env(kind, schema);
    if (kind == "css" && name == "ward_synth")
      return std::make_shared<CssModel>(ward_truth_css());
    if (kind == "css" && name == "icu_synth")
      return std::make_shared<CssModel>(icu_truth_css());
    throw ConfigError("unknown builtin environment: " + name + " for kind " +
                      kind);
  }

  json hyper = cfg.value("hyperparameters", json::object());
  if (cfg.contains("attention")) hyper["attention"] = cfg.at("attention");
  uint64_t init_seed = hyper.value("init_seed", uint64_t(1));
  return seeded_env(kind, schema, init_seed, hyper);
}

Scenario load_scenario(const json& cfg, std::optional<uint64_t> seed_override) {
  Scenario s;
  const json& dom = cfg.at("domain");
  s.domain = dom.is_string() ? builtin_schema(dom.get<std::string>())
                             : dom.get<DomainSchema>();
  s.domain.validate();
  s.env = make_env(cfg.at("environment"), s.domain);
  s.policy = policy_from_json(cfg.at("policy"), s.domain);
  if (cfg.contains("confounding"))
    cfg.at("confounding").get_to(s.confounding);
  s.horizon = cfg.value("horizon", s.domain.max_length);
  s.min_len = cfg.value("min_len", std::min(5, s.horizon));
  if (seed_override) {
    s.seed = *seed_override;
  } else if (cfg.contains("seed")) {
    s.seed = cfg.at("seed").get<uint64_t>();
  } else {
    throw ConfigError("no seed: pass --seed or put one in the scenario config");
  }
  s.validate();
  return s;
}

PolicySpec uniform_policy(const DomainSchema& schema) {
  PolicySpec p;
  PolicyComponent c;
  c.beta = 0.0;
  c.lag = 1;
  c.mask = Mask::all(schema);
  c.decider.kind = BaseDecider::Kind::Tree;
  c.decider.tree.leaves = {Vec::Zero(schema.action_space.cardinality)};
  p.components.push_back(std::move(c));
  p.weights = Vec::Ones(1);
  return p;
}

PolicySpec demo_mixture_policy(const DomainSchema& schema, uint64_t seed) {
  int Y = schema.action_space.cardinality;
  PolicySpec p;

  // guideline-style tree on the first temporal feature
  PolicyComponent tree;
  tree.beta = 3.0;
  tree.lag = 1;
  tree.mask = Mask::all(schema);
  tree.decider.kind = BaseDecider::Kind::Tree;
  int f0 = int(tree.mask.static_idx.size());  // first temporal feature
  tree.decider.tree.splits = {{f0, -0.2, -1, -2}};
  Vec treat = Vec::Zero(Y), hold = Vec::Zero(Y);
  treat[Y - 1] = 1.0;
  hold[0] = 1.0;
  tree.decider.tree.leaves = {treat, hold};
  p.components.push_back(std::move(tree));

  // linear scorer over a two-step window
  PolicyComponent lin;
  lin.beta = 1.0;
  lin.lag = 2;
  lin.mask = Mask::all(schema);
  int dm = schema.temporal_space.dim();
  int in = schema.static_space.dim() + 2 * (dm + Y);
  RngStream rng = RngStream(seed).child("demo.linear");
  lin.decider.kind = BaseDecider::Kind::Linear;
  lin.decider.linear.W = Mat(Y, in);
  double sc = 1.0 / std::sqrt(double(in));
  for (int r = 0; r < Y; ++r)
    for (int c = 0; c < in; ++c)
      lin.decider.linear.W(r, c) = (2.0 * rng.uniform() - 1.0) * sc;
  lin.decider.linear.b = Vec::Zero(Y);
  p.components.push_back(std::move(lin));

  // recurrent scorer over the full history
  PolicyComponent rec;
  rec.beta = 0.7;
  rec.lag = 0;
  rec.mask = Mask::all(schema);
  rec.decider.kind = BaseDecider::Kind::Recurrent;
  rec.decider.recurrent.gru.prefix = "gru";
  rec.decider.recurrent.gru.input = dm + Y;
  rec.decider.recurrent.gru.hidden = 6;
  rec.decider.recurrent.params.seed = seed + 1;
  rec.decider.recurrent.gru.init(rec.decider.recurrent.params);
  rec.decider.recurrent.params.add_init("out.W", Y, 6, 6);
  rec.decider.recurrent.params.add_zeros("out.b", Y, 1);
  p.components.push_back(std::move(rec));

  p.weights = Vec(3);
  p.weights << 0.5, 0.3, 0.2;
  return p;
}

// ---- environment checkpoints ----

void save_env_checkpoint(const EnvModel& env, const TrainConfig& cfg,
                         const std::string& path) {
  json meta{{"kind", env.kind()},
            {"schema", env.schema()},
            {"env_config", env.config_json()},
            {"train_config_digest", cfg.digest()}};

  const ParamStore* params = nullptr;
  json init;
  if (auto* rec = dynamic_cast<const RecurrentEnv*>(&env)) {
    params = &rec->params;
    init = rec->init.to_json();
  } else if (auto* css = dynamic_cast<const CssModel*>(&env)) {
    params = &css->params;
    init = css->init.to_json();
  } else if (auto* svae = dynamic_cast<const SvaeModel*>(&env)) {
    params = &svae->params;
    init = svae->init.to_json();
  } else {
    throw ConfigError("cannot checkpoint this environment kind");
  }
  meta["init_model"] = init;
  save_checkpoint(*params, meta, path);
}

std::shared_ptr<EnvModel> load_env_checkpoint(const std::string& path) {
  json meta;
  ParamStore params = load_checkpoint(path, &meta);
  DomainSchema schema = meta.at("schema").get<DomainSchema>();
  std::string kind = meta.at("kind").get<std::string>();
  json env_cfg = meta.at("env_config");
  InitModel init = InitModel::from_json(meta.at("init_model"));

  auto inner = [](const std::vector<int>& dims) {
    return std::vector<int>(dims.begin() + 1, dims.end() - 1);
  };

  std::shared_ptr<EnvModel> env;
  if (kind == "tforce" || kind == "balanced") {
    auto m = std::make_shared<RecurrentEnv>(RecurrentEnv::make(
        schema, env_cfg.at("hidden").get<int>(),
        inner(env_cfg.at("head_dims").get<std::vector<int>>()), params.seed,
        kind == "balanced", env_cfg.value("balancing_weight", 0.0)));
    if (m->params.scalar_count() != params.scalar_count())
      throw IntegrityError(path + ": checkpoint shape mismatch");
    m->params = std::move(params);
    m->init = std::move(init);
    env = m;
  } else if (kind == "css") {
    auto m = std::make_shared<CssModel>(CssModel::make(
        schema, env_cfg.at("states").get<int>(),
        AttentionSpec::from_json(env_cfg.at("attention")),
        inner(env_cfg.at("emission_dims").get<std::vector<int>>()),
        env_cfg.at("encoder_hidden").get<int>(), params.seed));
    if (m->params.scalar_count() != params.scalar_count())
      throw IntegrityError(path + ": checkpoint shape mismatch");
    m->params = std::move(params);
    m->init = std::move(init);
    env = m;
  } else if (kind == "svae") {
    auto m = std::make_shared<SvaeModel>(SvaeModel::make(
        schema, env_cfg.at("latent").get<int>(),
        inner(env_cfg.at("trans_dims").get<std::vector<int>>()),
        env_cfg.at("encoder_hidden").get<int>(), params.seed));
    if (m->params.scalar_count() != params.scalar_count())
      throw IntegrityError(path + ": checkpoint shape mismatch");
    m->params = std::move(params);
    m->init = std::move(init);
    env = m;
  } else {
    throw IntegrityError(path + ": unknown checkpoint kind " + kind);
  }
  return env;
}

}  // namespace dmkit
