#include "dmkit/policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "dmkit/digest.hpp"
#include "dmkit/errors.hpp"

namespace dmkit {

using nlohmann::json;

// ---- masks ----

Mask Mask::all(const DomainSchema& s) {
  Mask m;
  for (int i = 0; i < s.temporal_space.dim(); ++i) m.temporal_idx.push_back(i);
  for (int i = 0; i < s.static_space.dim(); ++i) m.static_idx.push_back(i);
  return m;
}

Mask Mask::from_names(const DomainSchema& s,
                      const std::vector<std::string>& temporal,
                      const std::vector<std::string>& statics) {
  Mask m;
  for (const auto& n : temporal) {
    int i = s.temporal_space.index_of(n);
    if (i < 0) throw ConfigError("unknown temporal feature in mask: " + n);
    m.temporal_idx.push_back(i);
  }
  for (const auto& n : statics) {
    int i = s.static_space.index_of(n);
    if (i < 0) throw ConfigError("unknown static feature in mask: " + n);
    m.static_idx.push_back(i);
  }
  std::sort(m.temporal_idx.begin(), m.temporal_idx.end());
  std::sort(m.static_idx.begin(), m.static_idx.end());
  m.validate(s);
  return m;
}

void Mask::validate(const DomainSchema& s) const {
  if (temporal_idx.empty()) throw ConfigError("mask keeps no temporal features");
  std::set<int> uniq(temporal_idx.begin(), temporal_idx.end());
  if (uniq.size() != temporal_idx.size())
    throw ConfigError("duplicate temporal feature in mask");
  for (int i : temporal_idx)
    if (i < 0 || i >= s.temporal_space.dim())
      throw ConfigError("temporal mask index out of range");
  std::set<int> us(static_idx.begin(), static_idx.end());
  if (us.size() != static_idx.size())
    throw ConfigError("duplicate static feature in mask");
  for (int i : static_idx)
    if (i < 0 || i >= s.static_space.dim())
      throw ConfigError("static mask index out of range");
}

std::vector<std::string> Mask::temporal_names(const DomainSchema& s) const {
  std::vector<std::string> out;
  for (int i : temporal_idx) out.push_back(s.temporal_space.names[size_t(i)]);
  return out;
}

std::vector<std::string> Mask::static_names(const DomainSchema& s) const {
  std::vector<std::string> out;
  for (int i : static_idx) out.push_back(s.static_space.names[size_t(i)]);
  return out;
}

double Mask::rationality(const DomainSchema& s) const {
  return double(temporal_idx.size()) / double(s.temporal_space.dim());
}

// ---- windowing and masking ----

PolicyHistory window_history(const PolicyHistory& h, int lag) {
  if (lag < 0) throw ConfigError("lag must be >= 1 (0 means full)");
  if (lag == 0) return h;
  PolicyHistory w;
  w.static_features = h.static_features;
  int t = h.t();
  int keep_obs = std::min(lag, t);
  int keep_act = std::min(lag, int(h.actions.size()));
  w.observations.assign(h.observations.end() - keep_obs, h.observations.end());
  w.actions.assign(h.actions.end() - keep_act, h.actions.end());
  return w;
}

ComponentView apply_mask(const PolicyHistory& windowed, const Mask& mask,
                         const DomainSchema& s, int lag) {
  mask.validate(s);
  ComponentView v;
  v.n_actions = s.action_space.cardinality;
  v.lag = lag;

  v.static_masked = Vec(mask.static_idx.size());
  for (size_t i = 0; i < mask.static_idx.size(); ++i)
    v.static_masked[int(i)] = windowed.static_features[mask.static_idx[i]];

  int k = int(windowed.observations.size());
  int m = int(windowed.actions.size());
  for (int i = 0; i < k; ++i) {
    const Vec& x = windowed.observations[size_t(i)];
    Vec xm(mask.temporal_idx.size());
    for (size_t j = 0; j < mask.temporal_idx.size(); ++j)
      xm[int(j)] = x[mask.temporal_idx[j]];
    v.obs.push_back(std::move(xm));
    // action preceding this observation, when inside the window
    int pos = i - 1 + (m - (k - 1));
    v.prev_acts.push_back(pos >= 0 && pos < m ? windowed.actions[size_t(pos)]
                                              : -1);
  }
  return v;
}

// ---- deciders ----

namespace {

Vec tree_scores(const TreeDecider& d, const ComponentView& v) {
  Vec f(v.static_masked.size() + v.obs.back().size());
  f.head(v.static_masked.size()) = v.static_masked;
  f.tail(v.obs.back().size()) = v.obs.back();

  if (d.splits.empty()) return d.leaves.at(0);
  int node = 0;
  while (true) {
    const TreeSplit& sp = d.splits[size_t(node)];
    int child = f[sp.feature] <= sp.threshold ? sp.left : sp.right;
    if (child < 0) return d.leaves.at(size_t(-child - 1));
    node = child;
  }
}

Vec linear_input(const ComponentView& v) {
  if (v.lag < 1)
    throw ConfigError("linear decider requires a finite lag");
  int dm = int(v.obs.back().size());
  int y = v.n_actions;
  Vec in = Vec::Zero(v.static_masked.size() + v.lag * (dm + y));
  in.head(v.static_masked.size()) = v.static_masked;

  // oldest-first slots, front-padded with zeros when the episode is young
  int k = int(v.obs.size());
  int base = int(v.static_masked.size());
  for (int i = 0; i < k; ++i) {
    int slot = v.lag - k + i;
    in.segment(base + slot * dm, dm) = v.obs[size_t(i)];
  }
  int abase = base + v.lag * dm;
  for (int i = 0; i < k; ++i) {
    int slot = v.lag - k + i;
    int a = v.prev_acts[size_t(i)];
    if (a >= 0) in[abase + slot * y + a] = 1.0;
  }
  return in;
}

Vec recurrent_scores(const RecurrentDecider& d, const ComponentView& v) {
  ad::Tape tape;
  ModelCtx ctx(tape, d.params);
  ad::Var h = d.gru.h0(ctx);
  int dm = int(v.obs.back().size());
  for (size_t i = 0; i < v.obs.size(); ++i) {
    Vec u = Vec::Zero(dm + v.n_actions);
    u.head(dm) = v.obs[i];
    if (v.prev_acts[i] >= 0) u[dm + v.prev_acts[i]] = 1.0;
    h = d.gru.step(ctx, ctx.c(u), h);
  }
  ad::Var out = matmul(ctx.p("out.W"), h) + ctx.p("out.b");
  return out.val().col(0);
}

}  // namespace

Vec BaseDecider::scores(const ComponentView& v) const {
  switch (kind) {
    case Kind::Tree:
      return tree_scores(tree, v);
    case Kind::Linear:
      return linear.W * linear_input(v) + linear.b;
    case Kind::Recurrent:
      return recurrent_scores(recurrent, v);
  }
  throw ConfigError("unknown decider kind");
}

// ---- distributions ----

namespace {

Vec boltzmann(const Vec& q, double beta) {
  Vec s = beta * q;
  double m = s.maxCoeff();
  Vec e = (s.array() - m).exp();
  return e / e.sum();
}

}  // namespace

Vec component_distribution(const PolicyComponent& c, const DomainSchema& s,
                           const PolicyHistory& h) {
  if (c.beta < 0.0) throw ConfigError("beta must be >= 0");
  PolicyHistory w = window_history(h, c.lag);
  ComponentView v = apply_mask(w, c.mask, s, c.lag);
  Vec q = c.decider.scores(v);
  if (int(q.size()) != s.action_space.cardinality)
    throw DimensionError("decider produced scores of wrong arity");
  return boltzmann(q, c.beta);
}

void PolicySpec::validate(const DomainSchema& s) const {
  if (components.empty()) throw ConfigError("policy needs >= 1 component");
  if (int(weights.size()) != int(components.size()))
    throw ConfigError("weights length mismatch");
  double total = 0.0;
  for (int i = 0; i < weights.size(); ++i) {
    if (!(weights[i] > 0.0))
      throw ConfigError("mixture weights must be strictly positive");
    total += weights[i];
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw ConfigError("mixture weights must sum to 1");
  for (const auto& c : components) {
    c.mask.validate(s);
    if (c.lag < 0) throw ConfigError("lag must be >= 1 or full");
    if (c.lag == 0 && c.decider.kind == BaseDecider::Kind::Linear)
      throw ConfigError("linear decider requires a finite lag");
    if (c.decider.kind == BaseDecider::Kind::Tree) {
      if (c.decider.tree.leaves.empty())
        throw ConfigError("tree decider needs leaves");
      if (c.decider.tree.leaves.size() > 32)
        throw ConfigError("tree deciders support at most 32 leaves");
      int fdim = int(c.mask.static_idx.size() + c.mask.temporal_idx.size());
      for (const auto& sp : c.decider.tree.splits)
        if (sp.feature < 0 || sp.feature >= fdim)
          throw ConfigError("tree split references a non-visible feature");
    }
  }
}

Vec policy_distribution(const PolicySpec& p, const DomainSchema& s,
                        const PolicyHistory& h) {
  p.validate(s);
  Vec out = Vec::Zero(s.action_space.cardinality);
  for (size_t i = 0; i < p.components.size(); ++i)
    out += p.weights[int(i)] * component_distribution(p.components[i], s, h);
  return out;
}

int sample_action(const PolicySpec& p, const DomainSchema& s,
                  const PolicyHistory& h, RngStream& rng,
                  int committee_component) {
  Vec d = committee_component >= 0
              ? component_distribution(p.components.at(size_t(committee_component)), s, h)
              : policy_distribution(p, s, h);
  return rng.categorical(std::span<const double>(d.data(), size_t(d.size())));
}

// ---- markovianity probe ----

namespace {

Vec random_obs(const FeatureSpace& f, RngStream& rng) {
  Vec x(f.dim());
  for (int i = 0; i < f.dim(); ++i)
    x[i] = f.is_binary(i) ? (rng.bernoulli(0.5) ? 1.0 : 0.0) : rng.normal();
  return x;
}

double total_variation(const Vec& a, const Vec& b) {
  return 0.5 * (a - b).cwiseAbs().sum();
}

}  // namespace

MarkovianityResult measure_markovianity(const PolicySpec& p,
                                        const DomainSchema& s, int budget,
                                        int n_probes, uint64_t seed) {
  p.validate(s);
  RngStream root(seed);
  constexpr double kTvTol = 1e-9;

  for (int L = 1; L <= budget; ++L) {
    bool clean = true;
    RngStream lr = root.child(uint64_t(L));
    for (int probe = 0; probe < n_probes && clean; ++probe) {
      RngStream pr = lr.child(uint64_t(probe));
      int t = L + 2 + int(pr.uniform_int(0, 2));
      PolicyHistory h;
      h.static_features = random_obs(s.static_space, pr);
      for (int i = 0; i < t; ++i)
        h.observations.push_back(random_obs(s.temporal_space, pr));
      for (int i = 0; i < t - 1; ++i)
        h.actions.push_back(int(pr.uniform_int(0, s.action_space.cardinality - 1)));

      Vec base = policy_distribution(p, s, h);
      for (int rep = 0; rep < 3 && clean; ++rep) {
        PolicyHistory hp = h;
        // rewrite everything strictly older than the L-window
        for (int i = 0; i < t - L; ++i)
          hp.observations[size_t(i)] = random_obs(s.temporal_space, pr);
        for (int i = 0; i < t - 1 - L; ++i)
          hp.actions[size_t(i)] =
              int(pr.uniform_int(0, s.action_space.cardinality - 1));
        if (total_variation(base, policy_distribution(p, s, hp)) > kTvTol)
          clean = false;
      }
    }
    if (clean) return {L, true};
  }
  return {budget, false};
}

// ---- serialization ----

namespace {

json mat_json(const Mat& m) {
  json rows = json::array();
  for (int r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

Mat mat_from(const json& rows) {
  int r = int(rows.size());
  int c = r > 0 ? int(rows[0].size()) : 0;
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int k = 0; k < c; ++k) m(i, k) = rows[i][k].get<double>();
  return m;
}

json vec_json(const Vec& v) {
  json a = json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

Vec vec_from(const json& a) {
  Vec v(a.size());
  for (size_t i = 0; i < a.size(); ++i) v[int(i)] = a[i].get<double>();
  return v;
}

json decider_json(const BaseDecider& d) {
  switch (d.kind) {
    case BaseDecider::Kind::Tree: {
      json splits = json::array();
      for (const auto& sp : d.tree.splits)
        splits.push_back({{"feature", sp.feature},
                          {"threshold", sp.threshold},
                          {"left", sp.left},
                          {"right", sp.right}});
      json leaves = json::array();
      for (const auto& l : d.tree.leaves) leaves.push_back(vec_json(l));
      return {{"kind", "tree"}, {"splits", splits}, {"leaves", leaves}};
    }
    case BaseDecider::Kind::Linear:
      return {{"kind", "linear"},
              {"W", mat_json(d.linear.W)},
              {"b", vec_json(d.linear.b)}};
    case BaseDecider::Kind::Recurrent: {
      json tensors = json::object();
      for (const auto& [name, m] : d.recurrent.params.tensors)
        tensors[name] = mat_json(m);
      return {{"kind", "recurrent"},
              {"hidden", d.recurrent.gru.hidden},
              {"input", d.recurrent.gru.input},
              {"seed", d.recurrent.params.seed},
              {"tensors", tensors}};
    }
  }
  throw ConfigError("unknown decider kind");
}

RecurrentDecider make_recurrent(int masked_dim, int n_actions, int hidden,
                                uint64_t seed) {
  RecurrentDecider d;
  d.gru.prefix = "gru";
  d.gru.input = masked_dim + n_actions;
  d.gru.hidden = hidden;
  d.params.seed = seed;
  d.gru.init(d.params);
  d.params.add_init("out.W", n_actions, hidden, hidden);
  d.params.add_zeros("out.b", n_actions, 1);
  return d;
}

BaseDecider decider_from_json(const json& j, const DomainSchema& s,
                              const Mask& mask, int lag) {
  BaseDecider d;
  std::string kind = j.at("kind").get<std::string>();
  int Y = s.action_space.cardinality;
  int masked_dim = int(mask.temporal_idx.size());
  if (kind == "tree") {
    d.kind = BaseDecider::Kind::Tree;
    if (j.contains("splits")) {
      for (const auto& sp : j.at("splits")) {
        TreeSplit t;
        if (sp.at("feature").is_string()) {
          // resolve a feature name against the masked input layout
          std::string name = sp.at("feature").get<std::string>();
          int idx = -1;
          auto sn = mask.static_names(s);
          auto tn = mask.temporal_names(s);
          for (size_t i = 0; i < sn.size(); ++i)
            if (sn[i] == name) idx = int(i);
          for (size_t i = 0; i < tn.size(); ++i)
            if (tn[i] == name) idx = int(sn.size() + i);
          if (idx < 0)
            throw ConfigError("tree split feature not visible under mask: " + name);
          t.feature = idx;
        } else {
          t.feature = sp.at("feature").get<int>();
        }
        t.threshold = sp.at("threshold").get<double>();
        t.left = sp.at("left").get<int>();
        t.right = sp.at("right").get<int>();
        d.tree.splits.push_back(t);
      }
    }
    for (const auto& l : j.at("leaves")) d.tree.leaves.push_back(vec_from(l));
    for (const auto& l : d.tree.leaves)
      if (int(l.size()) != Y) throw ConfigError("tree leaf arity mismatch");
  } else if (kind == "linear") {
    d.kind = BaseDecider::Kind::Linear;
    if (j.contains("W")) {
      d.linear.W = mat_from(j.at("W"));
      d.linear.b = vec_from(j.at("b"));
    } else {
      int in = int(mask.static_idx.size()) + lag * (masked_dim + Y);
      uint64_t seed = j.value("init_seed", uint64_t(0));
      RngStream rng = RngStream(seed).child("linear");
      double sc = 1.0 / std::sqrt(double(std::max(in, 1)));
      d.linear.W = Mat(Y, in);
      for (int r = 0; r < Y; ++r)
        for (int c = 0; c < in; ++c)
          d.linear.W(r, c) = (2.0 * rng.uniform() - 1.0) * sc;
      d.linear.b = Vec::Zero(Y);
    }
    int expected = int(mask.static_idx.size()) + lag * (masked_dim + Y);
    if (lag >= 1 && (int(d.linear.W.cols()) != expected ||
                     int(d.linear.W.rows()) != Y))
      throw ConfigError("linear decider shape mismatch");
  } else if (kind == "recurrent") {
    d.kind = BaseDecider::Kind::Recurrent;
    int hidden = j.at("hidden").get<int>();
    uint64_t seed = j.value("seed", j.value("init_seed", uint64_t(0)));
    d.recurrent = make_recurrent(masked_dim, Y, hidden, seed);
    if (j.contains("tensors")) {
      for (const auto& [name, m] : j.at("tensors").items())
        d.recurrent.params.tensors[name] = mat_from(m);
    }
  } else {
    throw ConfigError("unknown decider kind: " + kind);
  }
  return d;
}

json skeleton_json(const PolicySpec& p, const DomainSchema& s) {
  json comps = json::array();
  for (const auto& c : p.components) {
    json d;
    switch (c.decider.kind) {
      case BaseDecider::Kind::Tree:
        d = {{"kind", "tree"},
             {"splits", c.decider.tree.splits.size()},
             {"leaves", c.decider.tree.leaves.size()}};
        break;
      case BaseDecider::Kind::Linear:
        d = {{"kind", "linear"},
             {"rows", c.decider.linear.W.rows()},
             {"cols", c.decider.linear.W.cols()}};
        break;
      case BaseDecider::Kind::Recurrent:
        d = {{"kind", "recurrent"}, {"hidden", c.decider.recurrent.gru.hidden}};
        break;
    }
    comps.push_back({{"decider", d},
                     {"lag", c.lag},
                     {"mask_temporal", c.mask.temporal_names(s)},
                     {"mask_static", c.mask.static_names(s)}});
  }
  return {{"actions", s.action_space.cardinality},
          {"committee", p.committee},
          {"components", comps}};
}

}  // namespace

json policy_to_json(const PolicySpec& p, const DomainSchema& s) {
  json comps = json::array();
  for (const auto& c : p.components) {
    comps.push_back({{"beta", c.beta},
                     {"lag", c.lag == 0 ? json("full") : json(c.lag)},
                     {"mask_temporal", c.mask.temporal_names(s)},
                     {"mask_static", c.mask.static_names(s)},
                     {"decider", decider_json(c.decider)}});
  }
  return {{"committee", p.committee},
          {"weights", vec_json(p.weights)},
          {"components", comps}};
}

PolicySpec policy_from_json(const json& j, const DomainSchema& s) {
  PolicySpec p;
  p.committee = j.value("committee", false);
  p.weights = vec_from(j.at("weights"));
  double total = p.weights.sum();
  if (total <= 0.0) throw ConfigError("mixture weights must be positive");
  p.weights /= total;

  for (const auto& cj : j.at("components")) {
    PolicyComponent c;
    c.beta = cj.at("beta").get<double>();
    if (c.beta < 0.0) throw ConfigError("beta must be >= 0");
    const auto& lag = cj.at("lag");
    c.lag = lag.is_string() ? 0 : lag.get<int>();
    if (!lag.is_string() && c.lag < 1)
      throw ConfigError("lag must be >= 1 or \"full\"");

    auto names_or_all = [](const json& v, const FeatureSpace& space) {
      if (v.is_string()) {
        if (v.get<std::string>() != "all")
          throw ConfigError("mask must be a name list or \"all\"");
        return space.names;
      }
      return v.get<std::vector<std::string>>();
    };
    std::vector<std::string> tnames =
        cj.contains("mask_temporal")
            ? names_or_all(cj.at("mask_temporal"), s.temporal_space)
            : s.temporal_space.names;
    std::vector<std::string> snames =
        cj.contains("mask_static")
            ? names_or_all(cj.at("mask_static"), s.static_space)
            : s.static_space.names;
    c.mask = Mask::from_names(s, tnames, snames);
    c.decider = decider_from_json(cj.at("decider"), s, c.mask, c.lag);
    p.components.push_back(std::move(c));
  }
  p.validate(s);
  return p;
}

GroundTruth export_ground_truth(const PolicySpec& p, const DomainSchema& s) {
  GroundTruth g;
  g.theta = policy_to_json(p, s);
  g.digest = digest_json(skeleton_json(p, s));
  return g;
}

PolicySpec load_ground_truth(const GroundTruth& g, const DomainSchema& s) {
  PolicySpec p = policy_from_json(g.theta, s);
  std::string expect = digest_json(skeleton_json(p, s));
  if (expect != g.digest)
    throw IntegrityError("ground-truth skeleton digest mismatch");
  return p;
}

void save_ground_truth(const GroundTruth& g, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open for writing: " + path);
  out << json{{"theta", g.theta}, {"digest", g.digest}}.dump() << "\n";
}

GroundTruth read_ground_truth(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  GroundTruth g;
  g.theta = j.at("theta");
  g.digest = j.at("digest").get<std::string>();
  return g;
}

}  // namespace dmkit
