#include "dmkit/scenario.hpp"

#include <algorithm>
#include <future>

#include "dmkit/digest.hpp"
#include "dmkit/errors.hpp"

namespace dmkit {

void Scenario::validate() const {
  domain.validate();
  if (!env) throw ConfigError("scenario has no environment");
  const DomainSchema& es = env->schema();
  if (es.temporal_space.dim() != domain.temporal_space.dim() ||
      es.static_space.dim() != domain.static_space.dim() ||
      es.action_space.cardinality != domain.action_space.cardinality)
    throw DimensionError("environment dimensions do not match the domain");
  policy.validate(domain);
  if (horizon < 1 || horizon > domain.max_length)
    throw ConfigError("horizon must be in [1, max_length]");
  if (min_len < 1 || min_len > horizon)
    throw ConfigError("min_len must be in [1, horizon]");
  for (const auto& name : confounding)
    if (domain.temporal_space.index_of(name) < 0)
      throw ConfigError("unknown temporal feature in confounding set: " + name);
}

std::vector<int> Scenario::hidden_indices() const {
  std::vector<int> idx;
  for (const auto& name : confounding)
    idx.push_back(domain.temporal_space.index_of(name));
  std::sort(idx.begin(), idx.end());
  return idx;
}

nlohmann::json Scenario::config_json() const {
  return {{"domain", domain},
          {"environment", env->config_json()},
          {"policy", policy_to_json(policy, domain)},
          {"confounding", confounding},
          {"horizon", horizon},
          {"min_len", min_len},
          {"seed", seed}};
}

std::string Scenario::digest() const { return digest_json(config_json()); }

namespace {

Vec drop_columns(const Vec& x, const std::vector<int>& hidden_sorted) {
  if (hidden_sorted.empty()) return x;
  Vec out(x.size() - Eigen::Index(hidden_sorted.size()));
  int k = 0;
  size_t h = 0;
  for (int i = 0; i < x.size(); ++i) {
    if (h < hidden_sorted.size() && hidden_sorted[h] == i) {
      ++h;
      continue;
    }
    out[k++] = x[i];
  }
  return out;
}

}  // namespace

Trajectory sample_trajectory(const Scenario& s, uint64_t index) {
  RngStream traj_stream = RngStream(s.seed).child(index);
  RngStream env_rng = traj_stream.child("env");
  RngStream pol_rng = traj_stream.child("policy");
  RngStream len_rng = traj_stream.child("len");

  int T = int(len_rng.uniform_int(s.min_len, s.horizon));

  Trajectory traj;
  Vec x_s, x1;
  auto state = s.env->reset(env_rng, x_s, x1);
  traj.static_features = x_s;
  traj.observations.push_back(x1);

  int committee_component = -1;
  if (s.policy.committee)
    committee_component = int(pol_rng.categorical(std::span<const double>(
        s.policy.weights.data(), size_t(s.policy.weights.size()))));

  PolicyHistory h;
  h.static_features = x_s;
  h.observations = traj.observations;

  traj.actions.push_back(
      sample_action(s.policy, s.domain, h, pol_rng, committee_component));

  for (int t = 2; t <= T; ++t) {
    Vec x = s.env->step(*state, traj.actions.back(), env_rng);
    traj.observations.push_back(x);
    h.observations.push_back(x);
    h.actions.push_back(traj.actions.back());
    traj.actions.push_back(
        sample_action(s.policy, s.domain, h, pol_rng, committee_component));
  }
  return traj;
}

BatchDataset generate_batch(const Scenario& s, int n, int jobs) {
  if (n < 0) throw ConfigError("n must be >= 0");
  s.validate();

  BatchDataset d;
  d.schema = s.domain;
  d.seed = s.seed;
  d.provenance = s.digest();
  d.hidden_columns = s.confounding;
  d.trajectories.resize(size_t(n));

  auto worker = [&](int lo, int hi) {
    for (int i = lo; i < hi; ++i)
      d.trajectories[size_t(i)] = sample_trajectory(s, uint64_t(i));
  };

  jobs = std::max(1, jobs);
  if (jobs == 1 || n < 2) {
    worker(0, n);
  } else {
    int chunk = (n + jobs - 1) / jobs;
    std::vector<std::future<void>> futs;
    for (int lo = 0; lo < n; lo += chunk)
      futs.push_back(std::async(std::launch::async, worker, lo,
                                std::min(lo + chunk, n)));
    for (auto& f : futs) f.get();
  }

  auto hidden = s.hidden_indices();
  if (!hidden.empty()) {
    for (auto& traj : d.trajectories)
      for (auto& x : traj.observations) x = drop_columns(x, hidden);
  }
  return d;
}

std::pair<BatchDataset, double> hide_confounders(
    const BatchDataset& d, const std::vector<std::string>& hidden) {
  for (const auto& name : hidden) {
    if (d.schema.temporal_space.index_of(name) < 0)
      throw ConfigError("unknown temporal feature: " + name);
    if (std::find(d.hidden_columns.begin(), d.hidden_columns.end(), name) !=
        d.hidden_columns.end())
      throw ConfigError("feature already hidden: " + name);
  }

  BatchDataset out = d;
  out.hidden_columns.insert(out.hidden_columns.end(), hidden.begin(),
                            hidden.end());

  // indices of the newly hidden names within the currently visible layout
  FeatureSpace visible = d.visible_temporal_space();
  std::vector<int> idx;
  for (const auto& name : hidden) {
    int i = visible.index_of(name);
    if (i < 0) throw ConfigError("feature not visible: " + name);
    idx.push_back(i);
  }
  std::sort(idx.begin(), idx.end());

  for (auto& traj : out.trajectories)
    for (auto& x : traj.observations) x = drop_columns(x, idx);

  double measure = double(out.visible_temporal_dim()) /
                   double(d.schema.temporal_space.dim());
  return {std::move(out), measure};
}

// ---- live session ----

LiveSession::LiveSession(const Scenario& s, uint64_t trajectory_index)
    : scenario_(s), index_(trajectory_index), env_rng_(0) {
  s.validate();
}

Vec LiveSession::project(const Vec& x) const {
  return drop_columns(x, scenario_.hidden_indices());
}

RngStream LiveSession::policy_stream() const {
  return RngStream(scenario_.seed).child(index_).child("policy");
}

LiveSession::Reset LiveSession::reset() {
  RngStream traj_stream = RngStream(scenario_.seed).child(index_);
  env_rng_ = traj_stream.child("env");
  RngStream len_rng = traj_stream.child("len");
  episode_length_ =
      int(len_rng.uniform_int(scenario_.min_len, scenario_.horizon));

  Reset r;
  Vec x_s, x1;
  state_ = scenario_.env->reset(env_rng_, x_s, x1);
  t_ = 1;
  active_ = true;
  done_ = t_ >= episode_length_;
  r.static_features = x_s;
  r.observation = project(x1);
  r.done = done_;
  return r;
}

LiveSession::Step LiveSession::step(int action) {
  if (!active_) throw SessionError("step before reset");
  if (done_) throw SessionError("step after the episode finished");
  if (action < 0 || action >= scenario_.domain.action_space.cardinality)
    throw ConfigError("action outside the action space");

  Vec x = scenario_.env->step(*state_, action, env_rng_);
  t_ += 1;
  done_ = t_ >= episode_length_;
  return Step{project(x), done_};
}

}  // namespace dmkit
