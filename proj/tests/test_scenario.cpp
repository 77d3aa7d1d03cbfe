#include <cmath>
#include <fstream>
#include <sstream>

#include "dmkit/builtin.hpp"
#include "dmkit/digest.hpp"
#include "dmkit/errors.hpp"
#include "dmkit/scenario.hpp"
#include "doctest.h"

using namespace dmkit;

namespace {

DomainSchema tiny_schema(int Y = 2) {
  DomainSchema s;
  s.name = "tiny";
  s.static_space = {1, 1, {"s0", "s1"}};
  s.temporal_space = {2, 1, {"f0", "f1", "f2"}};
  s.action_space = {Y};
  s.max_length = 12;
  s.validate();
  return s;
}

Scenario tiny_scenario(const std::string& env_kind, uint64_t seed,
                       std::vector<std::string> confounding = {}) {
  Scenario s;
  s.domain = tiny_schema();
  s.env = seeded_env(env_kind, s.domain, 3,
                     {{"hidden", 4}, {"states", 2}, {"latent", 2}});
  s.policy = demo_mixture_policy(s.domain, 4);
  s.confounding = std::move(confounding);
  s.horizon = 8;
  s.min_len = 3;
  s.seed = seed;
  return s;
}

}  // namespace

TEST_SUITE_BEGIN("scenario");

TEST_CASE("n = 0 yields an empty but valid dataset") {
  Scenario s = tiny_scenario("css", 1);
  BatchDataset d = generate_batch(s, 0);
  CHECK(d.size() == 0);
  CHECK(d.seed == 1);
  CHECK(d.provenance == s.digest());
  CHECK(validate_dataset(d).empty());
}

TEST_CASE("same scenario and seed give identical datasets; different seeds differ") {
  for (const char* kind : {"tforce", "balanced", "css", "svae"}) {
    Scenario s = tiny_scenario(kind, 42);
    BatchDataset a = generate_batch(s, 6);
    BatchDataset b = generate_batch(s, 6);
    CHECK(a == b);

    Scenario s2 = tiny_scenario(kind, 43);
    BatchDataset c = generate_batch(s2, 6);
    CHECK_FALSE(a.trajectories[0] == c.trajectories[0]);
  }
}

TEST_CASE("parallel generation is invariant in the worker count") {
  Scenario s = tiny_scenario("css", 7);
  BatchDataset serial = generate_batch(s, 12, 1);
  BatchDataset parallel = generate_batch(s, 12, 4);
  CHECK(serial == parallel);
}

TEST_CASE("lengths stay inside [min_len, horizon] and actions inside Y") {
  Scenario s = tiny_scenario("css", 9);
  BatchDataset d = generate_batch(s, 40);
  CHECK(validate_dataset(d).empty());
  bool saw_min = false, saw_max = false;
  for (const auto& t : d.trajectories) {
    CHECK(t.length() >= s.min_len);
    CHECK(t.length() <= s.horizon);
    saw_min |= t.length() == s.min_len;
    saw_max |= t.length() == s.horizon;
  }
  CHECK(saw_min);
  CHECK(saw_max);
}

TEST_CASE("beta = 0 policy produces a uniform action histogram (4 sigma)") {
  Scenario s = tiny_scenario("css", 11);
  s.domain = tiny_schema(4);
  s.env = seeded_env("css", s.domain, 3, {{"states", 2}});
  s.policy = uniform_policy(s.domain);
  s.horizon = 10;
  s.min_len = 10;
  BatchDataset d = generate_batch(s, 4000);
  std::vector<int> counts(4, 0);
  size_t n = 0;
  for (const auto& t : d.trajectories)
    for (int a : t.actions) {
      ++counts[size_t(a)];
      ++n;
    }
  for (int a = 0; a < 4; ++a) {
    double freq = double(counts[size_t(a)]) / double(n);
    double sd = std::sqrt(0.25 * 0.75 / double(n));
    CHECK(std::abs(freq - 0.25) < 4 * sd);
  }
}

TEST_CASE("disentanglement: swapping the policy leaves step distributions alone") {
  Scenario a = tiny_scenario("css", 13);
  Scenario b = a;
  b.policy = uniform_policy(b.domain);

  // histories realised under policy a, environment queries under both
  BatchDataset d = generate_batch(a, 5);
  for (const auto& traj : d.trajectories) {
    History h;
    h.observations.assign(traj.observations.begin(),
                          traj.observations.end() - 1);
    h.actions.assign(traj.actions.begin(), traj.actions.end() - 1);
    if (h.observations.empty()) continue;
    StepDistribution da = a.env->step_distribution(h, traj.static_features);
    StepDistribution db = b.env->step_distribution(h, traj.static_features);
    REQUIRE(da.params.size() == db.params.size());
    for (size_t i = 0; i < da.params.size(); ++i) {
      CHECK(da.weights[i] == db.weights[i]);
      CHECK(da.params[i] == db.params[i]);
    }
  }

  // and the same environment draws: identical env substreams
  BatchDataset full_a = generate_batch(a, 3);
  Scenario a_swapped = a;
  a_swapped.policy = demo_mixture_policy(a.domain, 999);  // different policy
  BatchDataset full_b = generate_batch(a_swapped, 3);
  // first observations agree because env streams are separate from policy
  for (int i = 0; i < 3; ++i) {
    CHECK(full_a.trajectories[size_t(i)].observations[0] ==
          full_b.trajectories[size_t(i)].observations[0]);
    CHECK(full_a.trajectories[size_t(i)].static_features ==
          full_b.trajectories[size_t(i)].static_features);
  }
}

TEST_CASE("hide_confounders") {
  Scenario s = tiny_scenario("css", 17);
  BatchDataset full = generate_batch(s, 10);

  SUBCASE("empty set changes nothing, measure 1.0") {
    auto [d, measure] = hide_confounders(full, {});
    CHECK(measure == 1.0);
    CHECK(d == full);
  }

  SUBCASE("hiding 1 of 3 gives measure 2/3 and drops the column") {
    auto [d, measure] = hide_confounders(full, {"f1"});
    CHECK(measure == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(d.hidden_columns == std::vector<std::string>{"f1"});
    for (size_t i = 0; i < d.trajectories.size(); ++i)
      for (size_t k = 0; k < d.trajectories[i].observations.size(); ++k) {
        const Vec& vis = d.trajectories[i].observations[k];
        const Vec& raw = full.trajectories[i].observations[k];
        REQUIRE(vis.size() == 2);
        CHECK(vis[0] == raw[0]);
        CHECK(vis[1] == raw[2]);
      }
    CHECK(validate_dataset(d).empty());
  }

  SUBCASE("unknown names and double hiding are config errors") {
    CHECK_THROWS_AS(hide_confounders(full, {"zzz"}), ConfigError);
    auto [d, measure] = hide_confounders(full, {"f1"});
    CHECK_THROWS_AS(hide_confounders(d, {"f1"}), ConfigError);
  }
}

TEST_CASE("ward measure arithmetic: hiding 5 of 35") {
  Scenario s;
  s.domain = ward_synth_schema();
  s.env = std::make_shared<CssModel>(ward_truth_css());
  s.policy = uniform_policy(s.domain);
  s.horizon = 6;
  s.min_len = 3;
  s.seed = 23;
  BatchDataset d = generate_batch(s, 3);
  std::vector<std::string> hide(s.domain.temporal_space.names.begin(),
                                s.domain.temporal_space.names.begin() + 5);
  auto [_, measure] = hide_confounders(d, hide);
  CHECK(measure == doctest::Approx(30.0 / 35.0).epsilon(1e-12));
}

TEST_CASE("projection during generation equals projection after generation") {
  for (const char* kind : {"tforce", "css", "svae"}) {
    Scenario with = tiny_scenario(kind, 29, {"f0"});
    Scenario without = tiny_scenario(kind, 29);

    BatchDataset projected = generate_batch(with, 8);
    BatchDataset full = generate_batch(without, 8);
    auto [post, measure] = hide_confounders(full, {"f0"});

    REQUIRE(projected.size() == post.size());
    for (size_t i = 0; i < projected.size(); ++i) {
      CHECK(projected.trajectories[i].actions == post.trajectories[i].actions);
      CHECK(projected.trajectories[i].observations ==
            post.trajectories[i].observations);
    }
    CHECK(projected.hidden_columns == post.hidden_columns);
    CHECK(measure == doctest::Approx(2.0 / 3.0));
  }
}

TEST_CASE("live sessions replay batch trajectories bit for bit") {
  for (const char* kind : {"tforce", "balanced", "css", "svae"}) {
    Scenario s = tiny_scenario(kind, 31);
    BatchDataset batch = generate_batch(s, 3);

    for (uint64_t idx = 0; idx < 3; ++idx) {
      const Trajectory& want = batch.trajectories[size_t(idx)];
      LiveSession live(s, idx);
      auto r = live.reset();
      RngStream pol = live.policy_stream();

      CHECK(r.static_features == want.static_features);
      CHECK(r.observation == want.observations[0]);

      PolicyHistory h;
      h.static_features = r.static_features;
      h.observations.push_back(r.observation);

      std::vector<int> actions;
      std::vector<Vec> observations{r.observation};
      int committee = -1;
      if (s.policy.committee)
        committee = int(pol.categorical(std::span<const double>(
            s.policy.weights.data(), size_t(s.policy.weights.size()))));
      actions.push_back(sample_action(s.policy, s.domain, h, pol, committee));

      bool done = r.done;
      while (!done) {
        auto step = live.step(actions.back());
        done = step.done;
        observations.push_back(step.observation);
        h.observations.push_back(step.observation);
        h.actions.push_back(actions.back());
        actions.push_back(sample_action(s.policy, s.domain, h, pol, committee));
      }

      CHECK(int(observations.size()) == want.length());
      for (int t = 0; t < want.length(); ++t)
        CHECK(observations[size_t(t)] == want.observations[size_t(t)]);
      CHECK(actions == want.actions);
      CHECK_THROWS_AS(live.step(0), SessionError);
    }
  }
}

TEST_CASE("live observations are projected; resets are reproducible") {
  Scenario s = tiny_scenario("css", 37, {"f2"});
  LiveSession a(s, 0), b(s, 0);
  auto ra = a.reset();
  auto rb = b.reset();
  CHECK(ra.observation == rb.observation);
  CHECK(ra.observation.size() == 2);  // f2 hidden
}

TEST_CASE("horizon-length episodes finish exactly at the horizon") {
  Scenario s = tiny_scenario("css", 41);
  s.min_len = s.horizon;  // force full-length episodes
  LiveSession live(s, 0);
  auto r = live.reset();
  CHECK_FALSE(r.done);
  int steps = 1;
  bool done = false;
  while (!done) {
    done = live.step(0).done;
    ++steps;
  }
  CHECK(steps == s.horizon);
}

TEST_CASE("committee mode draws one component per trajectory") {
  DomainSchema schema = tiny_schema(2);

  // two near-deterministic components disagreeing on the action
  PolicySpec p;
  for (int k = 0; k < 2; ++k) {
    PolicyComponent c;
    c.beta = 1e6;
    c.lag = 1;
    c.mask = Mask::all(schema);
    c.decider.kind = BaseDecider::Kind::Tree;
    Vec q = Vec::Zero(2);
    q[k] = 1.0;
    c.decider.tree.leaves = {q};
    p.components.push_back(std::move(c));
  }
  p.weights = Vec(2);
  p.weights << 0.5, 0.5;

  Scenario s;
  s.domain = schema;
  s.env = seeded_env("css", schema, 3, {{"states", 2}});
  s.policy = p;
  s.horizon = 8;
  s.min_len = 8;
  s.seed = 71;

  // per-step mixture: actions interleave within most trajectories
  BatchDataset mixed = generate_batch(s, 20);
  int interleaved = 0;
  for (const auto& t : mixed.trajectories) {
    bool all_same = true;
    for (int a : t.actions) all_same &= a == t.actions[0];
    interleaved += !all_same;
  }
  CHECK(interleaved > 10);

  // committee: one clinician per trajectory, so actions are constant
  s.policy.committee = true;
  BatchDataset committee = generate_batch(s, 20);
  int constant = 0, first_counts[2] = {0, 0};
  for (const auto& t : committee.trajectories) {
    bool all_same = true;
    for (int a : t.actions) all_same &= a == t.actions[0];
    constant += all_same;
    ++first_counts[t.actions[0]];
  }
  CHECK(constant == 20);
  CHECK(first_counts[0] > 0);  // both components appear
  CHECK(first_counts[1] > 0);

  // and the run stays deterministic
  CHECK(generate_batch(s, 20) == committee);
}

TEST_CASE("scenario validation reports mismatches before sampling") {
  Scenario s = tiny_scenario("css", 43);
  s.domain.temporal_space.names[0] = "renamed";
  s.policy = uniform_policy(s.domain);
  s.confounding = {"f0"};  // no longer exists
  CHECK_THROWS_AS(generate_batch(s, 1), ConfigError);

  Scenario s2 = tiny_scenario("css", 44);
  s2.env = seeded_env("css", tiny_schema(4), 1, {{"states", 2}});
  CHECK_THROWS_AS(generate_batch(s2, 1), DimensionError);
}

TEST_CASE("provenance digest canonicalises the config") {
  Scenario s = tiny_scenario("css", 47);
  std::string d1 = s.digest();
  CHECK(d1.size() == 64);
  CHECK(d1 == s.digest());
  Scenario s2 = tiny_scenario("css", 48);
  CHECK(d1 != s2.digest());
}

TEST_SUITE_END();
