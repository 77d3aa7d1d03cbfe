#include <cmath>
#include <fstream>

#include "dmkit/builtin.hpp"
#include "dmkit/errors.hpp"
#include "dmkit/policy.hpp"
#include "doctest.h"

using namespace dmkit;

namespace {

DomainSchema toy_schema(int Y = 2) {
  DomainSchema s;
  s.name = "toy";
  s.static_space = {1, 1, {"s0", "s1"}};
  s.temporal_space = {3, 1, {"f0", "f1", "f2", "f3"}};
  s.action_space = {Y};
  s.max_length = 16;
  s.validate();
  return s;
}

PolicyHistory random_history(const DomainSchema& s, int t, RngStream& rng) {
  PolicyHistory h;
  h.static_features = Vec(s.static_space.dim());
  for (int i = 0; i < s.static_space.dim(); ++i)
    h.static_features[i] = s.static_space.is_binary(i)
                               ? double(rng.bernoulli(0.5))
                               : rng.normal();
  for (int k = 0; k < t; ++k) {
    Vec x(s.temporal_space.dim());
    for (int i = 0; i < s.temporal_space.dim(); ++i)
      x[i] = s.temporal_space.is_binary(i) ? double(rng.bernoulli(0.5))
                                           : rng.normal();
    h.observations.push_back(x);
  }
  for (int k = 0; k + 1 < t; ++k)
    h.actions.push_back(int(rng.uniform_int(0, s.action_space.cardinality - 1)));
  return h;
}

PolicyComponent linear_component(const DomainSchema& s, int lag, double beta,
                                 uint64_t seed) {
  PolicyComponent c;
  c.beta = beta;
  c.lag = lag;
  c.mask = Mask::all(s);
  c.decider.kind = BaseDecider::Kind::Linear;
  int Y = s.action_space.cardinality;
  int in = s.static_space.dim() + lag * (s.temporal_space.dim() + Y);
  RngStream rng(seed);
  c.decider.linear.W = Mat(Y, in);
  for (int r = 0; r < Y; ++r)
    for (int k = 0; k < in; ++k)
      c.decider.linear.W(r, k) = rng.normal() * 0.7;
  c.decider.linear.b = Vec::Zero(Y);
  return c;
}

PolicySpec random_spec(const DomainSchema& s, RngStream& rng) {
  PolicySpec p;
  int n = int(rng.uniform_int(1, 3));
  int Y = s.action_space.cardinality;
  for (int i = 0; i < n; ++i) {
    PolicyComponent c;
    c.beta = rng.uniform() * 4.0;
    c.lag = int(rng.uniform_int(1, 3));
    // random nonempty temporal mask, full statics
    std::vector<std::string> keep;
    for (const auto& name : s.temporal_space.names)
      if (rng.bernoulli(0.6)) keep.push_back(name);
    if (keep.empty()) keep.push_back(s.temporal_space.names[0]);
    c.mask = Mask::from_names(s, keep, s.static_space.names);

    switch (rng.uniform_int(0, 2)) {
      case 0: {
        c.decider.kind = BaseDecider::Kind::Tree;
        int f = int(rng.uniform_int(
            0, int(c.mask.static_idx.size() + c.mask.temporal_idx.size()) - 1));
        c.decider.tree.splits = {{f, rng.normal() * 0.5, -1, -2}};
        Vec l1(Y), l2(Y);
        for (int k = 0; k < Y; ++k) {
          l1[k] = rng.normal();
          l2[k] = rng.normal();
        }
        c.decider.tree.leaves = {l1, l2};
        break;
      }
      case 1: {
        c.decider.kind = BaseDecider::Kind::Linear;
        int in = int(c.mask.static_idx.size()) +
                 c.lag * (int(c.mask.temporal_idx.size()) + Y);
        c.decider.linear.W = Mat(Y, in);
        for (int r = 0; r < Y; ++r)
          for (int k = 0; k < in; ++k) c.decider.linear.W(r, k) = rng.normal();
        c.decider.linear.b = Vec::Zero(Y);
        break;
      }
      default: {
        if (rng.bernoulli(0.3)) c.lag = 0;  // full history
        c.decider.kind = BaseDecider::Kind::Recurrent;
        c.decider.recurrent.gru.prefix = "gru";
        c.decider.recurrent.gru.input = int(c.mask.temporal_idx.size()) + Y;
        c.decider.recurrent.gru.hidden = 4;
        c.decider.recurrent.params.seed = rng.next_u64();
        c.decider.recurrent.gru.init(c.decider.recurrent.params);
        c.decider.recurrent.params.add_init("out.W", Y, 4, 4);
        c.decider.recurrent.params.add_zeros("out.b", Y, 1);
      }
    }
    p.components.push_back(std::move(c));
  }
  p.weights = Vec(n);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    p.weights[i] = 0.2 + rng.uniform();
    total += p.weights[i];
  }
  p.weights /= total;
  return p;
}

}  // namespace

TEST_SUITE_BEGIN("policy");

TEST_CASE("window_history keeps exactly the last lag entries") {
  DomainSchema s = toy_schema();
  RngStream rng(1);
  PolicyHistory h = random_history(s, 5, rng);

  SUBCASE("lag >= t is the full history") {
    PolicyHistory w = window_history(h, 9);
    CHECK(w.observations.size() == 5);
    CHECK(w.actions.size() == 4);
  }
  SUBCASE("lag 1 at t = 5 keeps only (x5, y4)") {
    PolicyHistory w = window_history(h, 1);
    REQUIRE(w.observations.size() == 1);
    REQUIRE(w.actions.size() == 1);
    CHECK(w.observations[0] == h.observations[4]);
    CHECK(w.actions[0] == h.actions[3]);
    CHECK(w.static_features == h.static_features);
  }
  SUBCASE("lag 0 means full") {
    PolicyHistory w = window_history(h, 0);
    CHECK(w.observations.size() == 5);
  }
}

TEST_CASE("apply_mask drops features and computes rationality") {
  DomainSchema s = toy_schema();
  RngStream rng(2);
  PolicyHistory h = random_history(s, 3, rng);

  Mask all = Mask::all(s);
  CHECK(all.rationality(s) == 1.0);
  ComponentView v = apply_mask(window_history(h, 2), all, s, 2);
  CHECK(v.obs.back() == h.observations[2]);

  Mask sub = Mask::from_names(s, {"f1", "f3"}, {"s0"});
  CHECK(sub.rationality(s) == 0.5);
  ComponentView vm = apply_mask(window_history(h, 2), sub, s, 2);
  CHECK(vm.obs.back().size() == 2);
  CHECK(vm.obs.back()[0] == h.observations[2][1]);
  CHECK(vm.obs.back()[1] == h.observations[2][3]);
  CHECK(vm.static_masked.size() == 1);

  CHECK_THROWS_AS(Mask::from_names(s, {}, {}), ConfigError);
  CHECK_THROWS_AS(Mask::from_names(s, {"nope"}, {}), ConfigError);
}

TEST_CASE("ward rationality arithmetic: 7 of 35 features kept") {
  DomainSchema ward = ward_synth_schema();
  std::vector<std::string> keep(ward.temporal_space.names.begin(),
                                ward.temporal_space.names.begin() + 7);
  Mask m = Mask::from_names(ward, keep, ward.static_space.names);
  CHECK(m.rationality(ward) == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("boltzmann limits") {
  DomainSchema s = toy_schema();
  RngStream rng(3);
  PolicyHistory h = random_history(s, 4, rng);

  SUBCASE("beta = 0 is exactly uniform") {
    PolicyComponent c = linear_component(s, 1, 0.0, 4);
    Vec d = component_distribution(c, s, h);
    for (int i = 0; i < d.size(); ++i) CHECK(d[i] == 1.0 / d.size());
  }

  SUBCASE("beta = 1e6 is an argmax point mass within 1e-6") {
    PolicyComponent c;
    c.beta = 1e6;
    c.lag = 1;
    c.mask = Mask::all(s);
    c.decider.kind = BaseDecider::Kind::Tree;
    Vec q(2);
    q << 0.2, 0.1;
    c.decider.tree.leaves = {q};
    Vec d = component_distribution(c, s, h);
    CHECK(std::abs(d[0] - 1.0) < 1e-6);
    CHECK(d[1] < 1e-6);
  }

  SUBCASE("beta = 1 with q = (ln 2, 0) gives (2/3, 1/3)") {
    PolicyComponent c;
    c.beta = 1.0;
    c.lag = 1;
    c.mask = Mask::all(s);
    c.decider.kind = BaseDecider::Kind::Tree;
    Vec q(2);
    q << std::log(2.0), 0.0;
    c.decider.tree.leaves = {q};
    Vec d = component_distribution(c, s, h);
    CHECK(std::abs(d[0] - 2.0 / 3.0) < 1e-12);
    CHECK(std::abs(d[1] - 1.0 / 3.0) < 1e-12);
  }
}

TEST_CASE("mixture arithmetic") {
  DomainSchema s = toy_schema();
  RngStream rng(5);
  PolicyHistory h = random_history(s, 3, rng);

  SUBCASE("single component equals the component distribution") {
    PolicySpec p;
    p.components.push_back(linear_component(s, 1, 2.0, 6));
    p.weights = Vec::Ones(1);
    CHECK(policy_distribution(p, s, h) ==
          component_distribution(p.components[0], s, h));
  }

  SUBCASE("uniform + point mass at weights (0.5, 0.5) gives (0.75, 0.25)") {
    PolicySpec p;
    PolicyComponent uniform = linear_component(s, 1, 0.0, 7);
    PolicyComponent point;
    point.beta = 1e9;
    point.lag = 1;
    point.mask = Mask::all(s);
    point.decider.kind = BaseDecider::Kind::Tree;
    Vec q(2);
    q << 1.0, 0.0;
    point.decider.tree.leaves = {q};
    p.components = {uniform, point};
    p.weights = Vec(2);
    p.weights << 0.5, 0.5;
    Vec d = policy_distribution(p, s, h);
    CHECK(d[0] == doctest::Approx(0.75).epsilon(1e-9));
    CHECK(d[1] == doctest::Approx(0.25).epsilon(1e-9));
  }

  SUBCASE("sampled frequencies match the mixture within 4 sigma") {
    PolicySpec p;
    p.components.push_back(linear_component(s, 1, 1.5, 8));
    p.components.push_back(linear_component(s, 2, 0.7, 9));
    p.weights = Vec(2);
    p.weights << 0.3, 0.7;
    Vec want = policy_distribution(p, s, h);
    RngStream draw(10);
    int n = 100000;
    std::vector<int> counts(2, 0);
    for (int i = 0; i < n; ++i) ++counts[size_t(sample_action(p, s, h, draw))];
    for (int a = 0; a < 2; ++a) {
      double freq = double(counts[size_t(a)]) / n;
      double sd = std::sqrt(want[a] * (1 - want[a]) / n);
      CHECK(std::abs(freq - want[a]) < 4 * sd);
    }
  }
}

TEST_CASE("property suite over 100 random specs") {
  DomainSchema s = toy_schema(3);
  RngStream rng(77);
  for (int rep = 0; rep < 100; ++rep) {
    PolicySpec p = random_spec(s, rng);
    PolicyHistory h = random_history(s, int(rng.uniform_int(1, 6)), rng);

    Vec d = policy_distribution(p, s, h);
    // normalisation
    CHECK(std::abs(d.sum() - 1.0) < 1e-12);
    for (int i = 0; i < d.size(); ++i) CHECK(d[i] >= 0.0);

    // mixture linearity against a manual recomputation
    Vec manual = Vec::Zero(d.size());
    for (size_t i = 0; i < p.components.size(); ++i)
      manual += p.weights[int(i)] * component_distribution(p.components[i], s, h);
    CHECK((d - manual).cwiseAbs().maxCoeff() <= 1e-15);

    // masked-feature perturbation invariance, bitwise
    const Mask& mask = p.components[0].mask;
    if (mask.temporal_idx.size() < size_t(s.temporal_space.dim())) {
      PolicyHistory hp = h;
      for (int i = 0; i < s.temporal_space.dim(); ++i) {
        bool kept = false;
        for (int k : mask.temporal_idx) kept |= (k == i);
        if (!kept && !s.temporal_space.is_binary(i))
          hp.observations.back()[i] += rng.normal();
      }
      if (p.components.size() == 1) {
        Vec dp = policy_distribution(p, s, hp);
        CHECK(dp == d);
      } else {
        Vec ca = component_distribution(p.components[0], s, h);
        Vec cb = component_distribution(p.components[0], s, hp);
        CHECK(ca == cb);
      }
    }

    // argmax invariance in beta for a single component
    PolicyComponent c = p.components[0];
    if (c.beta > 0) {
      Vec d1 = component_distribution(c, s, h);
      c.beta *= 7.3;
      Vec d2 = component_distribution(c, s, h);
      int a1, a2;
      d1.maxCoeff(&a1);
      d2.maxCoeff(&a2);
      CHECK(a1 == a2);
    }
  }
}

TEST_CASE("temperature monotonicity on two actions") {
  DomainSchema s = toy_schema(2);
  RngStream rng(21);
  PolicyHistory h = random_history(s, 3, rng);
  PolicyComponent c = linear_component(s, 1, 0.0, 22);
  double last = 0.5;
  for (double beta : {0.0, 0.3, 1.0, 3.0, 10.0, 100.0}) {
    c.beta = beta;
    Vec d = component_distribution(c, s, h);
    double top = d.maxCoeff();
    CHECK(top >= last - 1e-12);
    last = top;
  }
}

TEST_CASE("markovianity measurement") {
  DomainSchema s = toy_schema(2);

  SUBCASE("memoryless decider measures 1") {
    PolicySpec p;
    p.components.push_back(linear_component(s, 1, 2.0, 30));
    p.weights = Vec::Ones(1);
    MarkovianityResult r = measure_markovianity(p, s, 5, 40, 31);
    CHECK(r.bounded);
    CHECK(r.lag == 1);
  }

  SUBCASE("constructed lag-2 policy measures 2") {
    PolicySpec p;
    PolicyComponent c = linear_component(s, 2, 3.0, 32);
    // make the second-oldest observation matter strongly
    c.decider.linear.W.col(s.static_space.dim()).setConstant(0.0);
    c.decider.linear.W(0, s.static_space.dim()) = 3.0;
    p.components.push_back(c);
    p.weights = Vec::Ones(1);
    MarkovianityResult r = measure_markovianity(p, s, 5, 40, 33);
    CHECK(r.bounded);
    CHECK(r.lag == 2);
  }

  SUBCASE("full-history recurrent decider reports the budget sentinel") {
    PolicySpec p;
    PolicyComponent c;
    c.beta = 4.0;
    c.lag = 0;
    c.mask = Mask::all(s);
    c.decider.kind = BaseDecider::Kind::Recurrent;
    c.decider.recurrent.gru.prefix = "gru";
    c.decider.recurrent.gru.input = s.temporal_space.dim() + 2;
    c.decider.recurrent.gru.hidden = 4;
    c.decider.recurrent.params.seed = 34;
    c.decider.recurrent.gru.init(c.decider.recurrent.params);
    c.decider.recurrent.params.add_init("out.W", 2, 4, 1);
    c.decider.recurrent.params.add_zeros("out.b", 2, 1);
    // strengthen readout so distant perturbations register above tolerance
    c.decider.recurrent.params.at("out.W") *= 10.0;
    p.components.push_back(c);
    p.weights = Vec::Ones(1);
    MarkovianityResult r = measure_markovianity(p, s, 5, 25, 35);
    CHECK_FALSE(r.bounded);
    CHECK(r.lag == 5);
  }
}

TEST_CASE("lag-2 perturbation sweep on a sensitive decider") {
  DomainSchema s = toy_schema(2);
  PolicySpec p;
  PolicyComponent c = linear_component(s, 2, 3.0, 40);
  p.components.push_back(c);
  p.weights = Vec::Ones(1);

  RngStream rng(41);
  PolicyHistory h = random_history(s, 5, rng);
  Vec base = policy_distribution(p, s, h);

  PolicyHistory old_changed = h;
  old_changed.observations[1][0] += 2.0;  // x_{t-3}: outside the window
  CHECK(policy_distribution(p, s, old_changed) == base);

  PolicyHistory recent_changed = h;
  recent_changed.observations[3][0] += 2.0;  // x_{t-1}: inside the window
  CHECK((policy_distribution(p, s, recent_changed) - base)
            .cwiseAbs()
            .maxCoeff() > 1e-9);
}

TEST_CASE("ground truth export round trips") {
  DomainSchema s = toy_schema(3);
  RngStream rng(50);
  PolicySpec p = demo_mixture_policy(s, 51);

  GroundTruth g = export_ground_truth(p, s);
  PolicySpec q = load_ground_truth(g, s);
  GroundTruth g2 = export_ground_truth(q, s);
  CHECK(g.digest == g2.digest);
  CHECK(g.theta == g2.theta);

  // identical distributions on 100 probe histories
  for (int probe = 0; probe < 100; ++probe) {
    PolicyHistory h = random_history(s, 1 + probe % 6, rng);
    Vec a = policy_distribution(p, s, h);
    Vec b = policy_distribution(q, s, h);
    CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-15);
  }

  SUBCASE("file round trip and digest check") {
    std::string path = "/tmp/dmkit_test_gt.json";
    save_ground_truth(g, path);
    GroundTruth back = read_ground_truth(path);
    CHECK(back.digest == g.digest);
    CHECK(policy_from_json(back.theta, s).weights == p.weights);

    GroundTruth corrupt = back;
    corrupt.digest[0] = corrupt.digest[0] == 'a' ? 'b' : 'a';
    CHECK_THROWS_AS(load_ground_truth(corrupt, s), IntegrityError);
  }

  SUBCASE("hand-edited beta still loads but behaves differently") {
    GroundTruth edited = g;
    double beta = edited.theta["components"][0]["beta"].get<double>();
    edited.theta["components"][0]["beta"] = beta * 5.0 + 1.0;
    PolicySpec q2 = load_ground_truth(edited, s);  // skeleton digest still valid
    RngStream rng2(60);
    bool differs = false;
    for (int probe = 0; probe < 20 && !differs; ++probe) {
      PolicyHistory h = random_history(s, 3, rng2);
      differs = (policy_distribution(p, s, h) - policy_distribution(q2, s, h))
                    .cwiseAbs()
                    .maxCoeff() > 1e-12;
    }
    CHECK(differs);
  }
}

TEST_CASE("spec validation rejects malformed policies") {
  DomainSchema s = toy_schema(2);
  PolicySpec p;
  CHECK_THROWS_AS(p.validate(s), ConfigError);  // no components

  p.components.push_back(linear_component(s, 1, 1.0, 70));
  p.weights = Vec(1);
  p.weights << 0.8;  // off the simplex
  CHECK_THROWS_AS(p.validate(s), ConfigError);

  p.weights << 1.0;
  p.validate(s);

  PolicySpec two = p;
  two.components.push_back(linear_component(s, 1, 1.0, 71));
  two.weights = Vec(2);
  two.weights << 1.0, -0.0;  // zero weight violates the open simplex
  CHECK_THROWS_AS(two.validate(s), ConfigError);

  // tree deciders cap out at 32 leaves
  PolicySpec treecap;
  PolicyComponent c;
  c.beta = 1.0;
  c.lag = 1;
  c.mask = Mask::all(s);
  c.decider.kind = BaseDecider::Kind::Tree;
  for (int i = 0; i < 33; ++i) c.decider.tree.leaves.push_back(Vec::Zero(2));
  treecap.components.push_back(c);
  treecap.weights = Vec::Ones(1);
  CHECK_THROWS_AS(treecap.validate(s), ConfigError);
  treecap.components[0].decider.tree.leaves.pop_back();
  treecap.validate(s);
}

TEST_SUITE_END();
