#include "dmkit/attention.hpp"
#include "dmkit/errors.hpp"
#include "doctest.h"

using namespace dmkit;

TEST_SUITE_BEGIN("attention");

TEST_CASE("markov is one-hot on lag 1") {
  AttentionSpec s;  // markov
  auto a = css_attention(s, 5);
  REQUIRE(a.size() == 4);
  CHECK(a[0] == 1.0);
  CHECK(a[1] == 0.0);
  CHECK(a[2] == 0.0);
  CHECK(a[3] == 0.0);
}

TEST_CASE("fixed vector is used verbatim when fully available") {
  AttentionSpec s;
  s.kind = AttentionSpec::Kind::Fixed;
  s.weights = {0.5, 0.5};
  auto a = css_attention(s, 3);
  REQUIRE(a.size() == 2);
  CHECK(a[0] == 0.5);
  CHECK(a[1] == 0.5);
}

TEST_CASE("fixed vector renormalises over available lags") {
  AttentionSpec s;
  s.kind = AttentionSpec::Kind::Fixed;
  s.weights = {0.7, 0.3};
  auto a = css_attention(s, 2);  // only lag 1 exists
  REQUIRE(a.size() == 1);
  CHECK(a[0] == 1.0);

  auto b = css_attention(s, 6);  // lags beyond the vector get zero
  REQUIRE(b.size() == 5);
  CHECK(b[0] == 0.7);
  CHECK(b[1] == 0.3);
  CHECK(b[2] == 0.0);
}

TEST_CASE("learned softmax over a window") {
  AttentionSpec s;
  s.kind = AttentionSpec::Kind::Learned;
  s.window = 2;
  Vec logits = Vec::Zero(2);
  auto a = css_attention(s, 4, &logits);
  REQUIRE(a.size() == 3);
  CHECK(a[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(a[1] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(a[2] == 0.0);
}

TEST_CASE("invalid specs are config errors") {
  AttentionSpec neg;
  neg.kind = AttentionSpec::Kind::Fixed;
  neg.weights = {0.5, -0.5};
  CHECK_THROWS_AS(css_attention(neg, 3), ConfigError);

  AttentionSpec zero;
  zero.kind = AttentionSpec::Kind::Fixed;
  zero.weights = {0.0, 1.0};
  CHECK_THROWS_AS(css_attention(zero, 2), ConfigError);  // available sum = 0
  auto ok = css_attention(zero, 3);                      // lag 2 available
  CHECK(ok[1] == 1.0);

  AttentionSpec s;
  CHECK_THROWS_AS(css_attention(s, 1), ConfigError);  // t >= 2 only

  AttentionSpec learned;
  learned.kind = AttentionSpec::Kind::Learned;
  learned.window = 2;
  CHECK_THROWS_AS(css_attention(learned, 3), ConfigError);  // logits missing
}

TEST_CASE("weights always sum to one over available lags") {
  AttentionSpec s;
  s.kind = AttentionSpec::Kind::Fixed;
  s.weights = {0.25, 0.5, 0.125, 0.125};
  for (int t = 2; t <= 9; ++t) {
    auto a = css_attention(s, t);
    double total = 0.0;
    for (double w : a) {
      CHECK(w >= 0.0);
      total += w;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_SUITE_END();
