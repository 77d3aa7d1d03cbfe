#include <cmath>
#include <functional>

#include "dmkit/rng.hpp"
#include "dmkit/tape.hpp"
#include "doctest.h"

using namespace dmkit::ad;
using dmkit::RngStream;

namespace {

Mat random_mat(RngStream& rng, int r, int c, double scale = 1.0) {
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  return m;
}

// central finite differences through an arbitrary scalar graph builder
void check_fd(const std::vector<Mat>& inputs,
              const std::function<Var(Tape&, std::vector<Var>&)>& build,
              double tol = 1e-6) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& m : inputs) vars.push_back(tape.leaf(m));
  Var out = build(tape, vars);
  REQUIRE(out.val().size() == 1);
  tape.backward(out);

  const double h = 1e-6;
  for (size_t k = 0; k < inputs.size(); ++k) {
    Mat analytic = tape.nodes[size_t(vars[k].i)].grad_set
                       ? tape.nodes[size_t(vars[k].i)].grad
                       : Mat::Zero(inputs[k].rows(), inputs[k].cols());
    for (int r = 0; r < inputs[k].rows(); ++r) {
      for (int c = 0; c < inputs[k].cols(); ++c) {
        auto eval = [&](double delta) {
          std::vector<Mat> shifted = inputs;
          shifted[k](r, c) += delta;
          Tape t2;
          std::vector<Var> v2;
          for (const auto& m : shifted) v2.push_back(t2.leaf(m));
          return build(t2, v2).val()(0, 0);
        };
        double fd = (eval(h) - eval(-h)) / (2.0 * h);
        double g = analytic(r, c);
        double rel = std::abs(g - fd) / std::max({1.0, std::abs(g), std::abs(fd)});
        CAPTURE(k);
        CAPTURE(r);
        CAPTURE(c);
        CHECK(rel < tol);
      }
    }
  }
}

}  // namespace

TEST_SUITE_BEGIN("tape");

TEST_CASE("elementwise and reduction ops match finite differences") {
  RngStream rng(11);
  Mat a = random_mat(rng, 3, 2), b = random_mat(rng, 3, 2);

  check_fd({a, b}, [](Tape&, std::vector<Var>& v) {
    return sum(cmul(v[0] + v[1], v[0] - v[1]));
  });
  check_fd({a}, [](Tape&, std::vector<Var>& v) { return sum(elu(v[0])); });
  check_fd({a}, [](Tape&, std::vector<Var>& v) { return sum(sigmoid(v[0])); });
  check_fd({a}, [](Tape&, std::vector<Var>& v) { return sum(tanh_(v[0])); });
  check_fd({a}, [](Tape&, std::vector<Var>& v) { return sum(exp_(v[0])); });
  check_fd({a}, [](Tape&, std::vector<Var>& v) { return sum(softplus(v[0])); });
  check_fd({a}, [](Tape&, std::vector<Var>& v) { return sum(-2.5 * v[0]); });
  check_fd({a, b}, [](Tape&, std::vector<Var>& v) { return dot(v[0], v[1]); });
  check_fd({a}, [](Tape&, std::vector<Var>& v) { return sum(-v[0]); });

  Mat pos = random_mat(rng, 4, 1).array().abs().matrix() + Mat::Constant(4, 1, 0.5);
  check_fd({pos}, [](Tape&, std::vector<Var>& v) { return sum(log_(v[0])); });
}

TEST_CASE("matmul, concat, slice, gather") {
  RngStream rng(13);
  Mat W = random_mat(rng, 3, 4), x = random_mat(rng, 4, 1);
  check_fd({W, x}, [](Tape&, std::vector<Var>& v) {
    return sum(matmul(v[0], v[1]));
  });

  Mat a = random_mat(rng, 2, 1), b = random_mat(rng, 3, 1);
  check_fd({a, b}, [](Tape&, std::vector<Var>& v) {
    Var c = concat({v[0], v[1], v[0]});
    return sum(cmul(slice_rows(c, 1, 4), slice_rows(c, 2, 4)));
  });

  Mat P = random_mat(rng, 3, 3);
  check_fd({P}, [](Tape&, std::vector<Var>& v) {
    Var g = gather_elems(v[0], {0, 2, 2, 1}, {1, 0, 2, 1});
    return sum(cmul(g, g));
  });
}

TEST_CASE("softmax family") {
  RngStream rng(17);
  Mat l = random_mat(rng, 5, 1, 2.0);
  Mat w = random_mat(rng, 5, 1);
  check_fd({l, w}, [](Tape&, std::vector<Var>& v) {
    return dot(softmax_col(v[0]), v[1]);
  });
  check_fd({l, w}, [](Tape&, std::vector<Var>& v) {
    return dot(log_softmax_col(v[0]), v[1]);
  });
  check_fd({l}, [](Tape&, std::vector<Var>& v) {
    return logsumexp_col(v[0]);
  });

  // invariants: probabilities sum to 1, logsumexp dominates the max
  Tape tape;
  Var sm = softmax_col(tape.leaf(l));
  CHECK(std::abs(sm.val().sum() - 1.0) < 1e-12);
}

TEST_CASE("distribution losses") {
  RngStream rng(19);
  Mat mean = random_mat(rng, 3, 1), logvar = random_mat(rng, 3, 1, 0.5);
  Mat target = random_mat(rng, 3, 1);
  check_fd({mean, logvar}, [&](Tape&, std::vector<Var>& v) {
    return gaussian_nll(v[0], v[1], target);
  });

  Mat logits = random_mat(rng, 4, 1, 1.5);
  Mat bern(4, 1);
  bern << 1, 0, 0, 1;
  check_fd({logits}, [&](Tape&, std::vector<Var>& v) {
    return bernoulli_nll(v[0], bern);
  });
  check_fd({logits}, [&](Tape&, std::vector<Var>& v) {
    return categorical_nll(v[0], 2);
  });

  // closed forms
  Tape tape;
  Mat zero1 = Mat::Zero(1, 1);
  Var nll = gaussian_nll(tape.leaf(zero1), tape.leaf(zero1), zero1);
  CHECK(nll.val()(0, 0) == doctest::Approx(0.5 * std::log(2 * M_PI)).epsilon(1e-12));

  Var b = bernoulli_nll(tape.leaf(zero1), Mat::Ones(1, 1));
  CHECK(b.val()(0, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("scalar-node algebra and clamp") {
  RngStream rng(23);
  Mat a = random_mat(rng, 3, 1).array().abs().matrix() + Mat::Constant(3, 1, 0.2);
  Mat s = Mat::Constant(1, 1, 1.7);
  check_fd({a, s}, [](Tape&, std::vector<Var>& v) {
    return sum(mul_scalar(v[0], sum(v[1])));
  });
  check_fd({a, s}, [](Tape&, std::vector<Var>& v) {
    return sum(div_scalar(v[0], sum(v[1])));
  });
  // clamp passes gradients only strictly inside the interval
  Tape tape;
  Mat c(3, 1);
  c << -20.0, 0.3, 20.0;
  Var cl = clamp(tape.leaf(c), -10, 10);
  Var loss = sum(cl);
  tape.backward(loss);
  const Mat& g = tape.nodes[0].grad;
  CHECK(g(0, 0) == 0.0);
  CHECK(g(1, 0) == 1.0);
  CHECK(g(2, 0) == 0.0);
}

TEST_CASE("gradient reversal flips and scales the pullback") {
  Tape tape;
  Mat x = Mat::Constant(2, 1, 1.5);
  Var v = tape.leaf(x);
  Var r = grad_reverse(v, 3.0);
  CHECK(r.val() == x);  // identity forward
  Var loss = sum(r);
  tape.backward(loss);
  CHECK(tape.nodes[0].grad(0, 0) == -3.0);
}

TEST_SUITE_END();
