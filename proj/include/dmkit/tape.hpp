#pragma once

#include <Eigen/Dense>
#include <cassert>
#include <cmath>
#include <numbers>
#include <vector>

namespace dmkit::ad {

using Mat = Eigen::MatrixXd;

// Reverse-mode tape over dense matrices. Deliberately small: only the
// operations the model zoo needs. Column vectors are n x 1 matrices,
// scalars are 1 x 1.
enum class Op {
  Leaf,
  Add,
  Sub,
  Neg,
  CMul,     // elementwise
  MatMul,
  Scale,    // constant scalar multiply
  Elu,
  Sigmoid,
  Tanh,
  Exp,
  Log,
  Softplus,
  Clamp,
  Sum,          // -> 1x1
  Dot,          // -> 1x1
  Concat,       // vertical stack of column vectors
  SliceRows,
  SoftmaxCol,
  LogSoftmaxCol,
  LogSumExpCol,  // -> 1x1
  GaussianNll,   // (mean, logvar | const target) -> 1x1
  BernoulliNll,  // (logits | const target) -> 1x1
  CategoricalNll,  // (logits | class index) -> 1x1
  GradReverse,     // identity forward, -lambda on the way back
  MulScalarNode,   // matrix times 1x1 node
  DivScalarNode,   // matrix divided by 1x1 node
  GatherElems,     // out[r,0] = a(rows[r], cols[r])
};

struct Node {
  Op op = Op::Leaf;
  int a = -1, b = -1;
  double c0 = 0.0, c1 = 0.0;  // op-specific constants
  std::vector<int> kids;      // Concat children or GatherElems row indices
  std::vector<int> cols;      // GatherElems column indices
  Mat aux;                    // constant target (nll ops)
  int aux_int = 0;
  Mat val;
  Mat grad;
  bool grad_set = false;
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  int i = -1;
  bool valid() const { return tape != nullptr && i >= 0; }
  const Mat& val() const;
};

class Tape {
 public:
  std::vector<Node> nodes;

  void clear() { nodes.clear(); }
  size_t size() const { return nodes.size(); }

  Var leaf(const Mat& v) {
    Node n;
    n.op = Op::Leaf;
    n.val = v;
    return push(std::move(n));
  }
  Var leaf(double x) { return leaf(Mat::Constant(1, 1, x)); }

  const Mat& val(int i) const { return nodes[size_t(i)].val; }

  Mat& grad(int i) {
    Node& n = nodes[size_t(i)];
    if (!n.grad_set) {
      n.grad = Mat::Zero(n.val.rows(), n.val.cols());
      n.grad_set = true;
    }
    return n.grad;
  }

  // Seeds d(root)/d(root) = 1 and accumulates into every reachable node.
  // root must be scalar (1x1).
  void backward(Var root);

  Var push(Node&& n) {
    nodes.push_back(std::move(n));
    return Var{this, int(nodes.size()) - 1};
  }
};

inline const Mat& Var::val() const { return tape->val(i); }

namespace detail {

inline Var unary(Op op, Var a, Mat v, double c0 = 0.0, double c1 = 0.0) {
  Node n;
  n.op = op;
  n.a = a.i;
  n.c0 = c0;
  n.c1 = c1;
  n.val = std::move(v);
  return a.tape->push(std::move(n));
}

inline Var binary(Op op, Var a, Var b, Mat v) {
  assert(a.tape == b.tape);
  Node n;
  n.op = op;
  n.a = a.i;
  n.b = b.i;
  n.val = std::move(v);
  return a.tape->push(std::move(n));
}

inline double elu1(double x) { return x >= 0.0 ? x : std::expm1(x); }
// derivative at 0 is defined as 1
inline double elu1_grad(double x) { return x >= 0.0 ? 1.0 : std::exp(x); }
inline double sigmoid1(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                  : std::exp(x) / (1.0 + std::exp(x));
}
inline double softplus1(double x) {
  return x > 30.0 ? x : std::log1p(std::exp(std::min(x, 30.0)));
}

}  // namespace detail

inline Var operator+(Var a, Var b) {
  return detail::binary(Op::Add, a, b, a.val() + b.val());
}
inline Var operator-(Var a, Var b) {
  return detail::binary(Op::Sub, a, b, a.val() - b.val());
}
inline Var operator-(Var a) { return detail::unary(Op::Neg, a, -a.val()); }
inline Var cmul(Var a, Var b) {
  return detail::binary(Op::CMul, a, b, a.val().cwiseProduct(b.val()));
}
inline Var matmul(Var a, Var b) {
  return detail::binary(Op::MatMul, a, b, a.val() * b.val());
}
inline Var operator*(double c, Var a) {
  return detail::unary(Op::Scale, a, c * a.val(), c);
}
inline Var elu(Var a) {
  return detail::unary(Op::Elu, a, a.val().unaryExpr(&detail::elu1));
}
inline Var sigmoid(Var a) {
  return detail::unary(Op::Sigmoid, a, a.val().unaryExpr(&detail::sigmoid1));
}
inline Var tanh_(Var a) {
  return detail::unary(Op::Tanh, a,
                       a.val().unaryExpr([](double x) { return std::tanh(x); }));
}
inline Var exp_(Var a) {
  return detail::unary(Op::Exp, a,
                       a.val().unaryExpr([](double x) { return std::exp(x); }));
}
inline Var log_(Var a) {
  return detail::unary(Op::Log, a,
                       a.val().unaryExpr([](double x) { return std::log(x); }));
}
inline Var softplus(Var a) {
  return detail::unary(Op::Softplus, a, a.val().unaryExpr(&detail::softplus1));
}
inline Var clamp(Var a, double lo, double hi) {
  return detail::unary(
      Op::Clamp, a,
      a.val().unaryExpr([=](double x) { return std::min(std::max(x, lo), hi); }),
      lo, hi);
}
inline Var sum(Var a) {
  return detail::unary(Op::Sum, a, Mat::Constant(1, 1, a.val().sum()));
}
inline Var dot(Var a, Var b) {
  return detail::binary(
      Op::Dot, a, b,
      Mat::Constant(1, 1, a.val().cwiseProduct(b.val()).sum()));
}
inline Var slice_rows(Var a, int r0, int n) {
  Var out = detail::unary(Op::SliceRows, a, a.val().middleRows(r0, n));
  out.tape->nodes.back().aux_int = r0;
  return out;
}
inline Var concat(const std::vector<Var>& parts) {
  assert(!parts.empty());
  Tape* t = parts[0].tape;
  int rows = 0;
  for (const Var& p : parts) rows += int(p.val().rows());
  Mat v(rows, 1);
  int r = 0;
  Node n;
  n.op = Op::Concat;
  for (const Var& p : parts) {
    v.middleRows(r, int(p.val().rows())) = p.val();
    r += int(p.val().rows());
    n.kids.push_back(p.i);
  }
  n.val = std::move(v);
  return t->push(std::move(n));
}

inline Var softmax_col(Var a) {
  const Mat& x = a.val();
  double m = x.maxCoeff();
  Mat e = (x.array() - m).exp();
  return detail::unary(Op::SoftmaxCol, a, e / e.sum());
}
inline Var log_softmax_col(Var a) {
  const Mat& x = a.val();
  double m = x.maxCoeff();
  double lse = m + std::log((x.array() - m).exp().sum());
  return detail::unary(Op::LogSoftmaxCol, a, x.array() - lse);
}
inline Var logsumexp_col(Var a) {
  const Mat& x = a.val();
  double m = x.maxCoeff();
  double lse = m + std::log((x.array() - m).exp().sum());
  return detail::unary(Op::LogSumExpCol, a, Mat::Constant(1, 1, lse));
}

// 0.5 * sum(log 2pi + lv + (x - mean)^2 * exp(-lv))
inline Var gaussian_nll(Var mean, Var logvar, const Mat& target) {
  const Mat& mu = mean.val();
  const Mat& lv = logvar.val();
  double acc = 0.0;
  for (int r = 0; r < mu.rows(); ++r) {
    double d = target(r, 0) - mu(r, 0);
    acc += 0.5 * (std::log(2.0 * std::numbers::pi) + lv(r, 0) +
                  d * d * std::exp(-lv(r, 0)));
  }
  Var out = detail::binary(Op::GaussianNll, mean, logvar,
                           Mat::Constant(1, 1, acc));
  out.tape->nodes.back().aux = target;
  return out;
}

// sum(softplus(l) - x*l), targets in {0,1}
inline Var bernoulli_nll(Var logits, const Mat& target) {
  const Mat& l = logits.val();
  double acc = 0.0;
  for (int r = 0; r < l.rows(); ++r)
    acc += detail::softplus1(l(r, 0)) - target(r, 0) * l(r, 0);
  Var out = detail::unary(Op::BernoulliNll, logits, Mat::Constant(1, 1, acc));
  out.tape->nodes.back().aux = target;
  return out;
}

// logsumexp(l) - l[k]
inline Var categorical_nll(Var logits, int k) {
  const Mat& l = logits.val();
  double m = l.maxCoeff();
  double lse = m + std::log((l.array() - m).exp().sum());
  Var out = detail::unary(Op::CategoricalNll, logits,
                          Mat::Constant(1, 1, lse - l(k, 0)));
  out.tape->nodes.back().aux_int = k;
  return out;
}

inline Var grad_reverse(Var a, double lambda) {
  return detail::unary(Op::GradReverse, a, a.val(), lambda);
}
inline Var mul_scalar(Var a, Var s) {
  assert(s.val().size() == 1);
  return detail::binary(Op::MulScalarNode, a, s, a.val() * s.val()(0, 0));
}
inline Var div_scalar(Var a, Var s) {
  assert(s.val().size() == 1);
  return detail::binary(Op::DivScalarNode, a, s, a.val() / s.val()(0, 0));
}
inline Var gather_elems(Var a, std::vector<int> rows, std::vector<int> cols) {
  assert(rows.size() == cols.size());
  Mat v(int(rows.size()), 1);
  for (size_t r = 0; r < rows.size(); ++r)
    v(int(r), 0) = a.val()(rows[r], cols[r]);
  Node n;
  n.op = Op::GatherElems;
  n.a = a.i;
  n.kids = std::move(rows);
  n.cols = std::move(cols);
  n.val = std::move(v);
  return a.tape->push(std::move(n));
}

inline void Tape::backward(Var root) {
  assert(root.tape == this);
  assert(nodes[size_t(root.i)].val.size() == 1);
  grad(root.i)(0, 0) = 1.0;

  for (int i = root.i; i >= 0; --i) {
    Node& n = nodes[size_t(i)];
    if (!n.grad_set) continue;
    const Mat& g = n.grad;
    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::Add:
        grad(n.a) += g;
        grad(n.b) += g;
        break;
      case Op::Sub:
        grad(n.a) += g;
        grad(n.b) -= g;
        break;
      case Op::Neg:
        grad(n.a) -= g;
        break;
      case Op::CMul:
        grad(n.a) += g.cwiseProduct(nodes[size_t(n.b)].val);
        grad(n.b) += g.cwiseProduct(nodes[size_t(n.a)].val);
        break;
      case Op::MatMul:
        grad(n.a).noalias() += g * nodes[size_t(n.b)].val.transpose();
        grad(n.b).noalias() += nodes[size_t(n.a)].val.transpose() * g;
        break;
      case Op::Scale:
        grad(n.a) += n.c0 * g;
        break;
      case Op::Elu:
        grad(n.a) +=
            g.cwiseProduct(nodes[size_t(n.a)].val.unaryExpr(&detail::elu1_grad));
        break;
      case Op::Sigmoid:
        grad(n.a) += g.cwiseProduct(
            n.val.cwiseProduct(Mat::Ones(n.val.rows(), n.val.cols()) - n.val));
        break;
      case Op::Tanh:
        grad(n.a) += g.cwiseProduct(
            Mat::Ones(n.val.rows(), n.val.cols()) - n.val.cwiseProduct(n.val));
        break;
      case Op::Exp:
        grad(n.a) += g.cwiseProduct(n.val);
        break;
      case Op::Log:
        grad(n.a) += g.cwiseQuotient(nodes[size_t(n.a)].val);
        break;
      case Op::Softplus:
        grad(n.a) +=
            g.cwiseProduct(nodes[size_t(n.a)].val.unaryExpr(&detail::sigmoid1));
        break;
      case Op::Clamp: {
        const Mat& x = nodes[size_t(n.a)].val;
        Mat& ga = grad(n.a);
        for (int r = 0; r < x.rows(); ++r)
          for (int c = 0; c < x.cols(); ++c)
            if (x(r, c) > n.c0 && x(r, c) < n.c1) ga(r, c) += g(r, c);
        break;
      }
      case Op::Sum:
        grad(n.a).array() += g(0, 0);
        break;
      case Op::Dot:
        grad(n.a) += g(0, 0) * nodes[size_t(n.b)].val;
        grad(n.b) += g(0, 0) * nodes[size_t(n.a)].val;
        break;
      case Op::Concat: {
        int r = 0;
        for (int kid : n.kids) {
          int rows = int(nodes[size_t(kid)].val.rows());
          grad(kid) += g.middleRows(r, rows);
          r += rows;
        }
        break;
      }
      case Op::SliceRows:
        grad(n.a).middleRows(n.aux_int, int(n.val.rows())) += g;
        break;
      case Op::SoftmaxCol: {
        double gy = g.cwiseProduct(n.val).sum();
        grad(n.a) +=
            n.val.cwiseProduct(g - Mat::Constant(g.rows(), g.cols(), gy));
        break;
      }
      case Op::LogSoftmaxCol: {
        double gs = g.sum();
        grad(n.a) += g - gs * n.val.array().exp().matrix();
        break;
      }
      case Op::LogSumExpCol: {
        const Mat& x = nodes[size_t(n.a)].val;
        grad(n.a) += g(0, 0) * (x.array() - n.val(0, 0)).exp().matrix();
        break;
      }
      case Op::GaussianNll: {
        const Mat& mu = nodes[size_t(n.a)].val;
        const Mat& lv = nodes[size_t(n.b)].val;
        Mat& gm = grad(n.a);
        Mat& gl = grad(n.b);
        double g0 = g(0, 0);
        for (int r = 0; r < mu.rows(); ++r) {
          double d = n.aux(r, 0) - mu(r, 0);
          double iv = std::exp(-lv(r, 0));
          gm(r, 0) += g0 * (-d * iv);
          gl(r, 0) += g0 * 0.5 * (1.0 - d * d * iv);
        }
        break;
      }
      case Op::BernoulliNll: {
        const Mat& l = nodes[size_t(n.a)].val;
        Mat& ga = grad(n.a);
        double g0 = g(0, 0);
        for (int r = 0; r < l.rows(); ++r)
          ga(r, 0) += g0 * (detail::sigmoid1(l(r, 0)) - n.aux(r, 0));
        break;
      }
      case Op::CategoricalNll: {
        const Mat& l = nodes[size_t(n.a)].val;
        double m = l.maxCoeff();
        Mat p = (l.array() - m).exp();
        p /= p.sum();
        p(n.aux_int, 0) -= 1.0;
        grad(n.a) += g(0, 0) * p;
        break;
      }
      case Op::GradReverse:
        grad(n.a) -= n.c0 * g;
        break;
      case Op::MulScalarNode: {
        double s = nodes[size_t(n.b)].val(0, 0);
        grad(n.a) += s * g;
        grad(n.b)(0, 0) += g.cwiseProduct(nodes[size_t(n.a)].val).sum();
        break;
      }
      case Op::DivScalarNode: {
        double s = nodes[size_t(n.b)].val(0, 0);
        grad(n.a) += g / s;
        grad(n.b)(0, 0) -= g.cwiseProduct(n.val).sum() / s;
        break;
      }
      case Op::GatherElems: {
        Mat& ga = grad(n.a);
        for (size_t r = 0; r < n.kids.size(); ++r)
          ga(n.kids[r], n.cols[r]) += g(int(r), 0);
        break;
      }
    }
  }
}

}  // namespace dmkit::ad
