#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dmkit/rng.hpp"
#include "dmkit/schema.hpp"
#include "dmkit/tape.hpp"
#include "json.hpp"

namespace dmkit {

using ad::Mat;

// Named tensors. std::map keeps iteration (and therefore flattening,
// updates and DP noise) in a fixed order.
struct ParamStore {
  std::map<std::string, Mat> tensors;
  uint64_t seed = 0;

  Mat& at(const std::string& name);
  const Mat& at(const std::string& name) const;
  bool has(const std::string& name) const { return tensors.count(name) > 0; }

  // Uniform(-s, s) with s = 1/sqrt(fan_in); the draw stream is keyed by
  // (seed, name) so adding unrelated tensors never shifts existing draws.
  void add_init(const std::string& name, int rows, int cols, int fan_in);
  void add_zeros(const std::string& name, int rows, int cols);
  void add_const(const std::string& name, const Mat& value);

  size_t scalar_count() const;
  Vec flatten() const;
  void unflatten(const Vec& flat);
  bool all_finite() const;
};

using GradMap = std::map<std::string, Mat>;

Vec flatten_grads(const ParamStore& params, const GradMap& grads);
GradMap unflatten_grads(const ParamStore& params, const Vec& flat);

// One forward pass: parameters enter the tape lazily as leaves.
struct ModelCtx {
  ad::Tape& tape;
  const ParamStore& params;
  std::map<std::string, ad::Var> vars;

  ModelCtx(ad::Tape& t, const ParamStore& p) : tape(t), params(p) {}

  ad::Var p(const std::string& name);
  ad::Var c(const Mat& value) { return tape.leaf(value); }
  ad::Var c(double value) { return tape.leaf(value); }

  // Gradients for every parameter touched by the pass; untouched tensors
  // get zero gradients of the right shape.
  GradMap collect_grads() const;
};

// ---- layers ----

struct MlpSpec {
  std::string prefix;
  std::vector<int> dims;  // in, hidden..., out; ELU between, linear output

  void init(ParamStore& ps) const;
  ad::Var forward(ModelCtx& ctx, ad::Var x) const;
};

struct GruSpec {
  std::string prefix;
  int input = 0;
  int hidden = 0;

  void init(ParamStore& ps) const;
  ad::Var step(ModelCtx& ctx, ad::Var x, ad::Var h) const;
  ad::Var h0(ModelCtx& ctx) const;
};

// ---- distribution heads ----

// Factored gaussian over `cont` dims plus factored bernoulli over `bin`
// dims, or a categorical over `classes`. Parameter layout for the factored
// case: [means(cont), logvars(cont), logits(bin)].
struct HeadSpec {
  int cont = 0;
  int bin = 0;
  int classes = 0;  // exclusive with cont/bin

  int param_dim() const { return classes > 0 ? classes : 2 * cont + bin; }
  int sample_dim() const { return classes > 0 ? 1 : cont + bin; }
  bool categorical() const { return classes > 0; }

  static HeadSpec for_space(const FeatureSpace& f) {
    return HeadSpec{f.continuous_dims, f.binary_dims, 0};
  }
};

// log-variances are clamped to [-10, 10] before use, both here and on the
// tape path.
double head_nll(const HeadSpec& h, const Vec& params, const Vec& target);
Vec head_sample(const HeadSpec& h, const Vec& params, RngStream& rng);
// Closed-form differential/discrete entropy of a single head.
double head_entropy(const HeadSpec& h, const Vec& params);
// Probability vector of a categorical head.
Vec head_probs(const HeadSpec& h, const Vec& params);

ad::Var head_nll_var(ModelCtx& ctx, const HeadSpec& h, ad::Var params,
                     const Vec& target);

// ---- training config / optimizer ----

struct DpConfig {
  double clip_norm = 1.0;
  double noise_multiplier = 0.0;
};

struct TrainConfig {
  double learning_rate = 0.05;
  int epochs = 50;
  int batch_size = 32;
  double momentum = 0.0;
  std::optional<double> grad_clip;  // global-norm clip on the batch gradient
  std::optional<DpConfig> dp;
  uint64_t seed = 0;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  std::string digest() const;
};

struct SgdState {
  std::map<std::string, Mat> velocity;
};

// params' = params - lr * g, with optional momentum and global-norm clip.
void sgd_step(ParamStore& params, const GradMap& grads, const TrainConfig& cfg,
              SgdState& state);

// DP aggregation: clip each per-example gradient to clip_norm in l2,
// average, then add gaussian noise with std clip_norm * noise_multiplier /
// batch to every coordinate of the mean.
GradMap dp_aggregate(const ParamStore& params,
                     const std::vector<GradMap>& per_example,
                     const DpConfig& dp, RngStream& noise_rng);

GradMap average_grads(const ParamStore& params,
                      const std::vector<GradMap>& per_example);

// ---- gradient verification ----

struct FdReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int worst_index = -1;
  bool pass(double tol = 1e-4) const { return max_rel_err <= tol; }
};

// Central finite differences of `loss` against `analytic`, h = 1e-5.
// Relative error uses max(1, |g|, |fd|) as the scale.
FdReport check_gradients(ParamStore& params,
                         const std::function<double(const ParamStore&)>& loss,
                         const GradMap& analytic, double h = 1e-5);

// ---- checkpoints ----

void save_checkpoint(const ParamStore& params, const nlohmann::json& meta,
                     const std::string& path);
ParamStore load_checkpoint(const std::string& path, nlohmann::json* meta);

}  // namespace dmkit
