#include "dmkit/nn.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "dmkit/digest.hpp"
#include "dmkit/errors.hpp"

namespace dmkit {

using nlohmann::json;

Mat& ParamStore::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

const Mat& ParamStore::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

void ParamStore::add_init(const std::string& name, int rows, int cols,
                          int fan_in) {
  RngStream rng = RngStream(seed).child(name);
  double s = 1.0 / std::sqrt(double(std::max(fan_in, 1)));
  Mat m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = (2.0 * rng.uniform() - 1.0) * s;
  tensors[name] = std::move(m);
}

void ParamStore::add_zeros(const std::string& name, int rows, int cols) {
  tensors[name] = Mat::Zero(rows, cols);
}

void ParamStore::add_const(const std::string& name, const Mat& value) {
  tensors[name] = value;
}

size_t ParamStore::scalar_count() const {
  size_t n = 0;
  for (const auto& [_, m] : tensors) n += size_t(m.size());
  return n;
}

Vec ParamStore::flatten() const {
  Vec out(scalar_count());
  Eigen::Index k = 0;
  for (const auto& [_, m] : tensors) {
    for (int c = 0; c < m.cols(); ++c)
      for (int r = 0; r < m.rows(); ++r) out[k++] = m(r, c);
  }
  return out;
}

void ParamStore::unflatten(const Vec& flat) {
  if (size_t(flat.size()) != scalar_count())
    throw DimensionError("flat parameter vector has wrong length");
  Eigen::Index k = 0;
  for (auto& [_, m] : tensors) {
    for (int c = 0; c < m.cols(); ++c)
      for (int r = 0; r < m.rows(); ++r) m(r, c) = flat[k++];
  }
}

bool ParamStore::all_finite() const {
  for (const auto& [_, m] : tensors)
    if (!m.allFinite()) return false;
  return true;
}

Vec flatten_grads(const ParamStore& params, const GradMap& grads) {
  Vec out(params.scalar_count());
  Eigen::Index k = 0;
  for (const auto& [name, m] : params.tensors) {
    auto it = grads.find(name);
    for (int c = 0; c < m.cols(); ++c)
      for (int r = 0; r < m.rows(); ++r)
        out[k++] = it == grads.end() ? 0.0 : it->second(r, c);
  }
  return out;
}

GradMap unflatten_grads(const ParamStore& params, const Vec& flat) {
  GradMap out;
  Eigen::Index k = 0;
  for (const auto& [name, m] : params.tensors) {
    Mat g(m.rows(), m.cols());
    for (int c = 0; c < m.cols(); ++c)
      for (int r = 0; r < m.rows(); ++r) g(r, c) = flat[k++];
    out[name] = std::move(g);
  }
  return out;
}

ad::Var ModelCtx::p(const std::string& name) {
  auto it = vars.find(name);
  if (it != vars.end()) return it->second;
  ad::Var v = tape.leaf(params.at(name));
  vars.emplace(name, v);
  return v;
}

GradMap ModelCtx::collect_grads() const {
  GradMap out;
  for (const auto& [name, m] : params.tensors) {
    auto it = vars.find(name);
    if (it != vars.end() && tape.nodes[size_t(it->second.i)].grad_set) {
      out[name] = tape.nodes[size_t(it->second.i)].grad;
    } else {
      out[name] = Mat::Zero(m.rows(), m.cols());
    }
  }
  return out;
}

// ---- layers ----

void MlpSpec::init(ParamStore& ps) const {
  for (size_t l = 0; l + 1 < dims.size(); ++l) {
    ps.add_init(prefix + ".W" + std::to_string(l), dims[l + 1], dims[l],
                dims[l]);
    ps.add_zeros(prefix + ".b" + std::to_string(l), dims[l + 1], 1);
  }
}

ad::Var MlpSpec::forward(ModelCtx& ctx, ad::Var x) const {
  ad::Var h = x;
  for (size_t l = 0; l + 1 < dims.size(); ++l) {
    ad::Var z = matmul(ctx.p(prefix + ".W" + std::to_string(l)), h) +
                ctx.p(prefix + ".b" + std::to_string(l));
    h = (l + 2 < dims.size()) ? elu(z) : z;
  }
  return h;
}

void GruSpec::init(ParamStore& ps) const {
  for (const char* g : {"z", "r", "c"}) {
    ps.add_init(prefix + ".W" + g, hidden, input, input);
    ps.add_init(prefix + ".U" + g, hidden, hidden, hidden);
    ps.add_zeros(prefix + ".b" + g, hidden, 1);
  }
}

ad::Var GruSpec::step(ModelCtx& ctx, ad::Var x, ad::Var h) const {
  using namespace ad;
  Var z = sigmoid(matmul(ctx.p(prefix + ".Wz"), x) +
                  matmul(ctx.p(prefix + ".Uz"), h) + ctx.p(prefix + ".bz"));
  Var r = sigmoid(matmul(ctx.p(prefix + ".Wr"), x) +
                  matmul(ctx.p(prefix + ".Ur"), h) + ctx.p(prefix + ".br"));
  Var c = tanh_(matmul(ctx.p(prefix + ".Wc"), x) +
                matmul(ctx.p(prefix + ".Uc"), cmul(r, h)) +
                ctx.p(prefix + ".bc"));
  Var one = ctx.c(Mat::Ones(hidden, 1));
  return cmul(one - z, h) + cmul(z, c);
}

ad::Var GruSpec::h0(ModelCtx& ctx) const { return ctx.c(Mat::Zero(hidden, 1)); }

// ---- heads ----

namespace {
constexpr double kLogvarLo = -10.0;
constexpr double kLogvarHi = 10.0;
constexpr double kLog2Pi = 1.8378770664093454836;

double clamp_lv(double lv) {
  return std::min(std::max(lv, kLogvarLo), kLogvarHi);
}

double stable_softplus(double x) {
  return x > 30.0 ? x : std::log1p(std::exp(std::min(x, 30.0)));
}
}  // namespace

double head_nll(const HeadSpec& h, const Vec& params, const Vec& target) {
  if (params.size() != h.param_dim())
    throw DimensionError("head parameter vector has wrong length");
  if (h.categorical()) {
    int k = int(target[0]);
    if (k < 0 || k >= h.classes)
      throw ConfigError("categorical target outside support");
    double m = params.maxCoeff();
    double lse = m + std::log((params.array() - m).exp().sum());
    return lse - params[k];
  }
  if (target.size() != h.cont + h.bin)
    throw DimensionError("head target vector has wrong length");
  double nll = 0.0;
  for (int i = 0; i < h.cont; ++i) {
    double mu = params[i];
    double lv = clamp_lv(params[h.cont + i]);
    double d = target[i] - mu;
    nll += 0.5 * (kLog2Pi + lv + d * d * std::exp(-lv));
  }
  for (int i = 0; i < h.bin; ++i) {
    double x = target[h.cont + i];
    if (x != 0.0 && x != 1.0)
      throw ConfigError("bernoulli target outside {0,1}");
    double l = params[2 * h.cont + i];
    nll += stable_softplus(l) - x * l;
  }
  return nll;
}

Vec head_sample(const HeadSpec& h, const Vec& params, RngStream& rng) {
  if (h.categorical()) {
    Vec probs = head_probs(h, params);
    Vec out(1);
    out[0] = rng.categorical(std::span<const double>(probs.data(),
                                                     size_t(probs.size())));
    return out;
  }
  Vec out(h.cont + h.bin);
  for (int i = 0; i < h.cont; ++i) {
    double sd = std::exp(0.5 * clamp_lv(params[h.cont + i]));
    out[i] = params[i] + sd * rng.normal();
  }
  for (int i = 0; i < h.bin; ++i) {
    double p = ad::detail::sigmoid1(params[2 * h.cont + i]);
    out[h.cont + i] = rng.bernoulli(p) ? 1.0 : 0.0;
  }
  return out;
}

double head_entropy(const HeadSpec& h, const Vec& params) {
  if (h.categorical()) {
    Vec p = head_probs(h, params);
    double ent = 0.0;
    for (int i = 0; i < p.size(); ++i) {
      double q = std::max(p[i], 1e-12);
      ent -= q * std::log(q);
    }
    return ent;
  }
  double ent = 0.0;
  for (int i = 0; i < h.cont; ++i)
    ent += 0.5 * (kLog2Pi + 1.0 + clamp_lv(params[h.cont + i]));
  for (int i = 0; i < h.bin; ++i) {
    double p = ad::detail::sigmoid1(params[2 * h.cont + i]);
    p = std::min(std::max(p, 1e-12), 1.0 - 1e-12);
    ent -= p * std::log(p) + (1.0 - p) * std::log(1.0 - p);
  }
  return ent;
}

Vec head_probs(const HeadSpec& h, const Vec& params) {
  if (!h.categorical()) throw ConfigError("head is not categorical");
  double m = params.maxCoeff();
  Vec e = (params.array() - m).exp();
  return e / e.sum();
}

ad::Var head_nll_var(ModelCtx& ctx, const HeadSpec& h, ad::Var params,
                     const Vec& target) {
  using namespace ad;
  if (h.categorical()) return categorical_nll(params, int(target[0]));
  Var nll = ctx.c(0.0);
  if (h.cont > 0) {
    Var mean = slice_rows(params, 0, h.cont);
    Var logvar = clamp(slice_rows(params, h.cont, h.cont), kLogvarLo, kLogvarHi);
    nll = nll + gaussian_nll(mean, logvar, target.head(h.cont));
  }
  if (h.bin > 0) {
    Var logits = slice_rows(params, 2 * h.cont, h.bin);
    nll = nll + bernoulli_nll(logits, target.tail(h.bin));
  }
  return nll;
}

// ---- training config ----

json TrainConfig::to_json() const {
  json j{{"learning_rate", learning_rate}, {"epochs", epochs},
         {"batch_size", batch_size},       {"momentum", momentum},
         {"seed", seed}};
  if (grad_clip) j["grad_clip"] = *grad_clip;
  if (dp)
    j["dp"] = {{"clip_norm", dp->clip_norm},
               {"noise_multiplier", dp->noise_multiplier}};
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  if (j.contains("learning_rate")) j.at("learning_rate").get_to(c.learning_rate);
  if (j.contains("epochs")) j.at("epochs").get_to(c.epochs);
  if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
  if (j.contains("momentum")) j.at("momentum").get_to(c.momentum);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
  if (j.contains("grad_clip")) c.grad_clip = j.at("grad_clip").get<double>();
  if (j.contains("dp"))
    c.dp = DpConfig{j.at("dp").at("clip_norm").get<double>(),
                    j.at("dp").at("noise_multiplier").get<double>()};
  if (c.learning_rate <= 0.0) throw ConfigError("learning_rate must be > 0");
  if (c.dp && c.dp->clip_norm <= 0.0)
    throw ConfigError("dp clip_norm must be > 0");
  if (c.dp && c.dp->noise_multiplier < 0.0)
    throw ConfigError("dp noise_multiplier must be >= 0");
  return c;
}

std::string TrainConfig::digest() const { return digest_json(to_json()); }

void sgd_step(ParamStore& params, const GradMap& grads, const TrainConfig& cfg,
              SgdState& state) {
  double scale = 1.0;
  if (cfg.grad_clip) {
    double sq = 0.0;
    for (const auto& [name, g] : grads) sq += g.squaredNorm();
    double norm = std::sqrt(sq);
    if (norm > *cfg.grad_clip && norm > 0.0) scale = *cfg.grad_clip / norm;
  }
  for (auto& [name, m] : params.tensors) {
    auto it = grads.find(name);
    if (it == grads.end()) continue;
    Mat step = scale * it->second;
    if (cfg.momentum > 0.0) {
      auto [vit, fresh] =
          state.velocity.try_emplace(name, Mat::Zero(m.rows(), m.cols()));
      vit->second = cfg.momentum * vit->second + step;
      step = vit->second;
    }
    m -= cfg.learning_rate * step;
  }
}

GradMap average_grads(const ParamStore& params,
                      const std::vector<GradMap>& per_example) {
  GradMap out;
  for (const auto& [name, m] : params.tensors)
    out[name] = Mat::Zero(m.rows(), m.cols());
  for (const auto& g : per_example)
    for (const auto& [name, gm] : g) out[name] += gm;
  if (!per_example.empty())
    for (auto& [name, gm] : out) gm /= double(per_example.size());
  return out;
}

GradMap dp_aggregate(const ParamStore& params,
                     const std::vector<GradMap>& per_example,
                     const DpConfig& dp, RngStream& noise_rng) {
  GradMap out;
  for (const auto& [name, m] : params.tensors)
    out[name] = Mat::Zero(m.rows(), m.cols());

  for (const auto& g : per_example) {
    double sq = 0.0;
    for (const auto& [name, gm] : g) sq += gm.squaredNorm();
    double norm = std::sqrt(sq);
    double scale = norm > dp.clip_norm && norm > 0.0 ? dp.clip_norm / norm : 1.0;
    for (const auto& [name, gm] : g) out[name] += scale * gm;
  }
  double batch = double(std::max<size_t>(per_example.size(), 1));
  double noise_std = dp.clip_norm * dp.noise_multiplier / batch;
  for (auto& [name, gm] : out) {
    gm /= batch;
    if (noise_std > 0.0) {
      for (int c = 0; c < gm.cols(); ++c)
        for (int r = 0; r < gm.rows(); ++r)
          gm(r, c) += noise_std * noise_rng.normal();
    }
  }
  return out;
}

FdReport check_gradients(ParamStore& params,
                         const std::function<double(const ParamStore&)>& loss,
                         const GradMap& analytic, double h) {
  FdReport rep;
  for (auto& [name, m] : params.tensors) {
    auto it = analytic.find(name);
    for (int c = 0; c < m.cols(); ++c) {
      for (int r = 0; r < m.rows(); ++r) {
        double orig = m(r, c);
        m(r, c) = orig + h;
        double up = loss(params);
        m(r, c) = orig - h;
        double down = loss(params);
        m(r, c) = orig;
        double fd = (up - down) / (2.0 * h);
        double g = it == analytic.end() ? 0.0 : it->second(r, c);
        double rel =
            std::abs(g - fd) / std::max({1.0, std::abs(g), std::abs(fd)});
        if (rel > rep.max_rel_err) {
          rep.max_rel_err = rel;
          rep.worst_param = name;
          rep.worst_index = r + c * int(m.rows());
        }
      }
    }
  }
  return rep;
}

// ---- checkpoints ----

void save_checkpoint(const ParamStore& params, const json& meta,
                     const std::string& path) {
  json tensors = json::object();
  for (const auto& [name, m] : params.tensors) {
    json data = json::array();
    for (int c = 0; c < m.cols(); ++c)
      for (int r = 0; r < m.rows(); ++r) data.push_back(m(r, c));
    tensors[name] = {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
  }
  json j{{"format", "dmkit-checkpoint-1"},
         {"seed", params.seed},
         {"tensors", tensors},
         {"meta", meta}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open for writing: " + path);
  out << j.dump() << "\n";
  if (!out) throw ConfigError("write failed: " + path);
}

ParamStore load_checkpoint(const std::string& path, json* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  if (j.value("format", "") != "dmkit-checkpoint-1")
    throw IntegrityError(path + ": not a dmkit checkpoint");
  ParamStore ps;
  ps.seed = j.at("seed").get<uint64_t>();
  for (const auto& [name, t] : j.at("tensors").items()) {
    int rows = t.at("rows").get<int>();
    int cols = t.at("cols").get<int>();
    const auto& data = t.at("data");
    if (int(data.size()) != rows * cols)
      throw IntegrityError(path + ": tensor size mismatch for " + name);
    Mat m(rows, cols);
    int k = 0;
    for (int c = 0; c < cols; ++c)
      for (int r = 0; r < rows; ++r) m(r, c) = data[k++].get<double>();
    ps.tensors[name] = std::move(m);
  }
  if (meta) *meta = j.at("meta");
  return ps;
}

}  // namespace dmkit
