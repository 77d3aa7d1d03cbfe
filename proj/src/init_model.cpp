#include "dmkit/init_model.hpp"

#include <algorithm>
#include <cmath>

#include "dmkit/errors.hpp"

namespace dmkit {

namespace {
constexpr double kProbFloor = 1e-12;

double clamp_prob(double p) {
  return std::min(std::max(p, kProbFloor), 1.0 - kProbFloor);
}
}  // namespace

Vec InitModel::sample_static(RngStream& rng) const {
  int nc = static_space.continuous_dims;
  int nb = static_space.binary_dims;
  Vec out(nc + nb);
  if (nc > 0) {
    Vec xi(nc);
    for (int i = 0; i < nc; ++i) xi[i] = rng.normal();
    out.head(nc) = static_mean + static_cov_factor * xi;
  }
  for (int i = 0; i < nb; ++i)
    out[nc + i] = rng.bernoulli(clamp_prob(static_bin_p[i])) ? 1.0 : 0.0;
  return out;
}

Vec InitModel::sample_first(const Vec& x_s, RngStream& rng) const {
  int nc = temporal_space.continuous_dims;
  int nb = temporal_space.binary_dims;
  Vec design(1 + x_s.size());
  design[0] = 1.0;
  design.tail(x_s.size()) = x_s;

  Vec out(nc + nb);
  if (nc > 0) {
    Vec mean = first_cont_coef * design;
    for (int i = 0; i < nc; ++i) {
      double sd = std::exp(0.5 * std::min(std::max(first_cont_logvar[i], -10.0), 10.0));
      out[i] = mean[i] + sd * rng.normal();
    }
  }
  if (nb > 0) {
    Vec p = first_bin_coef * design;
    for (int i = 0; i < nb; ++i)
      out[nc + i] = rng.bernoulli(clamp_prob(p[i])) ? 1.0 : 0.0;
  }
  return out;
}

Vec InitModel::static_mean_full() const {
  Vec m(static_space.dim());
  m.head(static_space.continuous_dims) = static_mean;
  m.tail(static_space.binary_dims) = static_bin_p;
  return m;
}

InitModel InitModel::neutral(const DomainSchema& schema) {
  InitModel m;
  m.static_space = schema.static_space;
  m.temporal_space = schema.temporal_space;
  int sc = schema.static_space.continuous_dims;
  int sb = schema.static_space.binary_dims;
  int tc = schema.temporal_space.continuous_dims;
  int tb = schema.temporal_space.binary_dims;
  m.static_mean = Vec::Zero(sc);
  m.static_cov_factor = Mat::Identity(sc, sc);
  m.static_bin_p = Vec::Constant(sb, 0.5);
  m.first_cont_coef = Mat::Zero(tc, 1 + sc + sb);
  m.first_cont_logvar = Vec::Zero(tc);
  m.first_bin_coef = Mat::Zero(tb, 1 + sc + sb);
  m.first_bin_coef.col(0).setConstant(0.5);
  return m;
}

InitModel InitModel::fit(const BatchDataset& data) {
  if (!data.hidden_columns.empty())
    throw ConfigError("cannot fit an initialisation model on a projected dataset");
  const DomainSchema& schema = data.schema;
  InitModel m = neutral(schema);
  size_t n = data.trajectories.size();
  if (n == 0) return m;

  int sc = schema.static_space.continuous_dims;
  int sb = schema.static_space.binary_dims;
  int sd = sc + sb;
  int tc = schema.temporal_space.continuous_dims;
  int tb = schema.temporal_space.binary_dims;

  // statics: empirical moments
  if (sc > 0) {
    Vec mean = Vec::Zero(sc);
    for (const auto& t : data.trajectories) mean += t.static_features.head(sc);
    mean /= double(n);
    Mat cov = Mat::Zero(sc, sc);
    for (const auto& t : data.trajectories) {
      Vec d = t.static_features.head(sc) - mean;
      cov += d * d.transpose();
    }
    cov /= double(std::max<size_t>(n, 1));
    cov += 1e-9 * Mat::Identity(sc, sc);
    m.static_mean = mean;
    m.static_cov_factor = Eigen::LLT<Mat>(cov).matrixL();
  }
  for (int i = 0; i < sb; ++i) {
    double p = 0.0;
    for (const auto& t : data.trajectories) p += t.static_features[sc + i];
    m.static_bin_p[i] = clamp_prob(p / double(n));
  }

  // first observation via ridge least squares on [1; x_s]
  Mat phi(n, 1 + sd);
  for (size_t i = 0; i < n; ++i) {
    phi(int(i), 0) = 1.0;
    phi.row(int(i)).tail(sd) = data.trajectories[i].static_features.transpose();
  }
  Mat gram = phi.transpose() * phi + 1e-6 * Mat::Identity(1 + sd, 1 + sd);
  Eigen::LDLT<Mat> solver(gram);

  if (tc > 0) {
    Mat y(n, tc);
    for (size_t i = 0; i < n; ++i)
      y.row(int(i)) = data.trajectories[i].observations[0].head(tc).transpose();
    Mat coef = solver.solve(phi.transpose() * y);  // (1+S) x tc
    m.first_cont_coef = coef.transpose();
    Mat resid = y - phi * coef;
    for (int j = 0; j < tc; ++j) {
      double var = resid.col(j).squaredNorm() / double(n);
      m.first_cont_logvar[j] = std::log(std::max(var, 1e-8));
    }
  }
  if (tb > 0) {
    Mat y(n, tb);
    for (size_t i = 0; i < n; ++i)
      y.row(int(i)) = data.trajectories[i].observations[0].tail(tb).transpose();
    Mat coef = solver.solve(phi.transpose() * y);
    m.first_bin_coef = coef.transpose();
  }
  return m;
}

nlohmann::json InitModel::to_json() const {
  auto mat_json = [](const Mat& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (int r = 0; r < m.rows(); ++r) {
      nlohmann::json row = nlohmann::json::array();
      for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
      rows.push_back(row);
    }
    return rows;
  };
  auto vec_json = [](const Vec& v) {
    nlohmann::json a = nlohmann::json::array();
    for (int i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
  };
  return nlohmann::json{{"static_space", static_space},
                        {"temporal_space", temporal_space},
                        {"static_mean", vec_json(static_mean)},
                        {"static_cov_factor", mat_json(static_cov_factor)},
                        {"static_bin_p", vec_json(static_bin_p)},
                        {"first_cont_coef", mat_json(first_cont_coef)},
                        {"first_cont_logvar", vec_json(first_cont_logvar)},
                        {"first_bin_coef", mat_json(first_bin_coef)}};
}

InitModel InitModel::from_json(const nlohmann::json& j) {
  auto mat_from = [](const nlohmann::json& rows) {
    int r = int(rows.size());
    int c = r > 0 ? int(rows[0].size()) : 0;
    Mat m(r, c);
    for (int i = 0; i < r; ++i)
      for (int k = 0; k < c; ++k) m(i, k) = rows[i][k].get<double>();
    return m;
  };
  auto vec_from = [](const nlohmann::json& a) {
    Vec v(a.size());
    for (size_t i = 0; i < a.size(); ++i) v[int(i)] = a[i].get<double>();
    return v;
  };
  InitModel m;
  j.at("static_space").get_to(m.static_space);
  j.at("temporal_space").get_to(m.temporal_space);
  m.static_mean = vec_from(j.at("static_mean"));
  m.static_cov_factor = mat_from(j.at("static_cov_factor"));
  m.static_bin_p = vec_from(j.at("static_bin_p"));
  m.first_cont_coef = mat_from(j.at("first_cont_coef"));
  m.first_cont_logvar = vec_from(j.at("first_cont_logvar"));
  m.first_bin_coef = mat_from(j.at("first_bin_coef"));
  return m;
}

}  // namespace dmkit
