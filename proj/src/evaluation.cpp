#include "dmkit/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "dmkit/digest.hpp"
#include "dmkit/errors.hpp"

namespace dmkit {

using nlohmann::json;

json EvalConfig::to_json() const {
  return {{"epochs", epochs},
          {"hidden", hidden},
          {"learning_rate", learning_rate},
          {"momentum", momentum},
          {"batch_size", batch_size},
          {"seed", seed},
          {"min_trajectories", min_trajectories}};
}

std::string EvalConfig::digest() const { return digest_json(to_json()); }

json MetricReport::to_json() const {
  return {{"metric", metric}, {"value", value},
          {"ci", ci},         {"seeds", seeds},
          {"config_digest", config_digest},
          {"extra", extra}};
}

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw ConfigError("auroc needs matched, nonempty scores and labels");
  size_t n_pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw ConfigError("auroc labels must be 0/1");
    n_pos += size_t(l);
  }
  size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw ConfigError("degenerate labels: AUROC undefined");

  std::vector<size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  // tie-averaged ranks
  std::vector<double> rank(scores.size());
  size_t i = 0;
  while (i < idx.size()) {
    size_t j = i;
    while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    double r = 0.5 * double(i + j) + 1.0;
    for (size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  double rank_sum = 0.0;
  for (size_t k = 0; k < scores.size(); ++k)
    if (labels[k] == 1) rank_sum += rank[k];
  double u = rank_sum - double(n_pos) * double(n_pos + 1) / 2.0;
  return u / (double(n_pos) * double(n_neg));
}

// ---- shared recurrent classifier ----

namespace {

struct Classifier {
  GruSpec gru;
  MlpSpec out;
  ParamStore params;

  static Classifier make(int input_dim, int hidden, int out_dim, uint64_t seed) {
    Classifier c;
    c.gru.prefix = "gru";
    c.gru.input = input_dim;
    c.gru.hidden = hidden;
    c.out.prefix = "out";
    c.out.dims = {hidden, out_dim};
    c.params.seed = seed;
    c.gru.init(c.params);
    c.out.init(c.params);
    return c;
  }
};

struct LabelledSeq {
  std::vector<Vec> tokens;
  std::vector<int> positions;  // token indices carrying a label
  std::vector<double> labels;
};

// tokens (x_t, one-hot y_t); label at position t predicts target at t+1
std::vector<LabelledSeq> feature_task(const BatchDataset& d, int target_idx) {
  std::vector<LabelledSeq> out;
  int Y = d.schema.action_space.cardinality;
  for (const auto& traj : d.trajectories) {
    if (traj.length() < 2) continue;
    LabelledSeq s;
    for (int t = 0; t < traj.length() - 1; ++t) {
      Vec u = Vec::Zero(traj.observations[size_t(t)].size() + Y);
      u.head(traj.observations[size_t(t)].size()) = traj.observations[size_t(t)];
      u[traj.observations[size_t(t)].size() + traj.actions[size_t(t)]] = 1.0;
      s.tokens.push_back(std::move(u));
      s.positions.push_back(t);
      s.labels.push_back(traj.observations[size_t(t + 1)][target_idx]);
    }
    out.push_back(std::move(s));
  }
  return out;
}

// tokens (x_t, one-hot y_{t-1}); label at position t is y_t, either raw
// (binary action spaces) or one-vs-rest against a chosen class
std::vector<LabelledSeq> action_task(const BatchDataset& d, int rest_class) {
  std::vector<LabelledSeq> out;
  int Y = d.schema.action_space.cardinality;
  for (const auto& traj : d.trajectories) {
    LabelledSeq s;
    for (int t = 0; t < traj.length(); ++t) {
      Vec u = Vec::Zero(traj.observations[size_t(t)].size() + Y);
      u.head(traj.observations[size_t(t)].size()) = traj.observations[size_t(t)];
      if (t > 0) u[traj.observations[size_t(t)].size() + traj.actions[size_t(t - 1)]] = 1.0;
      s.tokens.push_back(std::move(u));
      s.positions.push_back(t);
      int y = traj.actions[size_t(t)];
      s.labels.push_back(rest_class < 0 ? double(y)
                                        : double(y == rest_class));
    }
    out.push_back(std::move(s));
  }
  return out;
}

ad::Var sequence_loss(ModelCtx& ctx, const Classifier& clf,
                      const LabelledSeq& s) {
  using namespace ad;
  Var h = clf.gru.h0(ctx);
  Var loss = ctx.c(0.0);
  size_t li = 0;
  for (size_t t = 0; t < s.tokens.size(); ++t) {
    h = clf.gru.step(ctx, ctx.c(s.tokens[t]), h);
    if (li < s.positions.size() && size_t(s.positions[li]) == t) {
      Var logit = clf.out.forward(ctx, h);
      Mat target(1, 1);
      target(0, 0) = s.labels[li];
      loss = loss + bernoulli_nll(logit, target);
      ++li;
    }
  }
  return (1.0 / double(std::max<size_t>(s.positions.size(), 1))) * loss;
}

std::vector<double> sequence_scores(const Classifier& clf, const LabelledSeq& s) {
  ad::Tape tape;
  ModelCtx ctx(tape, clf.params);
  ad::Var h = clf.gru.h0(ctx);
  std::vector<double> out;
  size_t li = 0;
  for (size_t t = 0; t < s.tokens.size(); ++t) {
    h = clf.gru.step(ctx, ctx.c(s.tokens[t]), h);
    if (li < s.positions.size() && size_t(s.positions[li]) == t) {
      ad::Var logit = clf.out.forward(ctx, h);
      out.push_back(ad::detail::sigmoid1(logit.val()(0, 0)));
      ++li;
    }
  }
  return out;
}

void train_classifier(Classifier& clf, const std::vector<LabelledSeq>& data,
                      const EvalConfig& cfg) {
  if (data.empty()) throw ConfigError("no training sequences");
  TrainConfig tc;
  tc.learning_rate = cfg.learning_rate;
  tc.momentum = cfg.momentum;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.seed = cfg.seed;

  RngStream root(cfg.seed);
  SgdState sgd;
  size_t n = data.size();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    RngStream sh = root.child("shuffle").child(uint64_t(epoch));
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (size_t i = n; i > 1; --i)
      std::swap(order[i - 1], order[size_t(sh.uniform_int(0, int64_t(i) - 1))]);

    for (size_t start = 0; start < n; start += size_t(cfg.batch_size)) {
      size_t end = std::min(start + size_t(cfg.batch_size), n);
      std::vector<GradMap> grads;
      for (size_t k = start; k < end; ++k) {
        ad::Tape tape;
        ModelCtx ctx(tape, clf.params);
        ad::Var l = sequence_loss(ctx, clf, data[order[k]]);
        if (!std::isfinite(l.val()(0, 0)))
          throw TrainError("non-finite classifier loss at epoch " +
                           std::to_string(epoch));
        tape.backward(l);
        grads.push_back(ctx.collect_grads());
      }
      GradMap agg = average_grads(clf.params, grads);
      sgd_step(clf.params, agg, tc, sgd);
    }
  }
}

void check_same_visible(const BatchDataset& a, const BatchDataset& b) {
  if (a.visible_temporal_space().names != b.visible_temporal_space().names ||
      a.schema.static_space.names != b.schema.static_space.names ||
      a.schema.action_space.cardinality != b.schema.action_space.cardinality)
    throw ConfigError("datasets do not share a visible schema");
}

}  // namespace

MetricReport predictive_score(const BatchDataset& synthetic,
                              const BatchDataset& real,
                              const std::string& target,
                              const EvalConfig& cfg) {
  check_same_visible(synthetic, real);

  std::vector<LabelledSeq> train, test;
  if (target == "action") {
    if (synthetic.schema.action_space.cardinality != 2)
      throw ConfigError(
          "action target needs a binary action space; use action:<k> for "
          "one-vs-rest");
    train = action_task(synthetic, -1);
    test = action_task(real, -1);
  } else if (target.rfind("action:", 0) == 0) {
    int k = std::stoi(target.substr(7));
    if (k < 0 || k >= synthetic.schema.action_space.cardinality)
      throw ConfigError("one-vs-rest class outside the action space");
    train = action_task(synthetic, k);
    test = action_task(real, k);
  } else {
    FeatureSpace visible = synthetic.visible_temporal_space();
    int idx = visible.index_of(target);
    if (idx < 0) throw ConfigError("unknown target feature: " + target);
    if (!visible.is_binary(idx))
      throw ConfigError("predictive target must be binary (AUROC contract): " +
                        target);
    train = feature_task(synthetic, idx);
    test = feature_task(real, idx);
  }
  if (train.empty() || test.empty())
    throw ConfigError("not enough data for the predictive score");

  int input_dim = int(train[0].tokens[0].size());
  Classifier clf = Classifier::make(input_dim, cfg.hidden, 1, cfg.seed);
  train_classifier(clf, train, cfg);

  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& s : test) {
    auto sc = sequence_scores(clf, s);
    for (size_t i = 0; i < sc.size(); ++i) {
      scores.push_back(sc[i]);
      labels.push_back(int(s.labels[i]));
    }
  }

  MetricReport r;
  r.metric = "predictive";
  r.value = auroc(scores, labels);
  r.seeds = {cfg.seed};
  r.config_digest = cfg.digest();
  r.extra = {{"target", target}, {"n_eval", scores.size()}};
  return r;
}

MetricReport discriminative_score(const BatchDataset& synthetic,
                                  const BatchDataset& real,
                                  const EvalConfig& cfg) {
  check_same_visible(synthetic, real);
  if (int(synthetic.size()) < cfg.min_trajectories ||
      int(real.size()) < cfg.min_trajectories)
    throw ConfigError("discriminative score needs >= " +
                      std::to_string(cfg.min_trajectories) +
                      " trajectories per dataset");

  auto tokens_of = [](const BatchDataset& d) {
    std::vector<LabelledSeq> out;
    int Y = d.schema.action_space.cardinality;
    for (const auto& traj : d.trajectories) {
      LabelledSeq s;
      for (int t = 0; t < traj.length(); ++t) {
        Vec u = Vec::Zero(traj.observations[size_t(t)].size() + Y);
        u.head(traj.observations[size_t(t)].size()) =
            traj.observations[size_t(t)];
        u[traj.observations[size_t(t)].size() + traj.actions[size_t(t)]] = 1.0;
        s.tokens.push_back(std::move(u));
      }
      // single label read at the final token
      s.positions.push_back(traj.length() - 1);
      out.push_back(std::move(s));
    }
    return out;
  };

  auto synth_seqs = tokens_of(synthetic);
  auto real_seqs = tokens_of(real);

  std::vector<LabelledSeq> train, test;
  std::vector<int> test_labels;
  auto split = [&](std::vector<LabelledSeq>& seqs, double label) {
    size_t half = seqs.size() / 2;
    for (size_t i = 0; i < seqs.size(); ++i) {
      seqs[i].labels = {label};
      if (i < half) {
        train.push_back(seqs[i]);
      } else {
        test.push_back(seqs[i]);
        test_labels.push_back(int(label));
      }
    }
  };
  split(real_seqs, 1.0);
  split(synth_seqs, 0.0);

  int input_dim = int(train[0].tokens[0].size());
  Classifier clf = Classifier::make(input_dim, cfg.hidden, 1, cfg.seed);
  train_classifier(clf, train, cfg);

  size_t correct = 0;
  for (size_t i = 0; i < test.size(); ++i) {
    double p = sequence_scores(clf, test[i])[0];
    int pred = p >= 0.5 ? 1 : 0;
    if (pred == test_labels[i]) ++correct;
  }
  double acc = double(correct) / double(test.size());

  MetricReport r;
  r.metric = "discriminative";
  r.value = std::abs(acc - 0.5);
  r.seeds = {cfg.seed};
  r.config_digest = cfg.digest();
  r.extra = {{"test_accuracy", acc}, {"n_test", test.size()}};
  return r;
}

ActionMatch action_match(const PolicySpec& a, const PolicySpec& b,
                         const BatchDataset& probes) {
  if (!probes.hidden_columns.empty())
    throw ConfigError("action matching needs unprojected probe trajectories");
  const DomainSchema& s = probes.schema;
  a.validate(s);
  b.validate(s);

  ActionMatch m;
  size_t count = 0;
  for (const auto& traj : probes.trajectories) {
    PolicyHistory h;
    h.static_features = traj.static_features;
    for (int t = 1; t <= traj.length(); ++t) {
      h.observations.assign(traj.observations.begin(),
                            traj.observations.begin() + t);
      h.actions.assign(traj.actions.begin(), traj.actions.begin() + (t - 1));
      Vec da = policy_distribution(a, s, h);
      Vec db = policy_distribution(b, s, h);
      int arg_a, arg_b;
      da.maxCoeff(&arg_a);
      db.maxCoeff(&arg_b);
      m.agreement += arg_a == arg_b ? 1.0 : 0.0;
      m.mean_tv += 0.5 * (da - db).cwiseAbs().sum();
      ++count;
    }
  }
  if (count == 0) throw ConfigError("no probe prefixes");
  m.agreement /= double(count);
  m.mean_tv /= double(count);
  return m;
}

json compare_ground_truth(const GroundTruth& theta_hat, const GroundTruth& theta) {
  const json& a = theta_hat.theta;
  const json& b = theta.theta;

  auto incomparable = [](const std::string& why) {
    return json{{"comparable", false}, {"reason", why}};
  };
  if (a.at("components").size() != b.at("components").size())
    return incomparable("component count differs");

  json comps = json::array();
  for (size_t i = 0; i < a.at("components").size(); ++i) {
    const json& ca = a.at("components")[i];
    const json& cb = b.at("components")[i];
    if (ca.at("decider").at("kind") != cb.at("decider").at("kind"))
      return incomparable("decider kind differs at component " +
                          std::to_string(i));

    double beta_err = std::abs(ca.at("beta").get<double>() -
                               cb.at("beta").get<double>());
    auto lag_of = [](const json& c) {
      return c.at("lag").is_string() ? -1 : c.at("lag").get<int>();
    };
    int la = lag_of(ca), lb = lag_of(cb);

    std::set<std::string> ma(ca.at("mask_temporal").begin(),
                             ca.at("mask_temporal").end());
    std::set<std::string> mb(cb.at("mask_temporal").begin(),
                             cb.at("mask_temporal").end());
    std::set<std::string> inter, uni;
    std::set_intersection(ma.begin(), ma.end(), mb.begin(), mb.end(),
                          std::inserter(inter, inter.begin()));
    std::set_union(ma.begin(), ma.end(), mb.begin(), mb.end(),
                   std::inserter(uni, uni.begin()));
    double jaccard = uni.empty() ? 1.0 : double(inter.size()) / double(uni.size());

    comps.push_back({{"beta_error", beta_err},
                     {"lag_delta", (la < 0 || lb < 0) && la != lb
                                       ? json("incomparable")
                                       : json(std::abs(la - lb))},
                     {"mask_jaccard", jaccard}});
  }

  double l1 = 0.0;
  const json& wa = a.at("weights");
  const json& wb = b.at("weights");
  for (size_t i = 0; i < wa.size(); ++i)
    l1 += std::abs(wa[i].get<double>() - wb[i].get<double>());

  return {{"comparable", true}, {"weight_l1", l1}, {"components", comps}};
}

size_t project2d(const BatchDataset& real, const BatchDataset& synthetic,
                 const std::string& out_path) {
  check_same_visible(real, synthetic);

  std::vector<Vec> points;
  std::vector<int> source;  // 0 real, 1 synthetic
  for (const auto& traj : real.trajectories)
    for (const auto& x : traj.observations) {
      points.push_back(x);
      source.push_back(0);
    }
  for (const auto& traj : synthetic.trajectories)
    for (const auto& x : traj.observations) {
      points.push_back(x);
      source.push_back(1);
    }
  if (points.size() < 3)
    throw ConfigError("projection needs at least 3 points");

  int dim = int(points[0].size());
  Vec mean = Vec::Zero(dim);
  for (const auto& p : points) mean += p;
  mean /= double(points.size());

  Mat cov = Mat::Zero(dim, dim);
  for (const auto& p : points) {
    Vec d = p - mean;
    cov += d * d.transpose();
  }
  cov /= double(points.size() - 1);

  Eigen::SelfAdjointEigenSolver<Mat> es(cov);
  // top-2 components, deterministic sign (largest |entry| positive)
  Mat basis = Mat::Zero(dim, 2);
  for (int c = 0; c < std::min(2, dim); ++c) {
    Vec v = es.eigenvectors().col(dim - 1 - c);
    int imax;
    v.cwiseAbs().maxCoeff(&imax);
    if (v[imax] < 0) v = -v;
    basis.col(c) = v;
  }

  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw ConfigError("cannot open for writing: " + out_path);
  out << "x,y,source\n";
  out.precision(17);
  for (size_t i = 0; i < points.size(); ++i) {
    Vec p = basis.transpose() * (points[i] - mean);
    out << p[0] << "," << p[1] << ","
        << (source[i] == 0 ? "real" : "synthetic") << "\n";
  }
  return points.size();
}

}  // namespace dmkit
