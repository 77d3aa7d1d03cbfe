#include "dmkit/train.hpp"

#include <cmath>
#include <fstream>
#include <functional>

#include "dmkit/errors.hpp"

namespace dmkit {

namespace {

// loss(params-ctx, trajectory) -> scalar Var to minimise, plus the value to
// report. One tape per example so per-example gradients exist for DP.
using ExampleLoss =
    std::function<ad::Var(ModelCtx&, const Trajectory&, RngStream&)>;

std::vector<size_t> shuffled_order(size_t n, RngStream rng) {
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  for (size_t i = n; i > 1; --i) {
    size_t j = size_t(rng.uniform_int(0, int64_t(i) - 1));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

TrainResult sgd_loop(ParamStore& params, const BatchDataset& data,
                     const TrainConfig& cfg, const ExampleLoss& loss) {
  TrainResult result;
  if (data.trajectories.empty() || cfg.epochs == 0) return result;
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");

  RngStream root(cfg.seed);
  SgdState sgd;
  size_t n = data.trajectories.size();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order =
        shuffled_order(n, root.child("shuffle").child(uint64_t(epoch)));
    double epoch_sum = 0.0;
    size_t batch_index = 0;

    for (size_t start = 0; start < n; start += size_t(cfg.batch_size)) {
      size_t end = std::min(start + size_t(cfg.batch_size), n);
      std::vector<GradMap> per_example;
      per_example.reserve(end - start);

      for (size_t k = start; k < end; ++k) {
        const Trajectory& traj = data.trajectories[order[k]];
        ad::Tape tape;
        ModelCtx ctx(tape, params);
        RngStream ex_rng = root.child("mc")
                               .child(uint64_t(epoch))
                               .child(uint64_t(order[k]));
        ad::Var l = loss(ctx, traj, ex_rng);
        double lv = l.val()(0, 0);
        if (!std::isfinite(lv))
          throw TrainError("non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batch_index) +
                           ", trajectory " + std::to_string(order[k]));
        epoch_sum += lv;
        tape.backward(l);
        per_example.push_back(ctx.collect_grads());
      }

      GradMap agg;
      if (cfg.dp) {
        RngStream noise = root.child("dp")
                              .child(uint64_t(epoch))
                              .child(uint64_t(batch_index));
        agg = dp_aggregate(params, per_example, *cfg.dp, noise);
      } else {
        agg = average_grads(params, per_example);
      }
      sgd_step(params, agg, cfg, sgd);
      ++batch_index;
    }
    result.epoch_loss.push_back(epoch_sum / double(n));
  }
  if (!params.all_finite())
    throw TrainError("non-finite parameters after training");
  return result;
}

}  // namespace

TrainResult train_env(RecurrentEnv& env, const BatchDataset& data,
                      const TrainConfig& cfg) {
  if (!validate_dataset(data).empty())
    throw ConfigError("dataset does not conform to its schema");
  if (cfg.epochs > 0 && !data.trajectories.empty())
    env.init = InitModel::fit(data);
  return sgd_loop(env.params, data, cfg,
                  [&env](ModelCtx& ctx, const Trajectory& traj, RngStream&) {
                    ad::Var optimized{nullptr, -1};
                    env.trajectory_losses(ctx, traj, &optimized);
                    return optimized;
                  });
}

TrainResult train_env(CssModel& env, const BatchDataset& data,
                      const TrainConfig& cfg, CssTrainer trainer) {
  if (!validate_dataset(data).empty())
    throw ConfigError("dataset does not conform to its schema");
  bool exact = false;
  switch (trainer) {
    case CssTrainer::Exact:
      exact = true;
      break;
    case CssTrainer::Elbo:
      exact = false;
      break;
    case CssTrainer::Auto: {
      exact = true;
      for (const auto& t : data.trajectories) {
        try {
          env.guard_tractable(t.length());
        } catch (const SizeError&) {
          exact = false;
          break;
        }
      }
      break;
    }
  }
  if (cfg.epochs > 0 && !data.trajectories.empty())
    env.init = InitModel::fit(data);

  if (exact) {
    return sgd_loop(env.params, data, cfg,
                    [&env](ModelCtx& ctx, const Trajectory& traj, RngStream&) {
                      double inv = 1.0 / double(traj.length());
                      return inv * -env.loglik_var(ctx, traj);
                    });
  }
  return sgd_loop(env.params, data, cfg,
                  [&env](ModelCtx& ctx, const Trajectory& traj, RngStream& rng) {
                    double inv = 1.0 / double(traj.length());
                    return inv * -env.elbo_var(ctx, traj, rng);
                  });
}

TrainResult train_env(SvaeModel& env, const BatchDataset& data,
                      const TrainConfig& cfg) {
  if (!validate_dataset(data).empty())
    throw ConfigError("dataset does not conform to its schema");
  if (cfg.epochs > 0 && !data.trajectories.empty())
    env.init = InitModel::fit(data);
  return sgd_loop(env.params, data, cfg,
                  [&env](ModelCtx& ctx, const Trajectory& traj, RngStream& rng) {
                    double inv = 1.0 / double(traj.length());
                    return inv * -env.elbo_var(ctx, traj, rng);
                  });
}

void write_loss_curve(const TrainResult& r, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open for writing: " + path);
  out << "epoch,loss\n";
  out.precision(17);
  for (size_t i = 0; i < r.epoch_loss.size(); ++i)
    out << i << "," << r.epoch_loss[i] << "\n";
}

}  // namespace dmkit
