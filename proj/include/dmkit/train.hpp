#pragma once

#include "dmkit/css.hpp"
#include "dmkit/recurrent_env.hpp"
#include "dmkit/schema.hpp"
#include "dmkit/svae.hpp"

namespace dmkit {

struct TrainResult {
  std::vector<double> epoch_loss;  // mean per-trajectory loss per epoch
};

enum class CssTrainer { Auto, Exact, Elbo };

// All trainers: fit the initialisation model in closed form, then run
// minibatch SGD on the per-trajectory loss. Per-example gradients feed the
// DP aggregator when cfg.dp is set. Bit-reproducible for a fixed seed.
// Aborts with TrainError (epoch/batch in the message) on non-finite loss.
TrainResult train_env(RecurrentEnv& env, const BatchDataset& data,
                      const TrainConfig& cfg);
TrainResult train_env(CssModel& env, const BatchDataset& data,
                      const TrainConfig& cfg,
                      CssTrainer trainer = CssTrainer::Auto);
TrainResult train_env(SvaeModel& env, const BatchDataset& data,
                      const TrainConfig& cfg);

void write_loss_curve(const TrainResult& r, const std::string& path);

}  // namespace dmkit
