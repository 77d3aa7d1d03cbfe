#pragma once

#include <string>
#include <vector>

#include "dmkit/schema.hpp"
#include "json.hpp"

namespace dmkit {

// How the discrete-latent transition attends over past (state, action)
// pairs. Lags are counted back from t: lag 1 is (z_{t-1}, y_{t-1}).
struct AttentionSpec {
  enum class Kind { Markov, Fixed, Learned };
  Kind kind = Kind::Markov;
  std::vector<double> weights;  // Fixed: weight per lag, lag 1 first
  int window = 1;               // Learned: softmax over this many lags

  // Longest lag that can carry weight.
  int effective_window() const;
  bool is_markov() const { return kind == Kind::Markov; }
  void validate() const;

  nlohmann::json to_json() const;
  static AttentionSpec from_json(const nlohmann::json& j);
};

// Weights over lags 1..t-1 for a transition at time t >= 2. They are
// nonnegative and sum to 1; lags beyond the spec's window get zero. Fixed
// vectors are renormalised over the lags actually available. For a learned
// spec the softmax runs over the first min(window, t-1) logits.
std::vector<double> css_attention(const AttentionSpec& spec, int t,
                                  const Vec* learned_logits = nullptr);

}  // namespace dmkit
