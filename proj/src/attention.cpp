#include "dmkit/attention.hpp"

#include <cmath>

#include "dmkit/errors.hpp"

namespace dmkit {

int AttentionSpec::effective_window() const {
  switch (kind) {
    case Kind::Markov:
      return 1;
    case Kind::Fixed:
      return int(weights.size());
    case Kind::Learned:
      return window;
  }
  return 1;
}

void AttentionSpec::validate() const {
  if (kind == Kind::Fixed) {
    if (weights.empty()) throw ConfigError("fixed attention needs >= 1 weight");
    double total = 0.0;
    for (double w : weights) {
      if (w < 0.0 || !std::isfinite(w))
        throw ConfigError("attention weights must be nonnegative and finite");
      total += w;
    }
    if (total <= 0.0) throw ConfigError("attention weights sum to zero");
  }
  if (kind == Kind::Learned && window < 1)
    throw ConfigError("learned attention window must be >= 1");
}

std::vector<double> css_attention(const AttentionSpec& spec, int t,
                                  const Vec* learned_logits) {
  if (t < 2) throw ConfigError("attention defined for t >= 2 only");
  int lags = t - 1;
  std::vector<double> alpha(size_t(lags), 0.0);

  switch (spec.kind) {
    case AttentionSpec::Kind::Markov:
      alpha[0] = 1.0;
      break;
    case AttentionSpec::Kind::Fixed: {
      spec.validate();
      int avail = std::min<int>(lags, int(spec.weights.size()));
      double total = 0.0;
      for (int i = 0; i < avail; ++i) total += spec.weights[size_t(i)];
      if (total <= 0.0)
        throw ConfigError("attention weights over available lags sum to zero");
      for (int i = 0; i < avail; ++i)
        alpha[size_t(i)] = spec.weights[size_t(i)] / total;
      break;
    }
    case AttentionSpec::Kind::Learned: {
      if (learned_logits == nullptr)
        throw ConfigError("learned attention needs logits");
      int avail = std::min(lags, spec.window);
      if (learned_logits->size() < avail)
        throw ConfigError("attention logits shorter than window");
      double m = -1e300;
      for (int i = 0; i < avail; ++i) m = std::max(m, (*learned_logits)[i]);
      double total = 0.0;
      for (int i = 0; i < avail; ++i) {
        alpha[size_t(i)] = std::exp((*learned_logits)[i] - m);
        total += alpha[size_t(i)];
      }
      for (int i = 0; i < avail; ++i) alpha[size_t(i)] /= total;
      break;
    }
  }
  return alpha;
}

nlohmann::json AttentionSpec::to_json() const {
  switch (kind) {
    case Kind::Markov:
      return {{"kind", "markov"}};
    case Kind::Fixed:
      return {{"kind", "fixed"}, {"weights", weights}};
    case Kind::Learned:
      return {{"kind", "learned"}, {"window", window}};
  }
  return {};
}

AttentionSpec AttentionSpec::from_json(const nlohmann::json& j) {
  AttentionSpec s;
  std::string kind = j.at("kind").get<std::string>();
  if (kind == "markov") {
    s.kind = Kind::Markov;
  } else if (kind == "fixed") {
    s.kind = Kind::Fixed;
    j.at("weights").get_to(s.weights);
  } else if (kind == "learned") {
    s.kind = Kind::Learned;
    j.at("window").get_to(s.window);
  } else {
    throw ConfigError("unknown attention kind: " + kind);
  }
  s.validate();
  return s;
}

}  // namespace dmkit
