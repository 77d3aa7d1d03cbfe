#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dmkit/nn.hpp"
#include "dmkit/rng.hpp"
#include "dmkit/schema.hpp"
#include "json.hpp"

namespace dmkit {

// Full-feature history available to the policy at decision time t:
// observations x_1..x_t and actions y_1..y_{t-1}.
struct PolicyHistory {
  Vec static_features;
  std::vector<Vec> observations;
  std::vector<int> actions;
  int t() const { return int(observations.size()); }
};

// Feature subset a component is allowed to read. Masked-out features are
// dropped, not zeroed: deciders are built against the reduced dimension.
struct Mask {
  std::vector<int> temporal_idx;  // ascending indices into the temporal space
  std::vector<int> static_idx;

  static Mask all(const DomainSchema& s);
  static Mask from_names(const DomainSchema& s,
                         const std::vector<std::string>& temporal,
                         const std::vector<std::string>& statics);
  std::vector<std::string> temporal_names(const DomainSchema& s) const;
  std::vector<std::string> static_names(const DomainSchema& s) const;
  double rationality(const DomainSchema& s) const;
  void validate(const DomainSchema& s) const;
};

// What a decider actually sees after windowing + masking.
struct ComponentView {
  Vec static_masked;
  std::vector<Vec> obs;        // oldest first, masked
  std::vector<int> prev_acts;  // per obs token: preceding action or -1
  int n_actions = 0;
  int lag = 1;  // 0 = full
};

struct TreeSplit {
  int feature = 0;  // index into [static_masked; current obs]
  double threshold = 0.0;
  int left = -1;  // >= 0: split index; < 0: leaf index = -child - 1
  int right = -2;
};

struct TreeDecider {
  std::vector<TreeSplit> splits;  // empty tree = single leaf 0
  std::vector<Vec> leaves;        // score vectors over Y
};

struct LinearDecider {
  Mat W;  // |Y| x (S_m + lag * (D_m + |Y|))
  Vec b;
};

struct RecurrentDecider {
  GruSpec gru;  // input = D_m + |Y|
  ParamStore params;  // gru tensors + "out.W", "out.b"
};

struct BaseDecider {
  enum class Kind { Tree, Linear, Recurrent };
  Kind kind = Kind::Tree;
  TreeDecider tree;
  LinearDecider linear;
  RecurrentDecider recurrent;

  Vec scores(const ComponentView& view) const;
};

struct PolicyComponent {
  BaseDecider decider;
  Mask mask;
  int lag = 1;  // >= 1, or 0 meaning "full"
  double beta = 1.0;
};

struct PolicySpec {
  std::vector<PolicyComponent> components;
  Vec weights;  // open simplex; normalised at construction
  // optional committee mode: one component drawn per trajectory instead of
  // mixing per step
  bool committee = false;

  void validate(const DomainSchema& s) const;
};

// Keeps exactly the last `lag` observations and the last `lag` actions
// (everything, when lag = 0 meaning "full").
PolicyHistory window_history(const PolicyHistory& h, int lag);

// Projects the windowed history onto the mask; dimensionality reduces.
ComponentView apply_mask(const PolicyHistory& windowed, const Mask& mask,
                         const DomainSchema& s, int lag);

// softmax(beta * q) over the action space.
Vec component_distribution(const PolicyComponent& c, const DomainSchema& s,
                           const PolicyHistory& h);

// Mixture sum_i w_i * component_i.
Vec policy_distribution(const PolicySpec& p, const DomainSchema& s,
                        const PolicyHistory& h);

// Draw an action; committee_component >= 0 restricts to that component.
int sample_action(const PolicySpec& p, const DomainSchema& s,
                  const PolicyHistory& h, RngStream& rng,
                  int committee_component = -1);

struct MarkovianityResult {
  int lag = 0;
  bool bounded = false;  // false: no lag <= budget explains the policy
};

// Falsification probe: the smallest lag L such that randomised
// perturbations strictly older than the L-window never move the action
// distribution by more than 1e-9 in total variation.
MarkovianityResult measure_markovianity(const PolicySpec& p,
                                        const DomainSchema& s, int budget,
                                        int n_probes, uint64_t seed);

// ---- ground truth export ----

struct GroundTruth {
  nlohmann::json theta;  // full parameterisation
  std::string digest;    // structural skeleton digest
};

GroundTruth export_ground_truth(const PolicySpec& p, const DomainSchema& s);
// IntegrityError when the stored digest does not match the skeleton.
PolicySpec load_ground_truth(const GroundTruth& g, const DomainSchema& s);

void save_ground_truth(const GroundTruth& g, const std::string& path);
GroundTruth read_ground_truth(const std::string& path);

nlohmann::json policy_to_json(const PolicySpec& p, const DomainSchema& s);
PolicySpec policy_from_json(const nlohmann::json& j, const DomainSchema& s);

}  // namespace dmkit
