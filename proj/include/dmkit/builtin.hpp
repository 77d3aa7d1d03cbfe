#pragma once

#include <memory>
#include <optional>

#include "dmkit/css.hpp"
#include "dmkit/recurrent_env.hpp"
#include "dmkit/scenario.hpp"
#include "dmkit/svae.hpp"

namespace dmkit {

// Hand-specified ground-truth dynamics standing in for the (private) real
// datasets: three latent severity stages, sparse tridiagonal transitions,
// drift towards recovery as treatment intensity rises, emissions that
// depend on both stage and statics.
CssModel ward_truth_css();
CssModel icu_truth_css();

// Environment whose binary temporal feature 0 copies bit 0 of the previous
// action (near-deterministically); used for constructed-separable
// prediction tasks. kinds: tforce | balanced | css | svae.
std::shared_ptr<EnvModel> action_copy_env(const std::string& kind,
                                          const DomainSchema& schema);

// Fresh seeded model of the given kind on the schema, untrained.
std::shared_ptr<EnvModel> seeded_env(const std::string& kind,
                                     const DomainSchema& schema,
                                     uint64_t init_seed,
                                     const nlohmann::json& hyper = {});

// Env config: {kind, builtin?, checkpoint?, hyperparameters?, attention?}.
std::shared_ptr<EnvModel> make_env(const nlohmann::json& cfg,
                                   const DomainSchema& schema);

// Scenario config: {domain, environment, policy, confounding, horizon,
// min_len, seed}. domain is a builtin name or an inline schema object.
Scenario load_scenario(const nlohmann::json& cfg,
                       std::optional<uint64_t> seed_override = std::nullopt);

// Single linear component at beta = 0: uniform over actions.
PolicySpec uniform_policy(const DomainSchema& schema);

// Three-component mixture (guideline tree, linear, recurrent scorer).
PolicySpec demo_mixture_policy(const DomainSchema& schema, uint64_t seed);

// Checkpoint round trip for environments (parameters + enough metadata to
// rebuild the model).
void save_env_checkpoint(const EnvModel& env, const TrainConfig& cfg,
                         const std::string& path);
std::shared_ptr<EnvModel> load_env_checkpoint(const std::string& path);

}  // namespace dmkit
