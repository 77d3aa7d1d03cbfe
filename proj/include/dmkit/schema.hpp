#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace dmkit {

using Vec = Eigen::VectorXd;

// Ordered feature block: continuous dims first, then binary dims. The
// ordering is part of the on-disk contract.
struct FeatureSpace {
  int continuous_dims = 0;
  int binary_dims = 0;
  std::vector<std::string> names;

  int dim() const { return continuous_dims + binary_dims; }
  bool is_binary(int i) const { return i >= continuous_dims; }
  // -1 when absent
  int index_of(const std::string& name) const;

  // Throws ConfigError on duplicate names, size mismatch or empty space.
  void validate(const std::string& what) const;

  bool operator==(const FeatureSpace&) const = default;
};

struct ActionSpace {
  int cardinality = 2;  // categorical index 0..cardinality-1

  // Factored view as k binary actions exists only when |Y| = 2^k.
  bool has_factored_view() const;
  int factored_bits() const;  // throws ConfigError when no factored view
  std::vector<int> to_bits(int action) const;
  int from_bits(const std::vector<int>& bits) const;

  void validate() const;
  bool operator==(const ActionSpace&) const = default;
};

struct DomainSchema {
  std::string name;
  FeatureSpace static_space;
  FeatureSpace temporal_space;
  ActionSpace action_space;
  int max_length = 1;

  void validate() const;
  bool operator==(const DomainSchema&) const = default;
};

// Built-in domains. Dimensions are fixed: ward_synth has 8 static and 35
// temporal features, icu_synth has 36 static and 24 temporal features.
DomainSchema ward_synth_schema();
DomainSchema icu_synth_schema();
// Resolves "ward_synth" / "icu_synth"; throws ConfigError otherwise.
DomainSchema builtin_schema(const std::string& name);

struct Trajectory {
  Vec static_features;
  std::vector<Vec> observations;  // length T
  std::vector<int> actions;       // length T

  int length() const { return int(observations.size()); }
  bool operator==(const Trajectory& o) const;
};

struct BatchDataset {
  DomainSchema schema;
  std::vector<Trajectory> trajectories;
  uint64_t seed = 0;
  std::string provenance;  // scenario config digest
  std::vector<std::string> hidden_columns;

  size_t size() const { return trajectories.size(); }
  // Temporal dimension actually present in the rows (full minus hidden).
  int visible_temporal_dim() const;
  // The temporal space with hidden columns removed; preserves block order.
  FeatureSpace visible_temporal_space() const;

  bool operator==(const BatchDataset& o) const;
};

// Every schema violation found, as human-readable strings; empty means ok.
// Violations are data, not failures. `hidden` lists temporal columns absent
// from the observation rows.
std::vector<std::string> validate_trajectory(
    const Trajectory& t, const DomainSchema& s,
    const std::vector<std::string>& hidden = {});

std::vector<std::string> validate_dataset(const BatchDataset& d);

// JSONL format: line 1 is a header object {schema, schema_digest, seed,
// provenance, hidden_columns}; each further line is one trajectory
// {"static": [...], "obs": [[...], ...], "act": [...]}. Round trips are
// bit-exact. Throws ParseError (with line number) or IntegrityError when the
// embedded schema does not match its recorded digest.
void serialize_dataset(const BatchDataset& d, const std::string& path);
BatchDataset deserialize_dataset(const std::string& path);

// Wide CSV sidecar: one row per timestep with trajectory id and t.
void export_csv(const BatchDataset& d, const std::string& path);

std::string schema_digest(const DomainSchema& s);

// JSON bindings
void to_json(nlohmann::json& j, const FeatureSpace& f);
void from_json(const nlohmann::json& j, FeatureSpace& f);
void to_json(nlohmann::json& j, const ActionSpace& a);
void from_json(const nlohmann::json& j, ActionSpace& a);
void to_json(nlohmann::json& j, const DomainSchema& s);
void from_json(const nlohmann::json& j, DomainSchema& s);

}  // namespace dmkit
