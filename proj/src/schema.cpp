#include "dmkit/schema.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "dmkit/digest.hpp"
#include "dmkit/errors.hpp"

namespace dmkit {

using nlohmann::json;

int FeatureSpace::index_of(const std::string& name) const {
  auto it = std::find(names.begin(), names.end(), name);
  return it == names.end() ? -1 : int(it - names.begin());
}

void FeatureSpace::validate(const std::string& what) const {
  if (continuous_dims < 0 || binary_dims < 0)
    throw ConfigError(what + ": negative dimension count");
  if (dim() < 1) throw ConfigError(what + ": total dimension must be >= 1");
  if (int(names.size()) != dim())
    throw ConfigError(what + ": names length " + std::to_string(names.size()) +
                      " != dimension " + std::to_string(dim()));
  std::set<std::string> uniq(names.begin(), names.end());
  if (int(uniq.size()) != dim())
    throw ConfigError(what + ": feature names must be unique");
}

bool ActionSpace::has_factored_view() const {
  return cardinality >= 2 && (cardinality & (cardinality - 1)) == 0;
}

int ActionSpace::factored_bits() const {
  if (!has_factored_view())
    throw ConfigError("action space of size " + std::to_string(cardinality) +
                      " has no factored binary view");
  int k = 0;
  for (int c = cardinality; c > 1; c >>= 1) ++k;
  return k;
}

std::vector<int> ActionSpace::to_bits(int action) const {
  int k = factored_bits();
  std::vector<int> bits(k);
  for (int i = 0; i < k; ++i) bits[i] = (action >> i) & 1;
  return bits;
}

int ActionSpace::from_bits(const std::vector<int>& bits) const {
  int k = factored_bits();
  if (int(bits.size()) != k) throw ConfigError("factored action arity mismatch");
  int a = 0;
  for (int i = 0; i < k; ++i) a |= (bits[i] & 1) << i;
  return a;
}

void ActionSpace::validate() const {
  if (cardinality < 2) throw ConfigError("action space needs |Y| >= 2");
}

void DomainSchema::validate() const {
  static_space.validate("static space of " + name);
  temporal_space.validate("temporal space of " + name);
  action_space.validate();
  if (max_length < 1) throw ConfigError("max_length must be >= 1");
}

namespace {

std::vector<std::string> make_names(const std::string& prefix, int n_cont,
                                    int n_bin) {
  std::vector<std::string> names;
  for (int i = 0; i < n_cont; ++i)
    names.push_back(prefix + "_c" + std::to_string(i));
  for (int i = 0; i < n_bin; ++i)
    names.push_back(prefix + "_b" + std::to_string(i));
  return names;
}

}  // namespace

DomainSchema ward_synth_schema() {
  // 8 static (post one-hot expansion), 35 temporal; actions are up to three
  // binary interventions encoded as one categorical of size 8.
  DomainSchema s;
  s.name = "ward_synth";
  s.static_space = {4, 4, make_names("ws", 4, 4)};
  s.temporal_space = {30, 5, make_names("wt", 30, 5)};
  s.action_space = {8};
  s.max_length = 30;
  s.validate();
  return s;
}

DomainSchema icu_synth_schema() {
  DomainSchema s;
  s.name = "icu_synth";
  s.static_space = {12, 24, make_names("is", 12, 24)};
  s.temporal_space = {20, 4, make_names("it", 20, 4)};
  s.action_space = {8};
  s.max_length = 48;
  s.validate();
  return s;
}

DomainSchema builtin_schema(const std::string& name) {
  if (name == "ward_synth") return ward_synth_schema();
  if (name == "icu_synth") return icu_synth_schema();
  throw ConfigError("unknown builtin domain: " + name);
}

bool Trajectory::operator==(const Trajectory& o) const {
  if (actions != o.actions) return false;
  if (static_features.size() != o.static_features.size()) return false;
  if (static_features != o.static_features) return false;
  if (observations.size() != o.observations.size()) return false;
  for (size_t i = 0; i < observations.size(); ++i) {
    if (observations[i].size() != o.observations[i].size()) return false;
    if (observations[i] != o.observations[i]) return false;
  }
  return true;
}

int BatchDataset::visible_temporal_dim() const {
  return schema.temporal_space.dim() - int(hidden_columns.size());
}

FeatureSpace BatchDataset::visible_temporal_space() const {
  FeatureSpace v;
  const FeatureSpace& full = schema.temporal_space;
  for (int i = 0; i < full.dim(); ++i) {
    if (std::find(hidden_columns.begin(), hidden_columns.end(),
                  full.names[i]) != hidden_columns.end())
      continue;
    v.names.push_back(full.names[i]);
    if (full.is_binary(i))
      ++v.binary_dims;
    else
      ++v.continuous_dims;
  }
  return v;
}

bool BatchDataset::operator==(const BatchDataset& o) const {
  return schema == o.schema && seed == o.seed && provenance == o.provenance &&
         hidden_columns == o.hidden_columns && trajectories == o.trajectories;
}

std::vector<std::string> validate_trajectory(
    const Trajectory& t, const DomainSchema& s,
    const std::vector<std::string>& hidden) {
  std::vector<std::string> v;
  FeatureSpace temporal = s.temporal_space;
  if (!hidden.empty()) {
    BatchDataset tmp;
    tmp.schema = s;
    tmp.hidden_columns = hidden;
    temporal = tmp.visible_temporal_space();
  }

  if (t.length() < 1) v.push_back("T >= 1 required");
  if (t.length() > s.max_length)
    v.push_back("length " + std::to_string(t.length()) + " exceeds max_length " +
                std::to_string(s.max_length));
  if (t.actions.size() != t.observations.size())
    v.push_back("actions length " + std::to_string(t.actions.size()) +
                " != observations length " +
                std::to_string(t.observations.size()));

  auto check_vec = [&v](const Vec& x, const FeatureSpace& space,
                        const std::string& where) {
    if (int(x.size()) != space.dim()) {
      v.push_back(where + ": dimension " + std::to_string(x.size()) +
                  " != " + std::to_string(space.dim()));
      return;
    }
    for (int i = 0; i < space.dim(); ++i) {
      if (!std::isfinite(x[i])) {
        v.push_back(where + ": non-finite value in " + space.names[i]);
      } else if (space.is_binary(i) && x[i] != 0.0 && x[i] != 1.0) {
        v.push_back(where + ": non-binary value " + std::to_string(x[i]) +
                    " in binary feature " + space.names[i]);
      }
    }
  };

  check_vec(t.static_features, s.static_space, "static");
  for (int k = 0; k < t.length(); ++k)
    check_vec(t.observations[k], temporal, "obs[" + std::to_string(k) + "]");
  for (size_t k = 0; k < t.actions.size(); ++k)
    if (t.actions[k] < 0 || t.actions[k] >= s.action_space.cardinality)
      v.push_back("act[" + std::to_string(k) + "]: index " +
                  std::to_string(t.actions[k]) + " outside action space of " +
                  std::to_string(s.action_space.cardinality));
  return v;
}

std::vector<std::string> validate_dataset(const BatchDataset& d) {
  std::vector<std::string> v;
  for (size_t i = 0; i < d.trajectories.size(); ++i) {
    auto tv = validate_trajectory(d.trajectories[i], d.schema, d.hidden_columns);
    for (auto& m : tv) v.push_back("traj " + std::to_string(i) + ": " + m);
  }
  return v;
}

// ---- JSON bindings ----

void to_json(json& j, const FeatureSpace& f) {
  j = json{{"continuous", f.continuous_dims},
           {"binary", f.binary_dims},
           {"names", f.names}};
}

void from_json(const json& j, FeatureSpace& f) {
  j.at("continuous").get_to(f.continuous_dims);
  j.at("binary").get_to(f.binary_dims);
  j.at("names").get_to(f.names);
}

void to_json(json& j, const ActionSpace& a) {
  j = json{{"cardinality", a.cardinality}};
}

void from_json(const json& j, ActionSpace& a) {
  j.at("cardinality").get_to(a.cardinality);
}

void to_json(json& j, const DomainSchema& s) {
  j = json{{"name", s.name},
           {"static", s.static_space},
           {"temporal", s.temporal_space},
           {"actions", s.action_space},
           {"max_length", s.max_length}};
}

void from_json(const json& j, DomainSchema& s) {
  j.at("name").get_to(s.name);
  j.at("static").get_to(s.static_space);
  j.at("temporal").get_to(s.temporal_space);
  j.at("actions").get_to(s.action_space);
  j.at("max_length").get_to(s.max_length);
}

std::string schema_digest(const DomainSchema& s) {
  return digest_json(json(s));
}

// ---- JSONL serialization ----

namespace {

json vec_to_json(const Vec& v) {
  json a = json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

Vec vec_from_json(const json& a) {
  Vec v(a.size());
  for (size_t i = 0; i < a.size(); ++i) v[int(i)] = a[i].get<double>();
  return v;
}

}  // namespace

void serialize_dataset(const BatchDataset& d, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open for writing: " + path);

  json header{{"schema", d.schema},
              {"schema_digest", schema_digest(d.schema)},
              {"seed", d.seed},
              {"provenance", d.provenance},
              {"hidden_columns", d.hidden_columns}};
  out << header.dump() << "\n";

  for (const auto& t : d.trajectories) {
    json obs = json::array();
    for (const auto& x : t.observations) obs.push_back(vec_to_json(x));
    json row{{"static", vec_to_json(t.static_features)},
             {"obs", obs},
             {"act", t.actions}};
    out << row.dump() << "\n";
  }
  if (!out) throw ConfigError("write failed: " + path);
}

BatchDataset deserialize_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open: " + path);

  BatchDataset d;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    try {
      if (lineno == 1) {
        j.at("schema").get_to(d.schema);
        std::string recorded = j.at("schema_digest").get<std::string>();
        if (recorded != schema_digest(d.schema))
          throw IntegrityError(path + ": schema digest mismatch");
        j.at("seed").get_to(d.seed);
        j.at("provenance").get_to(d.provenance);
        j.at("hidden_columns").get_to(d.hidden_columns);
      } else {
        Trajectory t;
        t.static_features = vec_from_json(j.at("static"));
        for (const auto& o : j.at("obs")) t.observations.push_back(vec_from_json(o));
        j.at("act").get_to(t.actions);
        d.trajectories.push_back(std::move(t));
      }
    } catch (const json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (lineno == 0) throw ParseError(path + ": empty file, header expected");
  return d;
}

void export_csv(const BatchDataset& d, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open for writing: " + path);

  FeatureSpace temporal = d.visible_temporal_space();
  out << "traj,t";
  for (const auto& n : d.schema.static_space.names) out << "," << n;
  for (const auto& n : temporal.names) out << "," << n;
  out << ",action\n";

  std::ostringstream num;
  num.precision(17);
  auto emit = [&](double x) {
    num.str("");
    num << x;
    out << "," << num.str();
  };

  for (size_t i = 0; i < d.trajectories.size(); ++i) {
    const Trajectory& t = d.trajectories[i];
    for (int k = 0; k < t.length(); ++k) {
      out << i << "," << (k + 1);
      for (int c = 0; c < t.static_features.size(); ++c)
        emit(t.static_features[c]);
      for (int c = 0; c < t.observations[k].size(); ++c)
        emit(t.observations[k][c]);
      out << "," << t.actions[k] << "\n";
    }
  }
  if (!out) throw ConfigError("write failed: " + path);
}

}  // namespace dmkit
