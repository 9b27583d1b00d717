#include "drarmor/config.hpp"

#include <charconv>
#include <functional>
#include <sstream>
#include <vector>

#include "drarmor/errors.hpp"
#include "drarmor/serialize.hpp"

namespace drarmor {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, end);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";  // keep it a float in TOML
  return s;
}

std::string format_value(const ConfigValue& v) {
  if (const auto* b = std::get_if<bool>(&v)) return *b ? "true" : "false";
  if (const auto* i = std::get_if<std::int64_t>(&v)) return std::to_string(*i);
  if (const auto* d = std::get_if<double>(&v)) return format_double(*d);
  std::string out = "\"";
  for (char c : std::get<std::string>(v)) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

ConfigValue parse_value(const std::string& raw, std::size_t line) {
  if (raw.empty()) throw ConfigError("line " + std::to_string(line) + ": missing value");
  if (raw.front() == '"') {
    std::string out;
    std::size_t i = 1;
    for (; i < raw.size() && raw[i] != '"'; ++i) {
      if (raw[i] == '\\' && i + 1 < raw.size()) ++i;
      out += raw[i];
    }
    if (i >= raw.size()) throw ConfigError("line " + std::to_string(line) + ": unterminated string");
    if (!trim(raw.substr(i + 1)).empty()) throw ConfigError("line " + std::to_string(line) + ": text after string");
    return out;
  }
  if (raw == "true") return true;
  if (raw == "false") return false;
  std::int64_t i = 0;
  auto [ip, iec] = std::from_chars(raw.data(), raw.data() + raw.size(), i);
  if (iec == std::errc() && ip == raw.data() + raw.size()) return i;
  double d = 0.0;
  auto [dp, dec] = std::from_chars(raw.data(), raw.data() + raw.size(), d);
  if (dec == std::errc() && dp == raw.data() + raw.size()) return d;
  throw ConfigError("line " + std::to_string(line) + ": cannot parse value '" + raw + "'");
}

double as_double(const std::string& key, const ConfigValue& v) {
  if (const auto* d = std::get_if<double>(&v)) return *d;
  if (const auto* i = std::get_if<std::int64_t>(&v)) return static_cast<double>(*i);
  throw ConfigError("key '" + key + "' expects a number");
}

std::size_t as_size(const std::string& key, const ConfigValue& v) {
  const auto* i = std::get_if<std::int64_t>(&v);
  if (i == nullptr || *i < 0) throw ConfigError("key '" + key + "' expects a non-negative integer");
  return static_cast<std::size_t>(*i);
}

bool as_bool(const std::string& key, const ConfigValue& v) {
  const auto* b = std::get_if<bool>(&v);
  if (b == nullptr) throw ConfigError("key '" + key + "' expects true or false");
  return *b;
}

std::string as_string(const std::string& key, const ConfigValue& v) {
  const auto* s = std::get_if<std::string>(&v);
  if (s == nullptr) throw ConfigError("key '" + key + "' expects a quoted string");
  return *s;
}

template <class E>
struct EnumNames {
  std::vector<std::pair<E, std::string>> names;

  std::string name(E e) const {
    for (const auto& [v, n] : names)
      if (v == e) return n;
    return "?";
  }
  E parse(const std::string& key, const std::string& s) const {
    for (const auto& [v, n] : names)
      if (n == s) return v;
    std::string allowed;
    for (const auto& [v, n] : names) allowed += (allowed.empty() ? "" : ", ") + n;
    throw ConfigError("key '" + key + "': '" + s + "' is not one of " + allowed);
  }
};

const EnumNames<SynthKind> kSynth{{{SynthKind::stripes, "stripes"}, {SynthKind::blobs, "blobs"}}};
const EnumNames<Partition> kPartition{{{Partition::iid, "iid"}, {Partition::dirichlet, "dirichlet"}}};
const EnumNames<Aggregation> kAggregation{{{Aggregation::fedsgd, "fedsgd"}, {Aggregation::fedavg, "fedavg"}}};
const EnumNames<Poisoning> kPoisoning{
    {{Poisoning::none, "none"}, {Poisoning::continuous, "continuous"}, {Poisoning::periodic, "periodic"}}};
const EnumNames<DefenseMode> kDefense{{{DefenseMode::none, "none"},
                                       {DefenseMode::noise_gaussian, "noise"},
                                       {DefenseMode::noise_laplace, "laplace"},
                                       {DefenseMode::pixelate, "pixelate"},
                                       {DefenseMode::prune, "prune"}}};
const EnumNames<RelevanceMethod> kMethod{{{RelevanceMethod::lrp, "lrp"}, {RelevanceMethod::dtd, "dtd"}}};
const EnumNames<GammaMode> kGamma{{{GammaMode::adaptive, "adaptive"}, {GammaMode::fixed, "fixed"}}};
const EnumNames<RootPolicy> kRoot{
    {{RootPolicy::zeros, "zeros"}, {RootPolicy::black_input, "black_input"}, {RootPolicy::custom, "custom"}}};
const EnumNames<TargetPolicy> kTarget{
    {{TargetPolicy::true_label, "true_label"}, {TargetPolicy::predicted_label, "predicted_label"}}};
const EnumNames<ScoreScale> kScale{{{ScoreScale::log, "log"}, {ScoreScale::linear, "linear"}}};
const EnumNames<Placement> kPlacement{{{Placement::start, "start"}, {Placement::deep, "deep"}}};
const EnumNames<MeasurementMode> kMeasurement{
    {{MeasurementMode::pixel_sum, "pixel_sum"}, {MeasurementMode::random_projection, "random_projection"}}};

struct Field {
  std::string key;
  std::function<ConfigValue(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const ConfigValue&)> set;
};

#define SIZE_FIELD(KEY, member)                                                                 \
  Field {                                                                                        \
    KEY, [](const ExperimentConfig& c) { return ConfigValue(static_cast<std::int64_t>(c.member)); }, \
        [](ExperimentConfig& c, const ConfigValue& v) { c.member = as_size(KEY, v); }           \
  }
#define DOUBLE_FIELD(KEY, member)                                                      \
  Field {                                                                               \
    KEY, [](const ExperimentConfig& c) { return ConfigValue(c.member); },              \
        [](ExperimentConfig& c, const ConfigValue& v) { c.member = as_double(KEY, v); } \
  }
#define BOOL_FIELD(KEY, member)                                                      \
  Field {                                                                             \
    KEY, [](const ExperimentConfig& c) { return ConfigValue(c.member); },            \
        [](ExperimentConfig& c, const ConfigValue& v) { c.member = as_bool(KEY, v); } \
  }
#define STRING_FIELD(KEY, member)                                                      \
  Field {                                                                               \
    KEY, [](const ExperimentConfig& c) { return ConfigValue(c.member); },              \
        [](ExperimentConfig& c, const ConfigValue& v) { c.member = as_string(KEY, v); } \
  }
#define ENUM_FIELD(KEY, TABLE, member)                                                              \
  Field {                                                                                            \
    KEY, [](const ExperimentConfig& c) { return ConfigValue(TABLE.name(c.member)); },               \
        [](ExperimentConfig& c, const ConfigValue& v) { c.member = TABLE.parse(KEY, as_string(KEY, v)); } \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      STRING_FIELD("dataset", dataset),
      ENUM_FIELD("synth_kind", kSynth, synth_kind),
      SIZE_FIELD("synth_n", synth_n),
      SIZE_FIELD("synth_side", synth_side),
      SIZE_FIELD("synth_classes", synth_classes),
      STRING_FIELD("idx_images", idx_images),
      STRING_FIELD("idx_labels", idx_labels),
      SIZE_FIELD("samples_per_client", samples_per_client),
      ENUM_FIELD("partition", kPartition, partition),
      DOUBLE_FIELD("dirichlet_alpha", dirichlet_alpha),
      SIZE_FIELD("rounds", rounds),
      BOOL_FIELD("compare_baseline", compare_baseline),
      BOOL_FIELD("dump_reconstructions", dump_reconstructions),
      Field{"seed", [](const ExperimentConfig& c) { return ConfigValue(static_cast<std::int64_t>(c.round.seed)); },
            [](ExperimentConfig& c, const ConfigValue& v) { c.round.seed = as_size("seed", v); }},
      SIZE_FIELD("num_clients", round.num_clients),
      SIZE_FIELD("clients_per_round", round.clients_per_round),
      SIZE_FIELD("batch_size", round.batch_size),
      SIZE_FIELD("local_steps", round.local_steps),
      DOUBLE_FIELD("lr", round.lr),
      ENUM_FIELD("aggregation", kAggregation, round.aggregation),
      ENUM_FIELD("poisoning", kPoisoning, round.poisoning),
      SIZE_FIELD("period", round.period),
      ENUM_FIELD("defense", kDefense, round.defense.mode),
      DOUBLE_FIELD("sigma2_base", round.defense.sigma2_base),
      DOUBLE_FIELD("alpha", round.defense.alpha),
      DOUBLE_FIELD("sensitivity", round.defense.sensitivity),
      DOUBLE_FIELD("epsilon_dp", round.defense.epsilon_dp),
      SIZE_FIELD("block", round.defense.block),
      ENUM_FIELD("detector_method", kMethod, round.detector.method),
      DOUBLE_FIELD("lrp_epsilon", round.detector.epsilon),
      ENUM_FIELD("gamma_mode", kGamma, round.detector.gamma_mode),
      DOUBLE_FIELD("gamma", round.detector.gamma),
      DOUBLE_FIELD("tau", round.detector.tau),
      Field{"tau_D",
            [](const ExperimentConfig& c) {
              return c.round.detector.tau_D ? ConfigValue(*c.round.detector.tau_D) : ConfigValue(std::string("auto"));
            },
            [](ExperimentConfig& c, const ConfigValue& v) {
              if (const auto* s = std::get_if<std::string>(&v)) {
                if (*s != "auto") throw ConfigError("key 'tau_D' expects a number or \"auto\"");
                c.round.detector.tau_D.reset();
              } else {
                c.round.detector.tau_D = as_double("tau_D", v);
              }
            }},
      DOUBLE_FIELD("tau_W", round.detector.tau_W),
      ENUM_FIELD("root_policy", kRoot, round.detector.root_policy),
      ENUM_FIELD("target_policy", kTarget, round.detector.target_policy),
      ENUM_FIELD("score_scale", kScale, round.detector.score_scale),
      SIZE_FIELD("attack_bins", round.attack.num_bins),
      ENUM_FIELD("place", kPlacement, round.attack.placement),
      ENUM_FIELD("measurement", kMeasurement, round.attack.measurement),
      DOUBLE_FIELD("measurement_scale", round.attack.measurement_scale),
      DOUBLE_FIELD("gain", round.attack.gain),
  };
  return table;
}

void check(const ExperimentConfig& c) {
  if (c.dataset != "synthetic" && c.dataset != "idx") throw ConfigError("dataset must be \"synthetic\" or \"idx\"");
  if (c.dataset == "idx" && (c.idx_images.empty() || c.idx_labels.empty())) {
    throw ConfigError("dataset \"idx\" needs idx_images and idx_labels");
  }
  if (c.rounds == 0) throw ConfigError("rounds must be >= 1");
  if (c.round.detector.root_policy == RootPolicy::custom) {
    throw ConfigError("root_policy \"custom\" is only available through the library API");
  }
  c.round.check();
}

}  // namespace

std::map<std::string, ConfigValue> parse_key_values(const std::string& text) {
  std::map<std::string, ConfigValue> out;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    // Strip comments outside strings.
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(number) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(number) + ": empty key");
    if (out.count(key)) throw ConfigError("line " + std::to_string(number) + ": duplicate key '" + key + "'");
    out[key] = parse_value(trim(line.substr(eq + 1)), number);
  }
  return out;
}

ExperimentConfig parse_config(const std::string& text) {
  auto kv = parse_key_values(text);
  ExperimentConfig config;
  if (auto it = kv.find("preset"); it != kv.end()) {
    config = preset_config(as_string("preset", it->second));
    kv.erase(it);
  }
  std::string unknown;
  for (const auto& [key, value] : kv) {
    const auto& table = fields();
    auto f = std::find_if(table.begin(), table.end(), [&](const Field& x) { return x.key == key; });
    if (f == table.end()) {
      unknown += (unknown.empty() ? "" : ", ") + key;
      continue;
    }
    f->set(config, value);
  }
  if (!unknown.empty()) throw ConfigError("unknown config keys: " + unknown);
  check(config);
  return config;
}

ExperimentConfig load_config(const std::string& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const InputError& e) {
    throw ConfigError(e.what());
  }
  return parse_config(text);
}

std::string serialize_config(const ExperimentConfig& config) {
  std::string out;
  if (!config.preset.empty()) out += "preset = " + format_value(config.preset) + "\n";
  for (const auto& f : fields()) out += f.key + " = " + format_value(f.get(config)) + "\n";
  return out;
}

std::vector<std::string> preset_names() { return {"desk", "mnist-start-3mal", "mnist-deep-3mal", "mnist-clean"}; }

ExperimentConfig preset_config(const std::string& name) {
  ExperimentConfig c;
  c.preset = name;
  c.round.lr = 0.05;
  c.round.num_clients = 20;
  c.round.clients_per_round = 5;
  c.round.batch_size = 64;
  c.round.aggregation = Aggregation::fedavg;
  c.round.local_steps = 5;
  c.rounds = 20;
  if (name == "desk" || name == "mnist-clean") {
    c.round.poisoning = Poisoning::none;
  } else if (name == "mnist-start-3mal") {
    c.round.poisoning = Poisoning::continuous;
    c.round.attack.placement = Placement::start;
  } else if (name == "mnist-deep-3mal") {
    c.round.poisoning = Poisoning::continuous;
    c.round.attack.placement = Placement::deep;
  } else {
    std::string all;
    for (const auto& n : preset_names()) all += (all.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + name + "' (available: " + all + ")");
  }
  return c;
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
  return serialize_config(a) == serialize_config(b);
}

}  // namespace drarmor
