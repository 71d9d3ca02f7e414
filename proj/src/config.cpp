#include "magma/config.hpp"

#include <cerrno>
#include <charconv>
#include <cstdio>
#include <functional>
#include <sstream>

#include "magma/error.hpp"

namespace magma {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) { return static_cast<std::size_t>(to_u64(key, v)); }

int to_int(const std::string& key, const std::string& v) {
  int out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  // strtod rather than from_chars: it accepts the %.17g output everywhere.
  errno = 0;
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  if (v.empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

template <typename T, typename F>
std::string join_list(const std::vector<T>& xs, F&& f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + f(xs[i]);
  return out;
}

// Parse-time errors from the enum parsers become key-qualified config errors.
template <typename F>
auto keyed(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

struct Field {
  std::string key;
  int phase;  // 0: shapes defaults of later keys, 1: everything else
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define SIZE_FIELD(phase, key, member)                                                      \
  Field {                                                                                   \
    key, phase, [](RunConfig& c, const std::string& v) { c.member = to_size(key, v); },     \
        [](const RunConfig& c) { return std::to_string(c.member); }                         \
  }
#define DOUBLE_FIELD(phase, key, member)                                                    \
  Field {                                                                                   \
    key, phase, [](RunConfig& c, const std::string& v) { c.member = to_double(key, v); },   \
        [](const RunConfig& c) { return fmt_double(c.member); }                             \
  }
#define BOOL_FIELD(phase, key, member)                                                      \
  Field {                                                                                   \
    key, phase, [](RunConfig& c, const std::string& v) { c.member = to_bool(key, v); },     \
        [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }         \
  }
#define INT_FIELD(phase, key, member)                                                       \
  Field {                                                                                   \
    key, phase, [](RunConfig& c, const std::string& v) { c.member = to_int(key, v); },      \
        [](const RunConfig& c) { return std::to_string(c.member); }                         \
  }

std::string norm_list(const RunConfig& c, bool mean) {
  if (!c.norm) return "auto";
  return join_list(mean ? c.norm->mean : c.norm->std, fmt_double);
}

void set_norm(RunConfig& c, const std::string& key, const std::string& v, bool mean) {
  if (v == "auto") {
    if (c.norm) (mean ? c.norm->mean : c.norm->std).clear();
    return;
  }
  if (!c.norm) c.norm = NormStats{};
  auto& dst = mean ? c.norm->mean : c.norm->std;
  dst.clear();
  for (const auto& s : split_list(v)) dst.push_back(to_double(key, s));
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"method", 0, [](RunConfig& c, const std::string& v) { c.objective.method = keyed("method", [&] { return parse_method(v); }); },
       [](const RunConfig& c) { return to_string(c.objective.method); }},
      {"data.train", 1, [](RunConfig& c, const std::string& v) { c.train_data = v; },
       [](const RunConfig& c) { return c.train_data; }},
      {"data.test", 1, [](RunConfig& c, const std::string& v) { c.test_data = v; },
       [](const RunConfig& c) { return c.test_data; }},
      SIZE_FIELD(0, "model.image_size", vit.image_size),
      SIZE_FIELD(0, "model.patch_size", vit.patch_size),
      SIZE_FIELD(0, "model.channels", vit.channels),
      SIZE_FIELD(0, "model.enc_depth", vit.enc_depth),
      SIZE_FIELD(0, "model.enc_dim", vit.enc_dim),
      SIZE_FIELD(0, "model.enc_heads", vit.enc_heads),
      SIZE_FIELD(0, "model.dec_depth", vit.dec_depth),
      SIZE_FIELD(0, "model.dec_dim", vit.dec_dim),
      SIZE_FIELD(0, "model.dec_heads", vit.dec_heads),
      SIZE_FIELD(0, "model.mlp_ratio", vit.mlp_ratio),
      DOUBLE_FIELD(0, "model.mask_ratio", vit.mask_ratio),
      BOOL_FIELD(0, "model.class_token", vit.use_class_token),
      INT_FIELD(1, "reg.ref_layer", objective.reg.ref_layer),
      INT_FIELD(1, "reg.target_layer", objective.reg.target_layer),
      {"reg.layer_set", 1,
       [](RunConfig& c, const std::string& v) {
         c.objective.reg.layer_set.clear();
         for (const auto& s : split_list(v)) c.objective.reg.layer_set.push_back(to_int("reg.layer_set", s));
       },
       [](const RunConfig& c) {
         return join_list(c.objective.reg.layer_set, [](int l) { return std::to_string(l); });
       }},
      {"reg.laplacian", 1,
       [](RunConfig& c, const std::string& v) {
         c.objective.reg.laplacian_mode = keyed("reg.laplacian", [&] { return parse_laplacian_mode(v); });
       },
       [](const RunConfig& c) { return to_string(c.objective.reg.laplacian_mode); }},
      {"reg.kernel_grad", 1,
       [](RunConfig& c, const std::string& v) {
         c.objective.reg.kernel_grad = keyed("reg.kernel_grad", [&] { return parse_kernel_grad(v); });
       },
       [](const RunConfig& c) { return to_string(c.objective.reg.kernel_grad); }},
      {"reg.pair_mode", 1,
       [](RunConfig& c, const std::string& v) {
         c.objective.reg.pair_mode = keyed("reg.pair_mode", [&] { return parse_pair_mode(v); });
       },
       [](const RunConfig& c) { return to_string(c.objective.reg.pair_mode); }},
      DOUBLE_FIELD(1, "reg.sigma_floor", objective.reg.sigma_floor),
      {"reg.fixed_sigma", 1,
       [](RunConfig& c, const std::string& v) {
         if (v == "adaptive") {
           c.objective.reg.fixed_sigma.reset();
         } else {
           c.objective.reg.fixed_sigma = to_double("reg.fixed_sigma", v);
         }
       },
       [](const RunConfig& c) {
         return c.objective.reg.fixed_sigma ? fmt_double(*c.objective.reg.fixed_sigma) : std::string("adaptive");
       }},
      DOUBLE_FIELD(1, "sched.lambda", objective.sched.lambda),
      INT_FIELD(1, "sched.e_st", objective.sched.e_st),
      INT_FIELD(1, "sched.e_dur", objective.sched.e_dur),
      DOUBLE_FIELD(1, "sched.uniformity_weight", objective.sched.uniformity_weight),
      BOOL_FIELD(1, "loss.normalize_targets", objective.normalize_targets),
      SIZE_FIELD(1, "train.epochs", train.epochs),
      SIZE_FIELD(1, "train.batch_size", train.batch_size),
      SIZE_FIELD(1, "train.warmup_epochs", train.warmup_epochs),
      DOUBLE_FIELD(1, "train.lr", train.lr),
      DOUBLE_FIELD(1, "train.lr_floor", train.lr_floor),
      {"train.seed", 1, [](RunConfig& c, const std::string& v) { c.train.seed = to_u64("train.seed", v); },
       [](const RunConfig& c) { return std::to_string(c.train.seed); }},
      SIZE_FIELD(1, "train.probe_interval", train.probe_interval),
      SIZE_FIELD(1, "train.knn_k", train.knn_k),
      SIZE_FIELD(1, "train.checkpoint_interval", train.checkpoint_interval),
      DOUBLE_FIELD(1, "optim.beta1", train.adamw.beta1),
      DOUBLE_FIELD(1, "optim.beta2", train.adamw.beta2),
      DOUBLE_FIELD(1, "optim.eps", train.adamw.eps),
      DOUBLE_FIELD(1, "optim.weight_decay", train.adamw.weight_decay),
      DOUBLE_FIELD(1, "aug.scale_min", augment.scale_min),
      DOUBLE_FIELD(1, "aug.scale_max", augment.scale_max),
      DOUBLE_FIELD(1, "aug.ratio_min", augment.ratio_min),
      DOUBLE_FIELD(1, "aug.ratio_max", augment.ratio_max),
      DOUBLE_FIELD(1, "aug.hflip_prob", augment.hflip_prob),
      {"aug.norm_mean", 1, [](RunConfig& c, const std::string& v) { set_norm(c, "aug.norm_mean", v, true); },
       [](const RunConfig& c) { return norm_list(c, true); }},
      {"aug.norm_std", 1, [](RunConfig& c, const std::string& v) { set_norm(c, "aug.norm_std", v, false); },
       [](const RunConfig& c) { return norm_list(c, false); }},
      SIZE_FIELD(1, "probe.epochs", probe.epochs),
      DOUBLE_FIELD(1, "probe.lr", probe.lr),
      {"probe.milestones", 1,
       [](RunConfig& c, const std::string& v) {
         c.probe.milestones.clear();
         for (const auto& s : split_list(v)) c.probe.milestones.push_back(to_size("probe.milestones", s));
       },
       [](const RunConfig& c) {
         return join_list(c.probe.milestones, [](std::size_t m) { return std::to_string(m); });
       }},
      DOUBLE_FIELD(1, "probe.gamma", probe.gamma),
      SIZE_FIELD(1, "probe.batch_size", probe.batch_size),
      BOOL_FIELD(1, "probe.standardize", probe.standardize),
      {"eval.feature", 1,
       [](RunConfig& c, const std::string& v) { c.feature = keyed("eval.feature", [&] { return parse_feature_kind(v); }); },
       [](const RunConfig& c) { return to_string(c.feature); }},
  };
  return table;
}

#undef SIZE_FIELD
#undef DOUBLE_FIELD
#undef BOOL_FIELD
#undef INT_FIELD

const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return &f;
  return nullptr;
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

ConfigEntries parse_config_text(const std::string& text) {
  ConfigEntries out;
  std::stringstream ss(text);
  std::string raw;
  for (std::size_t line = 1; std::getline(ss, raw); ++line) {
    const std::string s = trim(raw.substr(0, raw.find('#')));
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line) + ": expected key = value");
    const std::string key = trim(s.substr(0, eq)), value = trim(s.substr(eq + 1));
    if (find_field(key) == nullptr) throw ConfigError("line " + std::to_string(line) + ": unknown key '" + key + "'");
    if (!out.emplace(key, value).second) {
      throw ConfigError("line " + std::to_string(line) + ": duplicate key '" + key + "'");
    }
  }
  return out;
}

std::pair<std::string, std::string> parse_override(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
  std::string key = trim(kv.substr(0, eq));
  if (find_field(key) == nullptr) throw ConfigError("unknown key '" + key + "'");
  return {key, trim(kv.substr(eq + 1))};
}

RunConfig build_config(const ConfigEntries& entries) {
  for (const auto& [key, value] : entries) {
    if (find_field(key) == nullptr) throw ConfigError("unknown key '" + key + "'");
  }
  RunConfig c;
  for (int phase = 0; phase < 2; ++phase) {
    if (phase == 1) {
      c.objective.reg = RegConfig::for_depth(static_cast<int>(c.vit.enc_depth));
      c.objective.sched = Schedule::for_method(c.objective.method);
    }
    for (const auto& f : fields()) {
      if (f.phase != phase) continue;
      const auto it = entries.find(f.key);
      if (it != entries.end()) f.set(c, it->second);
    }
  }
  if (c.norm && c.norm->mean.empty() && c.norm->std.empty()) c.norm.reset();
  c.augment.output_size = c.vit.image_size;
  return c;
}

std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

void RunConfig::validate() const {
  keyed("model", [&] {
    vit.validate();
    return 0;
  });
  objective.reg.validate(static_cast<int>(vit.enc_depth));
  objective.sched.validate();
  if (!uses_manifold(objective.method) && objective.sched.lambda != 0.0) {
    throw ConfigError("sched.lambda must be 0 for method " + to_string(objective.method));
  }
  if (!uses_uniformity(objective.method) && objective.sched.uniformity_weight != 0.0) {
    throw ConfigError("sched.uniformity_weight must be 0 for method " + to_string(objective.method));
  }
  if (train.epochs == 0) throw ConfigError("train.epochs must be positive");
  if (train.batch_size < 2) throw ConfigError("train.batch_size must be >= 2");
  if (train.warmup_epochs >= train.epochs) throw ConfigError("train.warmup_epochs must be < train.epochs");
  if (!(train.lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (!(train.lr_floor >= 0.0 && train.lr_floor <= train.lr)) throw ConfigError("train.lr_floor must lie in [0, train.lr]");
  if (train.knn_k == 0) throw ConfigError("train.knn_k must be positive");
  if (!(train.adamw.beta1 >= 0.0 && train.adamw.beta1 < 1.0)) throw ConfigError("optim.beta1 must lie in [0, 1)");
  if (!(train.adamw.beta2 >= 0.0 && train.adamw.beta2 < 1.0)) throw ConfigError("optim.beta2 must lie in [0, 1)");
  if (!(train.adamw.eps > 0.0)) throw ConfigError("optim.eps must be positive");
  if (!(train.adamw.weight_decay >= 0.0)) throw ConfigError("optim.weight_decay must be >= 0");
  if (augment.output_size != vit.image_size) throw ConfigError("aug output size must equal model.image_size");
  augment.validate();
  probe.validate();
  if (norm) {
    if (norm->mean.size() != vit.channels || norm->std.size() != vit.channels) {
      throw ConfigError("aug.norm_mean and aug.norm_std need one value per channel (" + std::to_string(vit.channels) +
                        ")");
    }
    for (double s : norm->std)
      if (!(s > 0.0)) throw ConfigError("aug.norm_std entries must be positive");
  }
}

}  // namespace magma
