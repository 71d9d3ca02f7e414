#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "magma/data.hpp"
#include "magma/eval.hpp"
#include "magma/objectives.hpp"
#include "magma/train.hpp"
#include "magma/vit.hpp"

namespace magma {

// Everything one pretrain/eval invocation needs. Built from flat key=value
// text: one key per line, '#' starts a comment, unknown or repeated keys are
// rejected. Method-dependent defaults (lambda, uniformity weight) and
// depth-dependent defaults (regularizer layers) are applied before the
// explicit keys, so line order does not matter.
struct RunConfig {
  VitConfig vit;
  ObjectiveConfig objective;
  TrainConfig train;
  AugmentConfig augment;  // output_size follows vit.image_size
  ProbeConfig probe;
  FeatureKind feature = FeatureKind::pooled_patches;
  std::string train_data;
  std::string test_data;
  // Frozen normalization statistics; computed from the training set when
  // absent and written back into the resolved config.
  std::optional<NormStats> norm;

  // Cross-field checks against every module precondition. Throws
  // ConfigError naming the offending key.
  void validate() const;
};

using ConfigEntries = std::map<std::string, std::string>;

// Parses "key = value" lines. Throws ConfigError with the line number on
// malformed lines, unknown keys or duplicates.
ConfigEntries parse_config_text(const std::string& text);

// "key=value" as given on the command line.
std::pair<std::string, std::string> parse_override(const std::string& kv);

// Applies defaults, then the entries. Throws ConfigError on bad values.
RunConfig build_config(const ConfigEntries& entries);

// Every key in a fixed order with round-trippable values; parsing this text
// back yields the same configuration.
std::string format_config(const RunConfig& cfg);

// The recognized keys, in format_config order.
const std::vector<std::string>& config_keys();

}  // namespace magma
