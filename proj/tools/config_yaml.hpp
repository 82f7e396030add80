#pragma once

// Config <-> nested "key: value" documents (YAML). Every Config field has a
// dotted key, e.g. "optim.batch_size"; the video schedule is a list of stage
// records under "model.video.schedule".

#include <string>
#include <vector>

#include "htwa/config.hpp"

namespace htwa::cli {

// Every dotted key, in document order.
std::vector<std::string> config_keys();

// Applies the document on top of `config`. Unknown keys and ill-typed values
// throw ConfigError naming the key path.
void apply_document(Config& config, const std::string& text);
void apply_file(Config& config, const std::string& path);
// "key=value" with a YAML value, e.g. "loss.tau=0.07" or
// "model.video.schedule=[{dim: 32, temporal_window: 8}, ...]".
void apply_assignment(Config& config, const std::string& assignment);

// Every field with its current value.
std::string dump_config(const Config& config);

}  // namespace htwa::cli
