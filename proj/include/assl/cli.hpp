// SPDX-License-Identifier: Apache-2.0
/**
 * @file   cli.hpp
 * @brief  Command-line front end: config documents, flag precedence and the
 *         gen-data / train / eval / ablate / export-embeddings commands.
 *
 * Config documents are JSON objects mirroring CliConfig. Every key is
 * optional; unknown keys are rejected. Precedence is flags, then the config
 * file, then built-in defaults.
 */
#pragma once

#include "assl/skeleton_data.hpp"
#include "assl/trainer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace assl {

struct CliConfig {
  /// JSONL dataset; empty means "generate from the synthetic section".
  std::string data;
  std::string out_dir = "runs/default";
  bool dump_neighbors = false;
  TrainConfig train;
  SyntheticConfig synthetic;
  AblationOptions ablation;
};

nlohmann::ordered_json config_to_json(const CliConfig &cfg);
/// Overlays `doc` on `base`. Throws ConfigError on unknown keys, wrong value
/// types or invalid values.
CliConfig apply_config_json(const CliConfig &base, const nlohmann::json &doc);
CliConfig load_config_file(const std::filesystem::path &path);
/// One "key = default" line per config key.
std::string config_reference();

/// Dataset named by the config, or the synthetic corpus it describes.
std::vector<SkeletonSequence> load_or_generate(const CliConfig &cfg);

/// Exit codes: 0 success, 2 bad flags or config, 1 I/O or training failure.
int run_cli(int argc, char **argv, std::ostream &out, std::ostream &err);

}  // namespace assl
