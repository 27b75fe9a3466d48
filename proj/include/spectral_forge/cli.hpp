// Command orchestration behind the spectral_forge executable.
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace spectral_forge {

enum class Command { DECOMPOSE, COMPARE, FINGERPRINT, SURGERY, ENTROPY, CKA, SYNTH };
std::string_view command_name(Command command);
std::optional<Command> parse_command(std::string_view name);

struct RunConfig {
  Command command = Command::COMPARE;
  std::filesystem::path base, post, donor;
  /// "standard" or a path to a schema JSON file.
  std::string schema = "standard";
  std::filesystem::path out = ".";
  double top_fraction = 0.9;
  double quantum = 0.1;
  std::optional<double> threshold;
  std::filesystem::path plan;
  std::filesystem::path fixture;  // SYNTH fixture spec
  std::filesystem::path model_config;
  std::filesystem::path inputs;  // JSON array of token-id arrays
  std::string cka_mode = "batch-linear";
  std::string entropy_rows = "final";
  std::string pooling = "mean";
  bool no_rope = false;
  std::optional<std::uint64_t> seed;
  std::vector<double> temperature_alphas;
  int heatmap_dims = 25;
  std::filesystem::path cache_dir;
  bool progress = false;
};

struct RunResult {
  int exit_code = 0;
  std::vector<std::filesystem::path> files;
  /// Machine-readable error object when exit_code != 0.
  std::string error_json;
};

/// Runs one command. Errors never escape: they become exit_code 1 and an
/// error JSON. Progress, if enabled, goes to `log`.
RunResult run(const RunConfig& config, std::ostream& log);

}  // namespace spectral_forge
