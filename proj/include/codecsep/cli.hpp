// Command-line driver: one subcommand per pipeline stage.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace codecsep {

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitConfig = 2, kExitData = 3, kExitNumeric = 4 };

inline constexpr const char* kOutputRootEnv = "CODECSEP_OUTPUT_ROOT";

struct RunSpec {
  std::string command;  // gen-data, pretrain-codec, train-sep, eval, cost-report, embed-cache
  std::filesystem::path config_path;
  std::vector<std::string> overrides;
  std::filesystem::path output_dir;
};

/// Executes one command. Writes config.json, provenance.json and
/// artifacts.json next to the command's outputs; returns an ExitCode.
int run(const RunSpec& spec, const std::vector<std::string>& argv = {});

/// Parses argv and runs; errors go to stderr as one JSON object.
int cli_main(int argc, char** argv);

}  // namespace codecsep
