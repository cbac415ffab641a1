#pragma once

// The `combo` command-line tool. Subcommands print machine-readable JSON on
// stdout (and to --out where it names a file) and a human summary on stderr.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "combo/adapter.hpp"
#include "combo/baselines.hpp"
#include "combo/synthgen.hpp"
#include "combo/training.hpp"
#include "json.hpp"

namespace combo {

/// Everything a subcommand may read from its config file. Every section is
/// optional; unknown keys anywhere are ConfigErrors.
struct RunConfig {
  std::string dataset;
  std::optional<SynthSpec> synth;
  AdapterConfig adapter;
  TrainConfig train;
  LinearProbeConfig probe;
  std::vector<std::uint64_t> score_seeds = {0, 1, 2};
  double score_lambda = 0.01;
  std::size_t top_n = 1;
  LayerMode layers = LayerMode::all;
};

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);

/// Runs one invocation; args[0] is the program name. Returns the exit code:
/// 0 success, 2 bad configuration, 3 data error, 4 runtime failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace combo
