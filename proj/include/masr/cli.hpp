#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "masr/config.hpp"

namespace masr::cli {

struct Options {
  std::filesystem::path config;  // empty: built-in defaults
  std::filesystem::path out;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> manifest;
  std::optional<std::size_t> threads;  // overrides MASR_THREADS and the config
};

// Config with command-line and environment overrides applied.
config::RunConfig effective_config(const Options& opt);

// Each command writes only under opt.out and returns 0 on success; errors are
// thrown as masr::Error.
int cmd_synth(const Options& opt, std::ostream& log);
int cmd_pretrain(const Options& opt, std::ostream& log);
int cmd_probe(const Options& opt, std::ostream& log);
int cmd_diag_mining(const Options& opt, std::ostream& log);
int cmd_gradcheck(const Options& opt, std::ostream& log);

// Full command line: parses flags, dispatches, and reports any failure as one
// line "error: <kind>: <message>" on `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace masr::cli
