#pragma once

#include "avem/simlab.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

namespace avem::cli {

enum ExitCode : int { ok = 0, validation_failed = 1, config_error = 2, numerical_error = 3, io_error = 4 };

/// Effective settings after merging the config file and command-line flags.
struct Settings {
  std::uint64_t seed = 0;
  unsigned threads = 1;

  sim::ScenarioSpec scenario;
  std::uint64_t replicate = 0;

  std::string model = "gaussian";  // gaussian, bernoulli, localized, messm
  Index states = 2;
  Index latent_dim = 2;
  Index t0 = 10;

  std::string method = "avem";  // avem, qem, mcem, pavem
  int max_iter = 500;
  double tol = 1e-6;
  std::string e_step = "auto";
  int quad_nodes = 9;
  int mc_samples = 100;
  bool sign_align = true;
  bool update_sigma = true;

  std::vector<std::string> methods{"avem"};
  int n_reps = 20;
  std::vector<Index> grid_n, grid_T;
  std::vector<double> grid_tau2;

  /// Canonical form; omits `threads`, which never changes results.
  nlohmann::json to_json() const;
  std::string hash() const;
  void validate() const;
};

/// Reads a config document. Unknown keys and wrong types are ConfigErrors
/// naming the offending field.
Settings settings_from_json(const nlohmann::json& doc);

/// Entry point; returns the process exit code. Errors are reported on `err`
/// as one JSON object.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace avem::cli
