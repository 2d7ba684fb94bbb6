#pragma once

#include "avem/dataset.hpp"
#include "avem/simlab.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace avem::cli {

using json = nlohmann::json;

/// Shortest decimal that parses back to the same double.
std::string format_double(double x);

/// FNV-1a, printed as 16 hex digits.
std::uint64_t fnv1a(const std::string& bytes);
std::string hex64(std::uint64_t v);

/// `# config_hash=<hex> master_seed=<seed>` (no newline).
std::string provenance_line(const std::string& config_hash, std::uint64_t seed);

struct LabeledDataset {
  Dataset data;
  std::vector<std::string> subject_ids;
};

/// Columns subject_id, t, d1..dp. Lines starting with '#' are skipped. Rows of
/// one subject must be contiguous with t = 0, 1, ... in order.
LabeledDataset read_dataset_csv(const std::filesystem::path& path);
void write_dataset_csv(const std::filesystem::path& path, const LabeledDataset& ds,
                       const std::string& provenance);

/// Default ids "0", "1", ...
std::vector<std::string> default_ids(std::size_t n);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

json to_json(const VectorXd& v);
json to_json(const MatrixXd& m);

/// Parses JSON text; syntax errors become ConfigError with the line number.
json parse_config_text(const std::string& text, const std::string& source);

}  // namespace avem::cli
