#include "io.hpp"

#include "avem/error.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace avem::cli {

namespace fs = std::filesystem;

std::string format_double(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

std::string provenance_line(const std::string& config_hash, std::uint64_t seed) {
  return "# config_hash=" + config_hash + " master_seed=" + std::to_string(seed);
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& s, const fs::path& path, std::size_t line) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw DimensionError(path.string() + ":" + std::to_string(line) + ": bad number '" + s + "'");
  return v;
}

}  // namespace

LabeledDataset read_dataset_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset " + path.string());
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    header = split_csv(line);
    break;
  }
  if (header.size() < 3 || header[0] != "subject_id" || header[1] != "t")
    throw DimensionError(path.string() + ": header must be subject_id,t,d1,...,dp");
  const std::size_t p = header.size() - 2;
  for (std::size_t j = 0; j < p; ++j)
    if (header[j + 2] != "d" + std::to_string(j + 1))
      throw DimensionError(path.string() + ": observation columns must be named d1..dp");

  LabeledDataset ds;
  std::vector<std::vector<double>> rows;
  auto flush = [&]() {
    if (rows.empty()) return;
    MatrixXd m(static_cast<Index>(rows.size()), static_cast<Index>(p));
    for (std::size_t t = 0; t < rows.size(); ++t)
      for (std::size_t j = 0; j < p; ++j)
        m(static_cast<Index>(t), static_cast<Index>(j)) = rows[t][j];
    ds.data.sequences.push_back(std::move(m));
    rows.clear();
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto cells = split_csv(line);
    if (cells.size() != p + 2)
      throw DimensionError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                           std::to_string(p + 2) + " columns");
    const std::string& id = cells[0];
    if (ds.subject_ids.empty() || ds.subject_ids.back() != id) {
      for (const auto& seen : ds.subject_ids)
        if (seen == id)
          throw DimensionError(path.string() + ":" + std::to_string(lineno) + ": rows of subject " +
                               id + " are not contiguous");
      flush();
      ds.subject_ids.push_back(id);
    }
    const double t = parse_double(cells[1], path, lineno);
    if (t != static_cast<double>(rows.size()))
      throw DimensionError(path.string() + ":" + std::to_string(lineno) + ": expected t = " +
                           std::to_string(rows.size()));
    std::vector<double> r(p);
    for (std::size_t j = 0; j < p; ++j) r[j] = parse_double(cells[j + 2], path, lineno);
    rows.push_back(std::move(r));
  }
  if (in.bad()) throw IoError("read failure on " + path.string());
  flush();
  ds.data.validate();
  return ds;
}

void write_dataset_csv(const fs::path& path, const LabeledDataset& ds,
                       const std::string& provenance) {
  std::ostringstream out;
  out << provenance << "\nsubject_id,t";
  const Index p = ds.data.obs_dim();
  for (Index j = 0; j < p; ++j) out << ",d" << j + 1;
  out << '\n';
  for (std::size_t i = 0; i < ds.data.size(); ++i) {
    const MatrixXd& s = ds.data[i];
    for (Index t = 0; t < s.rows(); ++t) {
      out << ds.subject_ids[i] << ',' << t;
      for (Index j = 0; j < p; ++j) out << ',' << format_double(s(t, j));
      out << '\n';
    }
  }
  write_text(path, out.str());
}

std::vector<std::string> default_ids(std::size_t n) {
  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = std::to_string(i);
  return ids;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  out.flush();
  if (!out) throw IoError("write failure on " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failure on " + path.string());
  return ss.str();
}

json to_json(const VectorXd& v) {
  json a = json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

json to_json(const MatrixXd& m) {
  json a = json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    a.push_back(std::move(row));
  }
  return a;
}

json parse_config_text(const std::string& text, const std::string& source) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1;
    for (std::size_t i = 0; i < std::min<std::size_t>(e.byte, text.size()); ++i)
      if (text[i] == '\n') ++line;
    throw ConfigError(source + ":" + std::to_string(line) + ": malformed JSON (" + e.what() + ")");
  }
}

}  // namespace avem::cli
