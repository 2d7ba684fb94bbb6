#pragma once

#include "avem/error.hpp"
#include "avem/linalg.hpp"

#include <string>
#include <vector>

namespace avem {

/// Subjects' observation sequences; sequence i is a T_i x p matrix. T_i may
/// differ across subjects.
struct Dataset {
  std::vector<MatrixXd> sequences;

  std::size_t size() const { return sequences.size(); }
  bool empty() const { return sequences.empty(); }
  const MatrixXd& operator[](std::size_t i) const { return sequences[i]; }

  Index obs_dim() const { return sequences.empty() ? 0 : sequences.front().cols(); }

  Index total_length() const {
    Index n = 0;
    for (const auto& s : sequences) n += s.rows();
    return n;
  }

  /// Nonempty, consistent column count, every sequence T_i >= 1, finite.
  void validate() const {
    if (sequences.empty()) throw DimensionError("dataset: no subjects");
    const Index p = obs_dim();
    for (std::size_t i = 0; i < sequences.size(); ++i) {
      const auto& s = sequences[i];
      if (s.rows() < 1 || s.cols() != p || !s.allFinite())
        throw DimensionError("dataset: subject " + std::to_string(i) +
                             " has an empty, ragged-width or non-finite sequence");
    }
  }
};

}  // namespace avem
