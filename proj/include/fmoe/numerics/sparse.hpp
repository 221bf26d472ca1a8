// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace fmoe {

// Compressed sparse row matrix. Used for the item transition graph.
struct SparseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> row_ptr{0};
  std::vector<std::uint32_t> col_idx;
  std::vector<double> values;

  std::size_t nnz() const noexcept { return values.size(); }

  double at(std::size_t r, std::size_t c) const {
    for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k) {
      if (col_idx[k] == c) return values[k];
    }
    return 0.0;
  }

  double row_sum(std::size_t r) const {
    double s = 0.0;
    for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k) s += values[k];
    return s;
  }

  static SparseMatrix identity(std::size_t n) {
    SparseMatrix m;
    m.rows = m.cols = n;
    m.row_ptr.resize(n + 1);
    for (std::size_t i = 0; i < n; ++i) {
      m.row_ptr[i + 1] = i + 1;
      m.col_idx.push_back(static_cast<std::uint32_t>(i));
      m.values.push_back(1.0);
    }
    return m;
  }
};

}  // namespace fmoe
