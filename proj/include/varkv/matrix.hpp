#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "varkv/errors.hpp"
#include "varkv/simd.hpp"

namespace varkv {

// Dense row-major matrix of doubles. Small, value-semantic, no views into
// foreign storage; everything at this scale fits in memory comfortably.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    double* row(std::size_t i) { return data.data() + i * cols; }
    const double* row(std::size_t i) const { return data.data() + i * cols; }
    std::span<const double> row_span(std::size_t i) const { return {row(i), cols}; }

    bool empty() const { return rows == 0 || cols == 0; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool same_bits(const Matrix& other) const {
        if (rows != other.rows || cols != other.cols) return false;
        for (std::size_t i = 0; i < data.size(); ++i)
            if (data[i] != other.data[i]) return false;
        return true;
    }
};

// Standard product with deterministic row-major, left-to-right accumulation.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows)
        throw config_error("matmul: inner dimensions differ (" + std::to_string(a.cols) +
                           " vs " + std::to_string(b.rows) + ")");
    Matrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.row(i);
        double* orow = out.row(i);
        for (std::size_t k = 0; k < a.cols; ++k) {
            detail::axpy(orow, b.row(k), arow[k], b.cols, k == 0);
        }
    }
    if (!out.all_finite()) throw state_error("matmul: non-finite result");
    return out;
}

// Row-wise softmax with per-row max subtraction for stability.
inline Matrix softmax_rows(const Matrix& m) {
    if (m.empty()) throw config_error("softmax_rows: empty matrix");
    Matrix out(m.rows, m.cols);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double* s = m.row(i);
        double* w = out.row(i);
        double mx = detail::max_of(s, m.cols);
        double sum = detail::exp_sub_sum(s, w, m.cols, mx);
        if (!(sum > 0.0) || !std::isfinite(sum))
            throw state_error("softmax_rows: non-finite row");
        detail::scale_inplace(w, m.cols, 1.0 / sum);
    }
    return out;
}

// Sum over columns of the population variance (divisor = rows). A single row
// has zero variance by that convention, which is what the degenerate first
// generation step needs.
inline double column_variance_sum(const Matrix& m) {
    if (m.rows == 0) throw config_error("column_variance_sum: no rows");
    if (m.rows == 1) return 0.0;
    double total = 0.0;
    const double n = double(m.rows);
    for (std::size_t j = 0; j < m.cols; ++j) {
        // center on the first row so constant columns come out exactly zero
        const double ref = m(0, j);
        double mean = 0.0;
        for (std::size_t i = 0; i < m.rows; ++i) mean += m(i, j) - ref;
        mean /= n;
        double var = 0.0;
        for (std::size_t i = 0; i < m.rows; ++i) {
            double d = (m(i, j) - ref) - mean;
            var += d * d;
        }
        total += var / n;
    }
    return total;
}

} // namespace varkv
