#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace mole {

/// Dense row-major matrix of doubles.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    friend bool operator==(const Matrix&, const Matrix&) = default;
};

/// Rows selected by index, in the given order.
inline Matrix take_rows(const Matrix& m, std::span<const std::size_t> idx) {
    Matrix out(idx.size(), m.cols);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        auto src = m.row(idx[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

/// Columns selected by index, in the given order.
inline Matrix take_cols(const Matrix& m, std::span<const std::size_t> idx) {
    Matrix out(m.rows, idx.size());
    for (std::size_t r = 0; r < m.rows; ++r)
        for (std::size_t c = 0; c < idx.size(); ++c) out(r, c) = m(r, idx[c]);
    return out;
}

}  // namespace mole
