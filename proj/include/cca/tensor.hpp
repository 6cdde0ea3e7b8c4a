#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

namespace cca {

/// Dense row-major matrix.
template <class Real>
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<Real> data;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), Real(0)) {}

    Real* row(int r) { return data.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(cols); }
    const Real* row(int r) const { return data.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(cols); }
    std::span<const Real> row_span(int r) const { return {row(r), static_cast<std::size_t>(cols)}; }
    Real& at(int r, int c) { return row(r)[c]; }
    Real at(int r, int c) const { return row(r)[c]; }
    void fill(Real v) { std::fill(data.begin(), data.end(), v); }
    void resize(int r, int c) {
        rows = r;
        cols = c;
        data.assign(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), Real(0));
    }
};

using Logits = Matrix<float>;

}  // namespace cca
