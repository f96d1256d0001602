/*
 * Copyright 2026 The msda Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace msda {

/// Raised when operand dimensions do not line up.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when an input violates a documented precondition.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when training produces NaN/Inf.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// File-system or on-disk format problem.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

template <typename... Args>
std::string concat(const Args&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

}  // namespace detail

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError(detail::concat("matrix data length ", data_.size(),
                                            " does not equal ", rows_, "x", cols_));
        }
    }

    static Matrix from_rows(const std::vector<std::vector<double>>& rows) {
        if (rows.empty()) return {};
        Matrix m(rows.size(), rows.front().size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (rows[r].size() != m.cols_) {
                throw ShapeError(detail::concat("row ", r, " has ", rows[r].size(),
                                                " columns, expected ", m.cols_));
            }
            std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
        }
        return m;
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<double>& data() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline bool all_finite(const Matrix& m) {
    for (double v : m.data()) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(detail::concat("cannot compare ", a.rows(), "x", a.cols(), " with ",
                                        b.rows(), "x", b.cols()));
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    }
    return worst;
}

/// a * b
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError(detail::concat("matmul: lhs has ", a.cols(), " columns but rhs has ",
                                        b.rows(), " rows"));
    }
    Matrix out(a.rows(), b.cols());
    const std::size_t inner = a.cols();
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* dst = out.row(i).data();
        const double* lhs = a.row(i).data();
        for (std::size_t k = 0; k < inner; ++k) {
            const double s = lhs[k];
            if (s == 0.0) continue;
            const double* rhs = b.row(k).data();
            for (std::size_t j = 0; j < n; ++j) dst[j] += s * rhs[j];
        }
    }
    return out;
}

/// transpose(a) * b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError(detail::concat("matmul_tn: lhs has ", a.rows(), " rows but rhs has ",
                                        b.rows(), " rows"));
    }
    Matrix out(a.cols(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const double* lhs = a.row(r).data();
        const double* rhs = b.row(r).data();
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double s = lhs[i];
            if (s == 0.0) continue;
            double* dst = out.row(i).data();
            for (std::size_t j = 0; j < n; ++j) dst[j] += s * rhs[j];
        }
    }
    return out;
}

/// a * transpose(b)
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError(detail::concat("matmul_nt: lhs has ", a.cols(), " columns but rhs has ",
                                        b.cols(), " columns"));
    }
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* lhs = a.row(i).data();
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const double* rhs = b.row(j).data();
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) acc += lhs[k] * rhs[k];
            out(i, j) = acc;
        }
    }
    return out;
}

/// Stacks matrices with equal column counts on top of each other.
inline Matrix vstack(std::span<const Matrix> parts) {
    if (parts.empty()) return {};
    const std::size_t cols = parts.front().cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols) {
            throw ShapeError(detail::concat("vstack: column mismatch ", p.cols(), " vs ", cols));
        }
        rows += p.rows();
    }
    Matrix out(rows, cols);
    auto dst = out.data().begin();
    for (const auto& p : parts) dst = std::copy(p.data().begin(), p.data().end(), dst);
    return out;
}

inline Matrix select_rows(const Matrix& m, std::span<const std::size_t> indices) {
    Matrix out(indices.size(), m.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= m.rows()) {
            throw ShapeError(detail::concat("row index ", indices[i], " out of range for ",
                                            m.rows(), " rows"));
        }
        auto src = m.row(indices[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

/// Contiguous block of rows [first, first + count).
inline Matrix slice_rows(const Matrix& m, std::size_t first, std::size_t count) {
    if (first + count > m.rows()) {
        throw ShapeError(detail::concat("row slice [", first, ", ", first + count,
                                        ") exceeds ", m.rows(), " rows"));
    }
    Matrix out(count, m.cols());
    std::copy(m.data().begin() + static_cast<std::ptrdiff_t>(first * m.cols()),
              m.data().begin() + static_cast<std::ptrdiff_t>((first + count) * m.cols()),
              out.data().begin());
    return out;
}

using Rng = std::mt19937_64;

/// Independent stream `stream` of a run seeded with `seed`.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return Rng(seq);
}

}  // namespace msda
