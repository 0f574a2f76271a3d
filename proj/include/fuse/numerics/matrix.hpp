#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fuse::num {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
        : rows_(rows), cols_(cols), data_(std::move(values)) {
        if (data_.size() != rows_ * cols_)
            throw ShapeError("Matrix: " + std::to_string(data_.size()) + " values for shape " +
                             std::to_string(rows_) + "x" + std::to_string(cols_));
    }
    Matrix(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows_ ? rows.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw ShapeError("Matrix: ragged initializer");
            data_.insert(data_.end(), r.begin(), r.end());
        }
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

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
    bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

    std::string shape_str() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    Matrix& operator+=(const Matrix& o) {
        require_same(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Matrix& operator-=(const Matrix& o) {
        require_same(o, "-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    Matrix& operator*=(double s) {
        for (double& v : data_) v *= s;
        return *this;
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    void require_same(const Matrix& o, const char* op) const {
        if (!same_shape(o))
            throw ShapeError(std::string("Matrix ") + op + ": " + shape_str() + " vs " +
                             o.shape_str());
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
inline Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
inline Matrix operator*(Matrix a, double s) { return a *= s; }

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff: " + a.shape_str() + " vs " + b.shape_str());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Accumulates a*b into out. Loop order i-k-j keeps the summation order fixed and
// lets the inner loop vectorize. Zero entries of a are skipped (sparse text rows).
// Each output element is summed over p in increasing order, as in the plain i-p-j loop.
// Blocks of W columns stay in registers across the whole p loop.
template <std::size_t W>
inline void mm_block(const double* ar, std::size_t a_stride, const double* b, std::size_t m, std::size_t k, double* o) {
    double acc[W];
    for (std::size_t j = 0; j < W; ++j) acc[j] = o[j];
    for (std::size_t p = 0; p < k; ++p) {
        const double av = ar[p * a_stride];
        if (av == 0.0) continue;
        const double* br = b + p * m;
        for (std::size_t j = 0; j < W; ++j) acc[j] += av * br[j];
    }
    for (std::size_t j = 0; j < W; ++j) o[j] = acc[j];
}

inline void mm_row(const double* ar, std::size_t a_stride, const double* b, std::size_t m, std::size_t k, double* o) {
    std::size_t j = 0;
    for (; j + 16 <= m; j += 16) mm_block<16>(ar, a_stride, b + j, m, k, o + j);
    if (j + 8 <= m) {
        mm_block<8>(ar, a_stride, b + j, m, k, o + j);
        j += 8;
    }
    if (j + 4 <= m) {
        mm_block<4>(ar, a_stride, b + j, m, k, o + j);
        j += 4;
    }
    for (; j < m; ++j) mm_block<1>(ar, a_stride, b + j, m, k, o + j);
}

inline void matmul_accumulate(const Matrix& a, const Matrix& b, Matrix& out) {
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    for (std::size_t i = 0; i < n; ++i) mm_row(a.data() + i * k, 1, b.data(), m, k, out.data() + i * m);
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: shape mismatch " + a.shape_str() + " * " + b.shape_str());
    Matrix out(a.rows(), b.cols());
    matmul_accumulate(a, b, out);
    return out;
}

/// a^T * b without materializing the transpose.
inline void matmul_tn_accumulate(const Matrix& a, const Matrix& b, Matrix& out) {
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    for (std::size_t i = 0; i < k; ++i) mm_row(a.data() + i, k, b.data(), m, n, out.data() + i * m);
}

/// a * b^T. Runs as a * (b^T) through the row kernel so zeros in `a` are skipped.
inline void matmul_nt_accumulate(const Matrix& a, const Matrix& b, Matrix& out) {
    Matrix bt(b.cols(), b.rows());
    for (std::size_t i = 0; i < b.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) bt(j, i) = b(i, j);
    matmul_accumulate(a, bt, out);
}

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

inline Matrix softmax_rows(const Matrix& m) {
    Matrix out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto in = m.row(r);
        auto o = out.row(r);
        const double mx = *std::max_element(in.begin(), in.end());
        double sum = 0.0;
        for (std::size_t c = 0; c < in.size(); ++c) sum += (o[c] = std::exp(in[c] - mx));
        for (double& v : o) v /= sum;
    }
    return out;
}

inline constexpr double kDefaultLayerNormEps = 1e-5;

/// Row-wise layer normalization with population variance. gamma/beta are 1 x cols.
inline Matrix layer_norm_rows(const Matrix& m, const Matrix& gamma, const Matrix& beta,
                              double eps = kDefaultLayerNormEps) {
    if (gamma.size() != m.cols() || beta.size() != m.cols())
        throw ShapeError("layer_norm_rows: gamma/beta " + gamma.shape_str() + "/" +
                         beta.shape_str() + " for input " + m.shape_str());
    if (!(eps > 0.0)) throw std::invalid_argument("layer_norm_rows: eps must be positive");
    Matrix out(m.rows(), m.cols());
    const double n = static_cast<double>(m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto in = m.row(r);
        double mean = 0.0;
        for (double v : in) mean += v;
        mean /= n;
        double var = 0.0;
        for (double v : in) var += (v - mean) * (v - mean);
        var /= n;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < in.size(); ++c)
            out(r, c) = (in[c] - mean) * inv * gamma[c] + beta[c];
    }
    return out;
}

inline std::ostream& operator<<(std::ostream& os, const Matrix& m) {
    os << "[";
    for (std::size_t r = 0; r < m.rows(); ++r) {
        os << (r ? "; " : "");
        for (std::size_t c = 0; c < m.cols(); ++c) os << (c ? ", " : "") << m(r, c);
    }
    return os << "]";
}

}  // namespace fuse::num
