#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace oodscope {

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Dense n x p x d tensor, sample-major then patch-major.
class Tensor3 {
public:
    Tensor3() = default;
    Tensor3(std::size_t n, std::size_t p, std::size_t d, double fill = 0.0)
        : n_(n), p_(p), d_(d), data_(n * p * d, fill) {}
    Tensor3(std::size_t n, std::size_t p, std::size_t d, std::vector<double> data);

    std::size_t samples() const noexcept { return n_; }
    std::size_t patches() const noexcept { return p_; }
    std::size_t dim() const noexcept { return d_; }

    double& operator()(std::size_t i, std::size_t k, std::size_t j) {
        return data_[(i * p_ + k) * d_ + j];
    }
    double operator()(std::size_t i, std::size_t k, std::size_t j) const {
        return data_[(i * p_ + k) * d_ + j];
    }

    std::span<double> patch(std::size_t i, std::size_t k) { return {data_.data() + (i * p_ + k) * d_, d_}; }
    std::span<const double> patch(std::size_t i, std::size_t k) const {
        return {data_.data() + (i * p_ + k) * d_, d_};
    }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }

    bool operator==(const Tensor3&) const = default;

private:
    std::size_t n_ = 0;
    std::size_t p_ = 0;
    std::size_t d_ = 0;
    std::vector<double> data_;
};

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

/// rows(a) . rows(b)^T, fixed left-to-right summation per entry.
Matrix matmul_transposed(const Matrix& a, const Matrix& b);

}  // namespace oodscope
