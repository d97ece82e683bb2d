#include "oodscope/matrix.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace oodscope {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw std::invalid_argument("Matrix: data size does not match shape");
    }
}

Tensor3::Tensor3(std::size_t n, std::size_t p, std::size_t d, std::vector<double> data)
    : n_(n), p_(p), d_(d), data_(std::move(data)) {
    if (data_.size() != n_ * p_ * d_) {
        throw std::invalid_argument("Tensor3: data size does not match shape");
    }
}

double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw std::invalid_argument("matmul_transposed: inner dimension mismatch");
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto ai = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(ai, b.row(j));
    }
    return out;
}

}  // namespace oodscope
