#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "oodscope/embedding_store.hpp"
#include "oodscope/matrix.hpp"
#include "oodscope/random.hpp"

namespace testutil {

inline oodscope::Matrix random_matrix(oodscope::Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
    oodscope::Matrix m(rows, cols);
    for (auto& v : m.values()) v = scale * rng.gaussian();
    return m;
}

inline void normalize_rows(oodscope::Matrix& m) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto r = m.row(i);
        double s = 0.0;
        for (double v : r) s += v * v;
        s = std::sqrt(s);
        for (double& v : r) v /= s;
    }
}

inline oodscope::Matrix random_unit_matrix(oodscope::Rng& rng, std::size_t rows, std::size_t cols) {
    auto m = random_matrix(rng, rows, cols);
    normalize_rows(m);
    return m;
}

/// Uniform entries in [lo, hi].
inline oodscope::Matrix uniform_matrix(oodscope::Rng& rng, std::size_t rows, std::size_t cols, double lo, double hi) {
    oodscope::Matrix m(rows, cols);
    for (auto& v : m.values()) v = lo + (hi - lo) * rng.uniform();
    return m;
}

inline oodscope::Tensor3 random_unit_patches(oodscope::Rng& rng, std::size_t n, std::size_t p, std::size_t d) {
    oodscope::Tensor3 t(n, p, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < p; ++k) {
            auto row = t.patch(i, k);
            double s = 0.0;
            for (double& v : row) {
                v = rng.gaussian();
                s += v * v;
            }
            s = std::sqrt(s);
            for (double& v : row) v /= s;
        }
    return t;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("oodscope_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << text;
}

}  // namespace testutil
