#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "oodscope/matrix.hpp"

namespace oodscope {

/// n x d embeddings, optionally with n x p x d patch embeddings.
///
/// Construction enforces n >= 1, d >= 2, finite values, and (when
/// `unit_norm` is set) row norms within 1e-6 of one for every global and
/// patch row. Instances are immutable.
class EmbeddingMatrix {
public:
    static constexpr double kUnitNormTolerance = 1e-6;

    EmbeddingMatrix(Matrix global, std::optional<Tensor3> local, bool unit_norm);
    explicit EmbeddingMatrix(Matrix global, bool unit_norm = false)
        : EmbeddingMatrix(std::move(global), std::nullopt, unit_norm) {}

    std::size_t n() const noexcept { return global_.rows(); }
    std::size_t d() const noexcept { return global_.cols(); }
    std::size_t p() const noexcept { return local_ ? local_->patches() : 0; }
    bool unit_norm() const noexcept { return unit_norm_; }
    bool has_local() const noexcept { return local_.has_value(); }

    const Matrix& global() const noexcept { return global_; }
    const std::optional<Tensor3>& local() const noexcept { return local_; }

    /// Same matrix with only the listed rows (in listed order).
    EmbeddingMatrix select_rows(const std::vector<std::size_t>& rows) const;
    /// Same matrix with the patch embeddings dropped.
    EmbeddingMatrix without_local() const { return EmbeddingMatrix(global_, std::nullopt, unit_norm_); }

    bool operator==(const EmbeddingMatrix&) const = default;

private:
    Matrix global_;
    std::optional<Tensor3> local_;
    bool unit_norm_;
};

/// Integer class labels in [0, M).
class LabelVector {
public:
    LabelVector(std::vector<int> values, int num_classes);

    std::size_t size() const noexcept { return values_.size(); }
    int num_classes() const noexcept { return num_classes_; }
    int operator[](std::size_t i) const { return values_[i]; }
    const std::vector<int>& values() const noexcept { return values_; }

    LabelVector select(const std::vector<std::size_t>& rows) const;

    bool operator==(const LabelVector&) const = default;

private:
    std::vector<int> values_;
    int num_classes_;
};

// --- OSEM binary format -----------------------------------------------------
//
//   offset  size  field
//        0     4  magic "OSEM"
//        4     4  version, u32 LE (= 1)
//        8     4  flags, u32 LE (bit0 unit_norm, bit1 has_local)
//       12     8  n, u64 LE
//       20     8  p, u64 LE (0 without patches)
//       28     8  d, u64 LE
//       36     .  n*d f32 LE row-major, then n*p*d f32 LE (if has_local)

inline constexpr std::uint32_t kOsemVersion = 1;
inline constexpr std::uint32_t kFlagUnitNorm = 1u << 0;
inline constexpr std::uint32_t kFlagHasLocal = 1u << 1;
inline constexpr std::size_t kOsemHeaderSize = 36;

struct OsemHeader {
    std::uint32_t version = kOsemVersion;
    std::uint32_t flags = 0;
    std::uint64_t n = 0;
    std::uint64_t p = 0;
    std::uint64_t d = 0;
};

/// Encodes to the OSEM byte layout. Narrowing rounds to nearest even.
std::vector<std::uint8_t> encode_embeddings(const EmbeddingMatrix& m);
/// Decodes an OSEM buffer; throws FormatError naming the failing byte offset.
EmbeddingMatrix decode_embeddings(const std::vector<std::uint8_t>& bytes);
OsemHeader decode_header(const std::vector<std::uint8_t>& bytes);

EmbeddingMatrix load_embeddings(const std::filesystem::path& path);
void save_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path);
/// Reads and checks only the 36-byte header.
OsemHeader read_embedding_header(const std::filesystem::path& path);

/// Row-wise (and patch-row-wise) unit normalization. Throws ValidationError
/// naming the first row whose norm is below 1e-12.
EmbeddingMatrix l2_normalize(const EmbeddingMatrix& m);

// --- labels -----------------------------------------------------------------

/// JSON array of integers. `num_classes` bounds the values.
LabelVector load_labels(const std::filesystem::path& path, int num_classes);
void save_labels(const LabelVector& labels, const std::filesystem::path& path);

// --- manifest ---------------------------------------------------------------

enum class SplitRole { IdTrain, IdTest, OodSemantic, OodCovariate, OodFar };

const char* split_name(SplitRole role);
std::optional<SplitRole> parse_split_name(const std::string& name);
bool is_ood(SplitRole role);
/// All roles in canonical order.
const std::vector<SplitRole>& all_split_roles();

struct SplitRef {
    std::filesystem::path embeddings;
    std::optional<std::filesystem::path> labels;
};

/// Benchmark description. Paths are stored as written in the file;
/// `resolve` makes them absolute against the manifest's directory.
struct BenchmarkManifest {
    std::map<SplitRole, SplitRef> splits;
    std::filesystem::path hierarchy;
    std::map<std::string, std::string> metadata;
    std::filesystem::path base_dir;

    std::filesystem::path resolve(const std::filesystem::path& p) const;
    bool has(SplitRole role) const { return splits.count(role) != 0; }
};

BenchmarkManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const BenchmarkManifest& m, const std::filesystem::path& path);
/// Empty iff every manifest invariant holds. Reads file headers and label
/// sidecars, plus the hierarchy's d and M.
std::vector<std::string> validate_manifest(const BenchmarkManifest& m);

}  // namespace oodscope
