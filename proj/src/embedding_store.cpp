#include "oodscope/embedding_store.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "oodscope/error.hpp"

namespace oodscope {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr std::array<std::uint8_t, 4> kMagic = {'O', 'S', 'E', 'M'};

void check_finite(std::span<const double> values, const char* what) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw ValidationError(std::string(what) + ": non-finite value at element " + std::to_string(i));
        }
    }
}

void check_unit(std::span<const double> row, const std::string& where) {
    const double norm = norm2(row);
    if (std::abs(norm - 1.0) > EmbeddingMatrix::kUnitNormTolerance) {
        std::ostringstream os;
        os.precision(17);
        os << where << " is flagged unit-norm but has norm " << norm;
        throw ValidationError(os.str());
    }
}

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
    for (std::size_t b = 0; b < sizeof(T); ++b) out.push_back(static_cast<std::uint8_t>(value >> (8 * b)));
}

template <typename T>
T get_le(const std::vector<std::uint8_t>& in, std::size_t offset) {
    T value = 0;
    for (std::size_t b = 0; b < sizeof(T); ++b) value |= static_cast<T>(in[offset + b]) << (8 * b);
    return value;
}

void put_f32(std::vector<std::uint8_t>& out, double value) {
    put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(value)));
}

// Returns a*b*c*4 or throws if it overflows u64.
std::uint64_t payload_bytes(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t at) {
    constexpr auto kMax = std::numeric_limits<std::uint64_t>::max();
    std::uint64_t total = 4;
    for (auto f : {a, b, c}) {
        if (f != 0 && total > kMax / f) throw FormatError("shape overflows payload size", at);
        total *= f;
    }
    return total;
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError("'" + path.string() + "': invalid JSON: " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace

// --- EmbeddingMatrix ----------------------------------------------------------

EmbeddingMatrix::EmbeddingMatrix(Matrix global, std::optional<Tensor3> local, bool unit_norm)
    : global_(std::move(global)), local_(std::move(local)), unit_norm_(unit_norm) {
    if (global_.rows() < 1) throw ValidationError("embedding matrix needs n >= 1");
    if (global_.cols() < 2) throw ValidationError("embedding matrix needs d >= 2, got " + std::to_string(global_.cols()));
    check_finite(global_.values(), "global embeddings");
    if (local_) {
        if (local_->samples() != n() || local_->dim() != d()) {
            throw ValidationError("local embeddings shape does not match global n x d");
        }
        if (local_->patches() < 1) throw ValidationError("local embeddings need p >= 1");
        check_finite(local_->values(), "local embeddings");
    }
    if (unit_norm_) {
        for (std::size_t i = 0; i < n(); ++i) check_unit(global_.row(i), "row " + std::to_string(i));
        if (local_) {
            for (std::size_t i = 0; i < n(); ++i)
                for (std::size_t k = 0; k < p(); ++k)
                    check_unit(local_->patch(i, k), "patch (" + std::to_string(i) + ", " + std::to_string(k) + ")");
        }
    }
}

EmbeddingMatrix EmbeddingMatrix::select_rows(const std::vector<std::size_t>& rows) const {
    Matrix g(rows.size(), d());
    std::optional<Tensor3> loc;
    if (local_) loc.emplace(rows.size(), p(), d());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= n()) throw ValidationError("row index " + std::to_string(rows[r]) + " out of range");
        auto src = global_.row(rows[r]);
        std::copy(src.begin(), src.end(), g.row(r).begin());
        if (local_) {
            for (std::size_t k = 0; k < p(); ++k) {
                auto ps = local_->patch(rows[r], k);
                std::copy(ps.begin(), ps.end(), loc->patch(r, k).begin());
            }
        }
    }
    return EmbeddingMatrix(std::move(g), std::move(loc), unit_norm_);
}

// --- LabelVector --------------------------------------------------------------

LabelVector::LabelVector(std::vector<int> values, int num_classes)
    : values_(std::move(values)), num_classes_(num_classes) {
    if (num_classes_ < 1) throw ValidationError("label vector needs M >= 1");
    for (std::size_t i = 0; i < values_.size(); ++i) {
        if (values_[i] < 0 || values_[i] >= num_classes_) {
            throw ValidationError("label " + std::to_string(values_[i]) + " at index " + std::to_string(i) +
                                  " outside [0, " + std::to_string(num_classes_) + ")");
        }
    }
}

LabelVector LabelVector::select(const std::vector<std::size_t>& rows) const {
    std::vector<int> out;
    out.reserve(rows.size());
    for (auto r : rows) out.push_back(values_.at(r));
    return LabelVector(std::move(out), num_classes_);
}

// --- OSEM codec ---------------------------------------------------------------

std::vector<std::uint8_t> encode_embeddings(const EmbeddingMatrix& m) {
    std::vector<std::uint8_t> out;
    const std::size_t floats = m.n() * m.d() * (1 + m.p());
    out.reserve(kOsemHeaderSize + 4 * floats);
    for (auto c : kMagic) out.push_back(static_cast<std::uint8_t>(c));
    put_le<std::uint32_t>(out, kOsemVersion);
    std::uint32_t flags = 0;
    if (m.unit_norm()) flags |= kFlagUnitNorm;
    if (m.has_local()) flags |= kFlagHasLocal;
    put_le<std::uint32_t>(out, flags);
    put_le<std::uint64_t>(out, m.n());
    put_le<std::uint64_t>(out, m.p());
    put_le<std::uint64_t>(out, m.d());
    for (double v : m.global().values()) put_f32(out, v);
    if (m.local()) {
        for (double v : m.local()->values()) put_f32(out, v);
    }
    return out;
}

OsemHeader decode_header(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 4) throw FormatError("truncated", bytes.size());
    if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) throw FormatError("bad magic", 0);
    if (bytes.size() < kOsemHeaderSize) throw FormatError("truncated", bytes.size());
    OsemHeader h;
    h.version = get_le<std::uint32_t>(bytes, 4);
    if (h.version != kOsemVersion) {
        throw FormatError("version mismatch (found " + std::to_string(h.version) + ", expected " +
                              std::to_string(kOsemVersion) + ")",
                          4);
    }
    h.flags = get_le<std::uint32_t>(bytes, 8);
    if ((h.flags & ~(kFlagUnitNorm | kFlagHasLocal)) != 0) throw FormatError("unknown flag bits", 8);
    h.n = get_le<std::uint64_t>(bytes, 12);
    h.p = get_le<std::uint64_t>(bytes, 20);
    h.d = get_le<std::uint64_t>(bytes, 28);
    const bool has_local = (h.flags & kFlagHasLocal) != 0;
    if (has_local && h.p == 0) throw FormatError("has_local flag set with p = 0", 20);
    if (!has_local && h.p != 0) throw FormatError("p != 0 without has_local flag", 20);
    return h;
}

EmbeddingMatrix decode_embeddings(const std::vector<std::uint8_t>& bytes) {
    const OsemHeader h = decode_header(bytes);
    const std::uint64_t global_bytes = payload_bytes(h.n, h.d, 1, 12);
    const std::uint64_t local_bytes = payload_bytes(h.n, h.p, h.d, 12);
    const std::uint64_t expected = kOsemHeaderSize + global_bytes + local_bytes;
    if (expected < global_bytes) throw FormatError("shape overflows payload size", 12);
    if (bytes.size() < expected) throw FormatError("truncated", bytes.size());
    if (bytes.size() > expected) throw FormatError("trailing bytes", expected);

    auto read_floats = [&](std::size_t offset, std::size_t count) {
        std::vector<double> values(count);
        for (std::size_t i = 0; i < count; ++i) {
            const std::size_t at = offset + 4 * i;
            const float f = std::bit_cast<float>(get_le<std::uint32_t>(bytes, at));
            if (!std::isfinite(f)) throw FormatError(std::isnan(f) ? "NaN value" : "infinite value", at);
            values[i] = static_cast<double>(f);
        }
        return values;
    };

    const std::size_t n = h.n, p = h.p, d = h.d;
    Matrix global(n, d, read_floats(kOsemHeaderSize, n * d));
    std::optional<Tensor3> local;
    if (p > 0) local.emplace(n, p, d, read_floats(kOsemHeaderSize + global_bytes, n * p * d));
    return EmbeddingMatrix(std::move(global), std::move(local), (h.flags & kFlagUnitNorm) != 0);
}

EmbeddingMatrix load_embeddings(const fs::path& path) {
    const auto bytes = read_file(path);
    try {
        return decode_embeddings(bytes);
    } catch (const FormatError& e) {
        throw FormatError("'" + path.string() + "': " + e.detail(), e.offset());
    }
}

OsemHeader read_embedding_header(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::vector<std::uint8_t> head(kOsemHeaderSize);
    in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
    head.resize(static_cast<std::size_t>(in.gcount()));
    return decode_header(head);
}

void save_embeddings(const EmbeddingMatrix& m, const fs::path& path) {
    const auto bytes = encode_embeddings(m);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

EmbeddingMatrix l2_normalize(const EmbeddingMatrix& m) {
    constexpr double kMinNorm = 1e-12;
    Matrix g = m.global();
    for (std::size_t i = 0; i < g.rows(); ++i) {
        auto r = g.row(i);
        const double norm = norm2(r);
        if (norm < kMinNorm) throw ValidationError("zero-norm row " + std::to_string(i));
        for (double& v : r) v /= norm;
    }
    std::optional<Tensor3> local = m.local();
    if (local) {
        for (std::size_t i = 0; i < local->samples(); ++i) {
            for (std::size_t k = 0; k < local->patches(); ++k) {
                auto r = local->patch(i, k);
                const double norm = norm2(r);
                if (norm < kMinNorm) {
                    throw ValidationError("zero-norm patch row (" + std::to_string(i) + ", " + std::to_string(k) + ")");
                }
                for (double& v : r) v /= norm;
            }
        }
    }
    return EmbeddingMatrix(std::move(g), std::move(local), true);
}

// --- labels -------------------------------------------------------------------

LabelVector load_labels(const fs::path& path, int num_classes) {
    const json doc = read_json(path);
    if (!doc.is_array()) throw ValidationError("'" + path.string() + "': labels must be a JSON array");
    std::vector<int> values;
    values.reserve(doc.size());
    for (const auto& v : doc) {
        if (!v.is_number_integer()) throw ValidationError("'" + path.string() + "': labels must be integers");
        values.push_back(v.get<int>());
    }
    return LabelVector(std::move(values), num_classes);
}

void save_labels(const LabelVector& labels, const fs::path& path) {
    write_text(path, json(labels.values()).dump() + "\n");
}

// --- manifest -----------------------------------------------------------------

namespace {
const std::vector<SplitRole> kRoles = {SplitRole::IdTrain, SplitRole::IdTest, SplitRole::OodSemantic,
                                       SplitRole::OodCovariate, SplitRole::OodFar};
}

const char* split_name(SplitRole role) {
    switch (role) {
        case SplitRole::IdTrain: return "id_train";
        case SplitRole::IdTest: return "id_test";
        case SplitRole::OodSemantic: return "ood_semantic";
        case SplitRole::OodCovariate: return "ood_covariate";
        case SplitRole::OodFar: return "ood_far";
    }
    return "?";
}

std::optional<SplitRole> parse_split_name(const std::string& name) {
    for (auto r : kRoles)
        if (name == split_name(r)) return r;
    return std::nullopt;
}

bool is_ood(SplitRole role) {
    return role == SplitRole::OodSemantic || role == SplitRole::OodCovariate || role == SplitRole::OodFar;
}

const std::vector<SplitRole>& all_split_roles() { return kRoles; }

fs::path BenchmarkManifest::resolve(const fs::path& p) const {
    if (p.is_absolute() || base_dir.empty()) return p;
    return base_dir / p;
}

BenchmarkManifest load_manifest(const fs::path& path) {
    const json doc = read_json(path);
    const std::string where = "'" + path.string() + "': ";
    if (!doc.is_object()) throw ValidationError(where + "manifest must be a JSON object");
    BenchmarkManifest m;
    m.base_dir = path.parent_path();
    if (!doc.contains("splits") || !doc["splits"].is_object()) throw ValidationError(where + "missing \"splits\" object");
    for (const auto& [name, ref] : doc["splits"].items()) {
        auto role = parse_split_name(name);
        if (!role) throw ValidationError(where + "unknown split \"" + name + "\"");
        if (!ref.is_object() || !ref.contains("embeddings") || !ref["embeddings"].is_string()) {
            throw ValidationError(where + "split \"" + name + "\" needs an \"embeddings\" path");
        }
        SplitRef sr;
        sr.embeddings = ref["embeddings"].get<std::string>();
        if (ref.contains("labels") && !ref["labels"].is_null()) sr.labels = ref["labels"].get<std::string>();
        m.splits.emplace(*role, std::move(sr));
    }
    if (!doc.contains("hierarchy") || !doc["hierarchy"].is_string()) throw ValidationError(where + "missing \"hierarchy\" path");
    m.hierarchy = doc["hierarchy"].get<std::string>();
    if (doc.contains("metadata")) {
        for (const auto& [k, v] : doc["metadata"].items()) m.metadata[k] = v.is_string() ? v.get<std::string>() : v.dump();
    }
    return m;
}

void save_manifest(const BenchmarkManifest& m, const fs::path& path) {
    json doc;
    doc["format"] = "oodscope-manifest";
    doc["version"] = 1;
    json splits = json::object();
    for (const auto& [role, ref] : m.splits) {
        json s;
        s["embeddings"] = ref.embeddings.generic_string();
        if (ref.labels) s["labels"] = ref.labels->generic_string();
        splits[split_name(role)] = s;
    }
    doc["splits"] = splits;
    doc["hierarchy"] = m.hierarchy.generic_string();
    doc["metadata"] = m.metadata;
    write_text(path, doc.dump(2) + "\n");
}

std::vector<std::string> validate_manifest(const BenchmarkManifest& m) {
    std::vector<std::string> violations;
    if (!m.has(SplitRole::IdTest)) violations.push_back("missing id_test split");
    bool any_ood = false;
    for (const auto& [role, ref] : m.splits) any_ood = any_ood || is_ood(role);
    if (!any_ood) violations.push_back("no ood_* split present");

    std::optional<std::uint64_t> dim;
    std::optional<int> num_classes;
    const fs::path hier = m.resolve(m.hierarchy);
    if (!fs::exists(hier)) {
        violations.push_back("dangling file reference: hierarchy '" + hier.string() + "'");
    } else {
        try {
            const json h = read_json(hier);
            dim = h.at("d").get<std::uint64_t>();
            num_classes = h.at("M").get<int>();
        } catch (const std::exception& e) {
            violations.push_back("unreadable hierarchy '" + hier.string() + "': " + e.what());
        }
    }

    for (const auto& [role, ref] : m.splits) {
        const std::string name = split_name(role);
        const fs::path emb = m.resolve(ref.embeddings);
        if (!fs::exists(emb)) {
            violations.push_back("dangling file reference: split " + name + " embeddings '" + emb.string() + "'");
            continue;
        }
        OsemHeader header;
        try {
            header = read_embedding_header(emb);
        } catch (const std::exception& e) {
            violations.push_back("split " + name + ": " + e.what());
            continue;
        }
        if (!dim) {
            dim = header.d;
        } else if (header.d != *dim) {
            violations.push_back("dimension mismatch: split " + name + " has d=" + std::to_string(header.d) +
                                 ", expected d=" + std::to_string(*dim));
        }
        if ((role == SplitRole::IdTrain) && !ref.labels) violations.push_back("split id_train has no labels");
        if (ref.labels) {
            const fs::path lab = m.resolve(*ref.labels);
            if (!fs::exists(lab)) {
                violations.push_back("dangling file reference: split " + name + " labels '" + lab.string() + "'");
                continue;
            }
            try {
                const auto labels = load_labels(lab, num_classes.value_or(std::numeric_limits<int>::max()));
                if (labels.size() != header.n) {
                    violations.push_back("label count mismatch: split " + name + " has " + std::to_string(labels.size()) +
                                         " labels for n=" + std::to_string(header.n));
                }
            } catch (const std::exception& e) {
                violations.push_back("split " + name + " labels: " + e.what());
            }
        }
    }
    return violations;
}

}  // namespace oodscope
