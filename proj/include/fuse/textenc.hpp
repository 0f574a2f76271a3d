#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fuse/numerics/matrix.hpp"
#include "fuse/numerics/parameter.hpp"
#include "fuse/numerics/tape.hpp"
#include "fuse/util/csv.hpp"

namespace fuse::textenc {

using num::Matrix;

inline constexpr std::size_t kMinTextDim = 8;

/// Lowercased alphanumeric runs.
inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            cur += static_cast<char>(std::tolower(c));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

inline std::uint64_t token_hash(std::string_view tok, std::uint64_t salt) {
    std::uint64_t h = 0xcbf29ce484222325ULL ^ salt;
    for (unsigned char c : tok) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    // Final avalanche so nearby tokens spread across buckets.
    h ^= h >> 33;
    h *= 0xff51afd7ed558ccdULL;
    h ^= h >> 33;
    return h;
}

inline constexpr std::uint64_t kBucketSalt = 0x5f1e;
inline constexpr std::uint64_t kSignSalt = 0xa11ce;

inline std::size_t token_bucket(std::string_view tok, std::size_t dim) { return token_hash(tok, kBucketSalt) % dim; }

/// Frozen text encoder contract: N texts -> N x dim, unit rows for non-empty texts,
/// exactly zero rows for empty texts.
class TextEncoder {
public:
    virtual ~TextEncoder() = default;
    virtual std::size_t dim() const = 0;
    virtual Matrix encode(const std::vector<std::string>& texts) const = 0;
};

/// Signed hashed bag of tokens, L2-normalized.
inline Matrix embed(const std::vector<std::string>& texts, std::size_t d_text) {
    if (d_text < kMinTextDim) throw std::invalid_argument("embed: d_text must be >= 8");
    Matrix out(texts.size(), d_text);
    for (std::size_t r = 0; r < texts.size(); ++r) {
        auto row = out.row(r);
        for (const auto& tok : tokenize(texts[r])) {
            const double sign = (token_hash(tok, kSignSalt) & 1U) ? 1.0 : -1.0;
            row[token_bucket(tok, d_text)] += sign;
        }
        double norm = 0.0;
        for (double v : row) norm += v * v;
        if (norm > 0.0) {
            norm = std::sqrt(norm);
            for (double& v : row) v /= norm;
        }
    }
    return out;
}

class HashedBagEncoder final : public TextEncoder {
public:
    explicit HashedBagEncoder(std::size_t d_text) : d_(d_text) {
        if (d_ < kMinTextDim) throw std::invalid_argument("HashedBagEncoder: d_text must be >= 8");
    }
    std::size_t dim() const override { return d_; }
    Matrix encode(const std::vector<std::string>& texts) const override { return embed(texts, d_); }

private:
    std::size_t d_;
};

/// Precomputed vectors from an external encoder, one per distinct text.
class LookupEncoder final : public TextEncoder {
public:
    explicit LookupEncoder(std::size_t d_text) : d_(d_text) {}

    void add(std::string text, std::vector<double> vec) {
        if (vec.size() != d_) throw std::invalid_argument("LookupEncoder: vector width mismatch");
        double norm = 0.0;
        for (double v : vec) norm += v * v;
        if (norm > 0.0)
            for (double& v : vec) v /= std::sqrt(norm);
        table_[std::move(text)] = std::move(vec);
    }

    std::size_t dim() const override { return d_; }
    Matrix encode(const std::vector<std::string>& texts) const override {
        Matrix out(texts.size(), d_);
        for (std::size_t r = 0; r < texts.size(); ++r) {
            if (texts[r].empty()) continue;
            auto it = table_.find(texts[r]);
            if (it == table_.end()) throw std::out_of_range("LookupEncoder: no vector for text '" + texts[r] + "'");
            for (std::size_t c = 0; c < d_; ++c) out(r, c) = it->second[c];
        }
        return out;
    }

private:
    std::size_t d_;
    std::map<std::string, std::vector<double>> table_;
};

/// Reads `sensor_id, f_0 .. f_{d-1}` rows (header required) into an N x d matrix.
/// Nonzero rows are L2-normalized; sensors without a row stay zero.
inline Matrix load_external_embeddings(const std::string& path, std::size_t n) {
    const auto t = csv::read(path);
    if (t.header.size() < 1 + kMinTextDim || t.header[0] != "sensor_id")
        throw std::invalid_argument("'" + path + "': header must be sensor_id followed by >= 8 value columns");
    const std::size_t d = t.header.size() - 1;
    Matrix out(n, d);
    for (const auto& r : t.rows) {
        const auto id = csv::to_int(r[0], "sensor_id");
        if (id < 0 || static_cast<std::size_t>(id) >= n) throw std::out_of_range("'" + path + "': sensor id out of range");
        double norm = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            out(static_cast<std::size_t>(id), c) = csv::to_double(r[c + 1], path);
            norm += out(static_cast<std::size_t>(id), c) * out(static_cast<std::size_t>(id), c);
        }
        if (norm > 0.0)
            for (std::size_t c = 0; c < d; ++c) out(static_cast<std::size_t>(id), c) /= std::sqrt(norm);
    }
    return out;
}

struct CollisionReport {
    std::size_t distinct_texts = 0;
    std::size_t colliding_texts = 0;  // distinct texts sharing an embedding with another
    std::size_t vocabulary = 0;
    std::size_t shared_bucket_tokens = 0;  // tokens whose bucket also holds another token

    double text_collision_rate() const {
        return distinct_texts ? static_cast<double>(colliding_texts) / static_cast<double>(distinct_texts) : 0.0;
    }
    double token_bucket_share() const {
        return vocabulary ? static_cast<double>(shared_bucket_tokens) / static_cast<double>(vocabulary) : 0.0;
    }
};

inline CollisionReport measure_collisions(const std::vector<std::string>& corpus, std::size_t d_text) {
    CollisionReport rep;
    std::set<std::string> distinct(corpus.begin(), corpus.end());
    distinct.erase("");
    rep.distinct_texts = distinct.size();
    std::map<std::vector<double>, std::size_t> by_vec;
    std::set<std::string> vocab;
    for (const auto& t : distinct) {
        const Matrix e = embed({t}, d_text);
        ++by_vec[std::vector<double>(e.values().begin(), e.values().end())];
        for (auto& tok : tokenize(t)) vocab.insert(tok);
    }
    for (const auto& [v, count] : by_vec)
        if (count > 1) rep.colliding_texts += count;
    rep.vocabulary = vocab.size();
    std::map<std::size_t, std::size_t> bucket_load;
    for (const auto& tok : vocab) ++bucket_load[token_bucket(tok, d_text)];
    for (const auto& tok : vocab)
        if (bucket_load[token_bucket(tok, d_text)] > 1) ++rep.shared_bucket_tokens;
    return rep;
}

/// Learnable map from the frozen text space to the model dimension.
struct Projection {
    num::Parameter w;  // d_text x d
    num::Parameter b;  // 1 x d

    Projection() = default;
    Projection(std::size_t d_text, std::size_t d, num::Rng& rng)
        : w("text_proj.w", num::xavier_init(d_text, d, rng)), b("text_proj.b", Matrix(1, d)) {}

    num::ParamRefs params() { return {&w, &b}; }
};

/// e * w + b on the tape.
inline num::Var project(num::Tape& tape, num::Var e, Projection& p) {
    const Matrix& ev = tape.value(e);
    if (ev.cols() != p.w.value.rows())
        throw num::ShapeError("project: embedding " + ev.shape_str() + " vs projection " + p.w.value.shape_str());
    return tape.add_row(tape.matmul(e, tape.param(p.w)), tape.param(p.b));
}

inline Matrix project(const Matrix& e, Projection& p) {
    num::Tape t;
    return t.value(project(t, t.constant(e), p));
}

}  // namespace fuse::textenc
