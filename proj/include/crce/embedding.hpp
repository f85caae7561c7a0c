#pragma once

#include "crce/dataset.hpp"
#include "crce/error.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <vector>

namespace crce {

template <typename Scalar>
struct BasicEmbedding {
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> values;
    bool normalized = false;

    Eigen::Index dim() const { return values.size(); }
};

using EmbeddingVector = BasicEmbedding<double>;

/// Per-token conditioning sequence, one row per token.
using Conditioning = Eigen::MatrixXd;

/// u.v / (|u||v|), clamped into [-1, 1].
template <typename DerivedU, typename DerivedV>
typename DerivedU::Scalar cosine_similarity(const Eigen::MatrixBase<DerivedU>& u, const Eigen::MatrixBase<DerivedV>& v) {
    using Scalar = typename DerivedU::Scalar;
    if (u.size() != v.size())
        throw ShapeError("cosine_similarity: dimension mismatch " + std::to_string(u.size()) + " vs " +
                         std::to_string(v.size()));
    const Scalar nu = u.norm();
    const Scalar nv = v.norm();
    if (nu == Scalar(0) || nv == Scalar(0))
        throw ValidationError("cosine_similarity: zero vector");
    const Scalar s = u.dot(v) / (nu * nv);
    return std::clamp(s, Scalar(-1), Scalar(1));
}

template <typename DerivedU, typename DerivedV>
typename DerivedU::Scalar euclidean_distance(const Eigen::MatrixBase<DerivedU>& u, const Eigen::MatrixBase<DerivedV>& v) {
    if (u.size() != v.size())
        throw ShapeError("euclidean_distance: dimension mismatch " + std::to_string(u.size()) + " vs " +
                         std::to_string(v.size()));
    return (u - v).norm();
}

template <typename Scalar>
Scalar cosine_similarity(const BasicEmbedding<Scalar>& u, const BasicEmbedding<Scalar>& v) {
    return cosine_similarity(u.values, v.values);
}

template <typename Scalar>
Scalar euclidean_distance(const BasicEmbedding<Scalar>& u, const BasicEmbedding<Scalar>& v) {
    return euclidean_distance(u.values, v.values);
}

/// Distance between unit vectors with the given cosine: sqrt(2(1 - cos)).
template <typename Scalar>
Scalar chord_length(Scalar cosine) {
    return std::sqrt(std::max(Scalar(0), Scalar(2) * (Scalar(1) - cosine)));
}

/// Uniform draw from the L2 ball of `radius` around `center`. Not renormalised.
template <typename Derived, typename Rng>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> sphere_sample(const Eigen::MatrixBase<Derived>& center,
                                                                          typename Derived::Scalar radius, Rng& rng) {
    using Scalar = typename Derived::Scalar;
    if (!(radius > Scalar(0)))
        throw ValidationError("sphere_sample: radius must be positive");
    const Eigen::Index d = center.size();
    std::normal_distribution<Scalar> gauss(0, 1);
    std::uniform_real_distribution<Scalar> unif(0, 1);
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dir(d);
    Scalar n = 0;
    do {
        for (Eigen::Index i = 0; i < d; ++i)
            dir[i] = gauss(rng);
        n = dir.norm();
    } while (n == Scalar(0));
    const Scalar r = radius * std::pow(unif(rng), Scalar(1) / static_cast<Scalar>(d));
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out = center.reshaped();
    out += (r / n) * dir;
    return out;
}

template <typename Scalar, typename Rng>
BasicEmbedding<Scalar> sphere_sample(const BasicEmbedding<Scalar>& center, Scalar radius, Rng& rng) {
    return {sphere_sample(center.values, radius, rng), false};
}

/// Pluggable text encoder. `encode_pooled` returns the unit-normalised sentence
/// embedding used for analysis; `encode_sequence` returns the per-token states used
/// to condition a diffusion model.
class TextEncoder {
public:
    virtual ~TextEncoder() = default;

    virtual std::string id() const = 0;
    virtual EmbeddingVector encode_pooled(const std::string& text) = 0;
    virtual Conditioning encode_sequence(const std::string& text) = 0;
};

/// Funnels every call through one mutex; encoder adapters hold model state.
class SerializedEncoder : public TextEncoder {
public:
    explicit SerializedEncoder(std::shared_ptr<TextEncoder> inner) : inner_(std::move(inner)) {}

    std::string id() const override { return inner_->id(); }
    EmbeddingVector encode_pooled(const std::string& text) override;
    Conditioning encode_sequence(const std::string& text) override;

private:
    std::shared_ptr<TextEncoder> inner_;
    std::mutex mutex_;
};

/// Pooled-embedding cache keyed by (encoder id, text), persisted as JSON.
class CachedEncoder : public TextEncoder {
public:
    CachedEncoder(std::shared_ptr<TextEncoder> inner, std::filesystem::path cache_file);
    ~CachedEncoder() override;

    std::string id() const override { return inner_->id(); }
    EmbeddingVector encode_pooled(const std::string& text) override;
    Conditioning encode_sequence(const std::string& text) override { return inner_->encode_sequence(text); }

    void flush();
    std::size_t hits() const { return hits_; }

private:
    std::shared_ptr<TextEncoder> inner_;
    std::filesystem::path file_;
    std::map<std::string, Eigen::VectorXd> cache_;
    std::mutex mutex_;
    std::size_t hits_ = 0;
    bool dirty_ = false;
};

enum class ConceptGroup { Coref, Retain };

struct DistanceRow {
    std::string text;
    ConceptGroup group = ConceptGroup::Coref;
    std::optional<Certainty> certainty;
    double cosine = 0.0;
    double euclidean = 0.0;
    bool identity_ok = true;
};

struct DistanceReport {
    std::string target;
    std::string encoder_id;
    std::vector<DistanceRow> rows;

    const DistanceRow* find(const std::string& text) const;
};

inline constexpr double kNormIdentityTolerance = 1e-4;

/// One row per coref and retain entry (train and test), sorted by group then by
/// descending cosine to the target.
DistanceReport distance_report(const std::string& target, const ConceptRecord& record, TextEncoder& encoder);

/// Same, for bare word lists (no certainty column).
DistanceReport distance_report(const std::string& target, const std::vector<std::string>& corefs,
                               const std::vector<std::string>& retains, TextEncoder& encoder);

/// CSV with header group,text,certainty,cosine,euclidean,identity_ok.
std::string distance_report_csv(const DistanceReport& report);

} // namespace crce
