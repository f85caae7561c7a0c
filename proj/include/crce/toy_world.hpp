#pragma once

#include "crce/dataset.hpp"
#include "crce/embedding.hpp"

#include <Eigen/Dense>

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace crce::toy {

// A 2-D Gaussian mixture standing in for image space. Each component is a
// "concept"; every concept has a canonical name and a set of alias prompts.

inline constexpr int kComponents = 4;
inline constexpr double kComponentStd = 0.35;
inline constexpr int kEmbedDim = 12;
inline constexpr int kTokens = 2;

struct ToyConcept {
    std::string name;
    int component;
    std::vector<std::string> aliases; // canonical name excluded
};

const std::vector<ToyConcept>& lexicon();
Eigen::Vector2d component_mean(int k);

/// Component a prompt refers to, or nullopt for text outside the lexicon.
std::optional<int> component_of(std::string_view prompt);

/// Nearest component to a point, provided it lies within `radius` of that component's mean.
std::optional<int> classify_point(const Eigen::Vector2d& p, double radius = 3.0 * kComponentStd);

/// Deterministic lexicon-backed encoder. Sequence rows: [BOS, concept token].
/// Aliases sit close to their component's base direction; the base directions
/// of "cat" and "wolf" share a large component with "dog" so that erasing one
/// risks the others. Unknown text gets a hashed direction with no component.
class ToyTextEncoder : public TextEncoder {
public:
    ToyTextEncoder();

    std::string id() const override { return "toy-lexicon-v1"; }
    EmbeddingVector encode_pooled(const std::string& text) override;
    Conditioning encode_sequence(const std::string& text) override;

    Eigen::VectorXd token(std::string_view text) const;

private:
    std::array<Eigen::VectorXd, kComponents> bases_;
    Eigen::VectorXd bos_;
    Eigen::VectorXd null_;
};

/// Approved record for target "dog": corefs are dog aliases, retains are
/// cat and wolf aliases, certainties descend in blocks of three.
ConceptRecord dog_record(std::uint64_t split_seed = 0);

/// Draws `n` points from component `k`.
template <typename Rng>
Eigen::MatrixXd sample_component(int k, Eigen::Index n, Rng& rng) {
    std::normal_distribution<double> g(0.0, kComponentStd);
    Eigen::MatrixXd x(n, 2);
    const Eigen::Vector2d mu = component_mean(k);
    for (Eigen::Index i = 0; i < n; ++i) {
        x(i, 0) = mu.x() + g(rng);
        x(i, 1) = mu.y() + g(rng);
    }
    return x;
}

} // namespace crce::toy
