#include "crce/toy_world.hpp"

#include "crce/coref_generator.hpp"
#include "crce/error.hpp"
#include "crce/util.hpp"

#include <cmath>
#include <random>

namespace crce::toy {

namespace {

constexpr double kAliasJitter = 0.3;
constexpr double kSharedWithDog = 0.3;

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

Eigen::VectorXd unit(int i) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(kEmbedDim);
    v(i) = 1.0;
    return v;
}

// Unit direction in the coordinates reserved for per-prompt variation, seeded by the text.
Eigen::VectorXd hashed_direction(std::string_view text) {
    std::mt19937_64 rng(fnv1a(text));
    std::normal_distribution<double> g(0.0, 1.0);
    Eigen::VectorXd v = Eigen::VectorXd::Zero(kEmbedDim);
    for (int i = kComponents; i < kEmbedDim - 2; ++i)
        v(i) = g(rng);
    return v.normalized();
}

} // namespace

const std::vector<ToyConcept>& lexicon() {
    static const std::vector<ToyConcept> lex = {
        {"dog", 0, {"domestic dog", "house dog", "pet dog", "pooch", "puppy", "family dog", "canine companion",
                    "dog breed", "working dog", "guard dog", "guide dog", "service dog", "show dog", "mongrel",
                    "hound"}},
        {"cat", 1, {"domestic cat", "kitten", "house cat", "tabby cat", "feline", "kitty", "persian cat",
                    "tomcat", "alley cat", "siamese cat", "pet cat", "tabby", "barn cat", "maine coon",
                    "moggy"}},
        {"wolf", 2, {"coyote", "jackal", "fox", "dingo", "dhole", "hyena", "gray wolf", "timber wolf",
                     "red fox", "arctic wolf", "maned wolf", "dire wolf", "prairie wolf", "ethiopian wolf",
                     "wolf pack"}},
        {"horse", 3, {"mare", "stallion", "pony", "foal", "steed", "thoroughbred", "mustang", "colt", "filly",
                      "equine", "draft horse", "racehorse", "bronco", "palomino", "gelding"}},
    };
    return lex;
}

Eigen::Vector2d component_mean(int k) {
    if (k < 0 || k >= kComponents)
        throw ValidationError("toy component out of range: " + std::to_string(k));
    static const std::array<Eigen::Vector2d, kComponents> means = {
        Eigen::Vector2d(2, 0), Eigen::Vector2d(0, 2), Eigen::Vector2d(0, -2), Eigen::Vector2d(-2, 0)};
    return means[static_cast<std::size_t>(k)];
}

std::optional<int> component_of(std::string_view prompt) {
    const std::string key = normalize_prompt(prompt);
    for (const auto& c : lexicon()) {
        if (c.name == key)
            return c.component;
        for (const auto& a : c.aliases)
            if (a == key)
                return c.component;
    }
    return std::nullopt;
}

std::optional<int> classify_point(const Eigen::Vector2d& p, double radius) {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < kComponents; ++k) {
        const double d = (p - component_mean(k)).norm();
        if (d < best_d) {
            best_d = d;
            best = k;
        }
    }
    if (!(best_d <= radius))
        return std::nullopt;
    return best;
}

ToyTextEncoder::ToyTextEncoder() : bos_(unit(kEmbedDim - 1)), null_(unit(kEmbedDim - 2)) {
    const double s = std::sqrt(1.0 - kSharedWithDog * kSharedWithDog);
    bases_[0] = unit(0);
    bases_[1] = kSharedWithDog * unit(0) + s * unit(1);
    bases_[2] = kSharedWithDog * unit(0) + s * unit(2);
    bases_[3] = unit(3);
}

Eigen::VectorXd ToyTextEncoder::token(std::string_view text) const {
    const std::string key = normalize_prompt(text);
    if (key.empty())
        return null_;
    for (const auto& c : lexicon()) {
        const auto& base = bases_[static_cast<std::size_t>(c.component)];
        if (c.name == key)
            return base;
        for (const auto& a : c.aliases)
            if (a == key)
                return (base + kAliasJitter * hashed_direction(key)).normalized();
    }
    return hashed_direction(key);
}

EmbeddingVector ToyTextEncoder::encode_pooled(const std::string& text) {
    if (trim(text).empty())
        throw ValidationError("encode_pooled: text must not be empty");
    return {token(text), true};
}

Conditioning ToyTextEncoder::encode_sequence(const std::string& text) {
    Conditioning c(kTokens, kEmbedDim);
    c.row(0) = bos_.transpose();
    c.row(1) = token(text).transpose();
    return c;
}

ConceptRecord dog_record(std::uint64_t split_seed) {
    const auto& lex = lexicon();
    std::vector<CandidateEntry> corefs, retains;
    auto label = [](std::size_t i) { return std::string(certainty_label(kAllCertainties[i / 3])); };
    for (std::size_t i = 0; i < lex[0].aliases.size(); ++i)
        corefs.push_back({lex[0].aliases[i], label(i), kAllCertainties[i / 3]});

    // alternate cat-like and wolf-like retains so both families span every certainty level
    std::vector<std::string> near = {"cat", "wolf"};
    for (std::size_t i = 0; near.size() < kPoolSize; ++i) {
        near.push_back(lex[1].aliases[i]);
        if (near.size() < kPoolSize)
            near.push_back(lex[2].aliases[i]);
    }
    for (std::size_t i = 0; i < near.size(); ++i)
        retains.push_back({near[i], label(i), kAllCertainties[i / 3]});

    ConceptRecord r;
    r.target = "dog";
    r.category = Category::Object;
    r.state = RecordState::Approved;
    r.revision = 0;
    auto cs = split_train_test(to_entries(corefs), split_seed);
    auto rs = split_train_test(to_entries(retains), split_seed ^ 0x9e3779b97f4a7c15ull);
    r.corefs = cs;
    r.retains = rs;
    return r;
}

} // namespace crce::toy
