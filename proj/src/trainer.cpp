#include "crce/trainer.hpp"

#include "crce/certainty.hpp"
#include "crce/error.hpp"
#include "crce/util.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace crce {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

template <typename E, std::size_t K>
E parse_enum(std::string_view s, const std::array<std::pair<std::string_view, E>, K>& table, const char* what) {
    for (const auto& [name, value] : table)
        if (name == s)
            return value;
    std::string names;
    for (const auto& [name, _] : table)
        names += (names.empty() ? "" : ", ") + std::string(name);
    throw ConfigError("unknown " + std::string(what) + " '" + std::string(s) + "' (expected one of " + names + ")");
}

constexpr std::array<std::pair<std::string_view, Variant>, 4> kVariants = {
    {{"crce", Variant::Crce}, {"crce_fixed", Variant::CrceFixed}, {"crce_sphere", Variant::CrceSphere},
     {"esd_only", Variant::EsdOnly}}};
constexpr std::array<std::pair<std::string_view, CertaintyMode>, 3> kModes = {
    {{"llm", CertaintyMode::Llm}, {"uniform_one", CertaintyMode::UniformOne}, {"noise", CertaintyMode::Noise}}};
constexpr std::array<std::pair<std::string_view, NoiseSide>, 3> kSides = {
    {{"coref", NoiseSide::Coref}, {"retain", NoiseSide::Retain}, {"both", NoiseSide::Both}}};
constexpr std::array<std::pair<std::string_view, ParamScope>, 2> kScopes = {
    {{"cross_attention_kv", ParamScope::CrossAttentionKV}, {"full", ParamScope::Full}}};
constexpr std::array<std::pair<std::string_view, Optimizer>, 2> kOptimizers = {
    {{"sgd", Optimizer::Sgd}, {"adam", Optimizer::Adam}}};

template <typename E, std::size_t K>
std::string_view enum_name(E v, const std::array<std::pair<std::string_view, E>, K>& table) {
    for (const auto& [name, value] : table)
        if (value == v)
            return name;
    return "?";
}

constexpr std::uint64_t kNoiseStream = 0xC3A5C85C97CB3127ull;
constexpr std::uint64_t kFixedStream = 0xB492B66FBE98F273ull;

} // namespace

std::string_view to_string(Variant v) noexcept { return enum_name(v, kVariants); }
std::string_view to_string(CertaintyMode m) noexcept { return enum_name(m, kModes); }
std::string_view to_string(NoiseSide s) noexcept { return enum_name(s, kSides); }
std::string_view to_string(ParamScope s) noexcept { return enum_name(s, kScopes); }
std::string_view to_string(Optimizer o) noexcept { return enum_name(o, kOptimizers); }
Variant parse_variant(std::string_view s) { return parse_enum(s, kVariants, "variant"); }
CertaintyMode parse_certainty_mode(std::string_view s) { return parse_enum(s, kModes, "certainty_mode"); }
NoiseSide parse_noise_side(std::string_view s) { return parse_enum(s, kSides, "noise_side"); }
ParamScope parse_param_scope(std::string_view s) { return parse_enum(s, kScopes, "param_scope"); }
Optimizer parse_optimizer(std::string_view s) { return parse_enum(s, kOptimizers, "optimizer"); }

void ErasureConfig::validate() const {
    if (M < 0 || N < 0)
        throw ConfigError("M and N must be non-negative");
    if (iterations < 0)
        throw ConfigError("iterations must be non-negative");
    if (!(learning_rate > 0) || !std::isfinite(learning_rate))
        throw ConfigError("learning_rate must be positive");
    if (!std::isfinite(eta))
        throw ConfigError("eta must be finite");
    if (variant == Variant::CrceSphere && !(sphere_radius > 0))
        throw ConfigError("variant crce_sphere requires sphere_radius > 0");
    if (certainty_mode == CertaintyMode::Noise && !(noise_sigma >= 0))
        throw ConfigError("noise_sigma must be non-negative");
    if (optimizer == Optimizer::Adam &&
        !(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1 && adam_epsilon > 0))
        throw ConfigError("invalid Adam hyper-parameters");
}

ordered_json to_json(const ErasureConfig& c) {
    ordered_json j;
    j["eta"] = c.eta;
    j["iterations"] = c.iterations;
    j["learning_rate"] = c.learning_rate;
    j["M"] = c.M;
    j["N"] = c.N;
    j["variant"] = to_string(c.variant);
    j["certainty_mode"] = to_string(c.certainty_mode);
    j["noise_sigma"] = c.noise_sigma;
    j["noise_side"] = to_string(c.noise_side);
    j["param_scope"] = to_string(c.param_scope);
    j["sphere_radius"] = c.sphere_radius;
    j["seed"] = c.seed;
    j["optimizer"] = to_string(c.optimizer);
    j["adam_beta1"] = c.adam_beta1;
    j["adam_beta2"] = c.adam_beta2;
    j["adam_epsilon"] = c.adam_epsilon;
    return j;
}

ErasureConfig erasure_config_from_json(const json& j, ErasureConfig c) {
    if (!j.is_object())
        throw ConfigError("erasure config must be a JSON object");
    static const std::set<std::string> known = {"eta",          "iterations",  "learning_rate",  "M",
                                                "N",            "variant",     "certainty_mode", "noise_sigma",
                                                "noise_side",   "param_scope", "sphere_radius",  "seed",
                                                "optimizer",    "adam_beta1",  "adam_beta2",     "adam_epsilon"};
    for (const auto& [k, _] : j.items())
        if (!known.count(k))
            throw ConfigError("unknown erasure config key '" + k + "'");
    try {
        c.eta = j.value("eta", c.eta);
        c.iterations = j.value("iterations", c.iterations);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.M = j.value("M", c.M);
        c.N = j.value("N", c.N);
        if (j.contains("variant"))
            c.variant = parse_variant(j["variant"].get<std::string>());
        if (j.contains("certainty_mode"))
            c.certainty_mode = parse_certainty_mode(j["certainty_mode"].get<std::string>());
        c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
        if (j.contains("noise_side"))
            c.noise_side = parse_noise_side(j["noise_side"].get<std::string>());
        if (j.contains("param_scope"))
            c.param_scope = parse_param_scope(j["param_scope"].get<std::string>());
        c.sphere_radius = j.value("sphere_radius", c.sphere_radius);
        c.seed = j.value("seed", c.seed);
        if (j.contains("optimizer"))
            c.optimizer = parse_optimizer(j["optimizer"].get<std::string>());
        c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
        c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
        c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("erasure config: ") + e.what());
    }
    return c;
}

ErasureConfig toy_erasure_preset() {
    ErasureConfig c;
    c.M = 3;
    c.N = 2;
    c.learning_rate = 1e-3;
    return c;
}

std::string NoiseBatch::describe() const {
    std::ostringstream os;
    os << "t=" << t << " latent_seed=" << latent_seed << " corefs=[";
    for (std::size_t i = 0; i < coref_conds.size(); ++i)
        os << (i ? ", " : "") << coref_conds[i].text << " (w=" << coref_conds[i].weight << ")";
    os << "] retains=[";
    for (std::size_t i = 0; i < retain_conds.size(); ++i)
        os << (i ? ", " : "") << retain_conds[i].text << " (w=" << retain_conds[i].weight << ")";
    os << "]";
    return os.str();
}

LossBreakdown crce_loss(const NoiseBatch& batch, int M, int N, const ParamSet& tuned, const ParamSet& frozen,
                        const DiffusionBackend& backend, double eta, ParamSet* grad) {
    if (M < 0 || N < 0)
        throw ValidationError("crce_loss: M and N must be non-negative");
    if (static_cast<std::size_t>(M) != batch.coref_conds.size())
        throw ValidationError("crce_loss: M=" + std::to_string(M) + " but batch has " +
                              std::to_string(batch.coref_conds.size()) + " corefs");
    if (static_cast<std::size_t>(N) != batch.retain_conds.size())
        throw ValidationError("crce_loss: N=" + std::to_string(N) + " but batch has " +
                              std::to_string(batch.retain_conds.size()) + " retains");
    for (const auto* group : {&batch.coref_conds, &batch.retain_conds})
        for (const auto& w : *group)
            if (!(w.weight > 0 && w.weight <= 1))
                throw ValidationError("crce_loss: weight outside (0,1] for '" + w.text + "'");

    const Latent& x = batch.x_t;
    const int t = batch.t;
    const Latent eps_uncond = backend.predict_noise(frozen, x, t, batch.uncond);
    const Latent eps_cond = backend.predict_noise(frozen, x, t, batch.target_cond);
    const Latent anchor = compute_anchor(eps_uncond, eps_cond, eta);

    LossBreakdown out;
    const Latent eps_c = backend.predict_noise(tuned, x, t, batch.target_cond);
    out.esd_term = esd_loss(eps_c, anchor);
    if (grad)
        backend.accumulate_vjp(tuned, x, t, batch.target_cond, 2.0 * (eps_c - anchor), *grad);

    if (M > 0) {
        double sum = 0.0;
        for (const auto& c : batch.coref_conds) {
            const Latent e = backend.predict_noise(tuned, x, t, c.cond);
            sum += c.weight * esd_loss(e, anchor);
            if (grad)
                backend.accumulate_vjp(tuned, x, t, c.cond, (2.0 * c.weight / M) * (e - anchor), *grad);
        }
        out.coref_term = sum / M;
    }
    if (N > 0) {
        double sum = 0.0;
        for (const auto& r : batch.retain_conds) {
            const Latent e = backend.predict_noise(tuned, x, t, r.cond);
            const Latent ref = backend.predict_noise(frozen, x, t, r.cond);
            sum += r.weight * esd_loss(e, ref);
            if (grad)
                backend.accumulate_vjp(tuned, x, t, r.cond, (2.0 * r.weight / N) * (e - ref), *grad);
        }
        out.retain_term = sum / N;
    }
    out.total = out.esd_term + out.coref_term + out.retain_term;
    return out;
}

std::vector<bool> apply_param_scope(const ParamSet& params, ParamScope scope) {
    std::vector<bool> mask(params.size(), scope == ParamScope::Full);
    if (scope == ParamScope::Full)
        return mask;
    bool has_k = false, has_v = false;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& name = params[i].name;
        const bool k = name.find("attn2.to_k") != std::string::npos;
        const bool v = name.find("attn2.to_v") != std::string::npos;
        has_k |= k;
        has_v |= v;
        mask[i] = k || v;
    }
    if (!has_k || !has_v)
        throw ConfigError("param_scope cross_attention_kv: backend has no cross-attention key/value projections");
    return mask;
}

BatchSampler::BatchSampler(const ConceptRecord& record, const ErasureConfig& config, TextEncoder& encoder)
    : config_(config) {
    config_.validate();
    if (record.state != RecordState::Approved)
        throw ValidationError("record '" + record.id() + "' is not approved");
    target_ = encoder.encode_sequence(record.target);
    uncond_ = encoder.encode_sequence("");
    for (const auto& e : record.corefs.train) {
        coref_text_.push_back(e.text);
        coref_cond_.push_back(encoder.encode_sequence(e.text));
        coref_weights_.push_back(certainty_to_weight(e.certainty));
    }
    for (const auto& e : record.retains.train) {
        retain_text_.push_back(e.text);
        retain_cond_.push_back(encoder.encode_sequence(e.text));
        retain_weights_.push_back(certainty_to_weight(e.certainty));
    }

    const int m = config_.effective_M(), n = config_.effective_N();
    if (config_.variant != Variant::CrceSphere && static_cast<std::size_t>(m) > coref_text_.size())
        throw ConfigError("M=" + std::to_string(m) + " exceeds the " + std::to_string(coref_text_.size()) +
                          " training corefs");
    if (static_cast<std::size_t>(n) > retain_text_.size())
        throw ConfigError("N=" + std::to_string(n) + " exceeds the " + std::to_string(retain_text_.size()) +
                          " training retains");

    switch (config_.certainty_mode) {
    case CertaintyMode::Llm: break;
    case CertaintyMode::UniformOne:
        std::fill(coref_weights_.begin(), coref_weights_.end(), 1.0);
        std::fill(retain_weights_.begin(), retain_weights_.end(), 1.0);
        break;
    case CertaintyMode::Noise: {
        std::mt19937_64 rng(config_.seed ^ kNoiseStream);
        const double s = config_.noise_sigma;
        auto perturb = [&](std::vector<double>& w, bool on) {
            for (double& x : w) {
                if (!on) {
                    x = 1.0;
                } else if (s > 0) {
                    x = std::clamp(x + std::uniform_real_distribution<double>(-s, s)(rng), 0.05, 1.0);
                }
            }
        };
        perturb(coref_weights_, config_.noise_side != NoiseSide::Retain);
        perturb(retain_weights_, config_.noise_side != NoiseSide::Coref);
        break;
    }
    }

    if (config_.variant == Variant::CrceFixed) {
        std::mt19937_64 rng(config_.seed ^ kFixedStream);
        fixed_corefs_ = pick(coref_text_.size(), m, rng);
        fixed_retains_ = pick(retain_text_.size(), n, rng);
    }
}

std::vector<std::size_t> BatchSampler::pick(std::size_t pool, int k, std::mt19937_64& rng) const {
    std::vector<std::size_t> idx(pool);
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> d(static_cast<std::size_t>(i), pool - 1);
        std::swap(idx[static_cast<std::size_t>(i)], idx[d(rng)]);
    }
    idx.resize(static_cast<std::size_t>(k));
    return idx;
}

NoiseBatch BatchSampler::sample(const DiffusionBackend& backend, const ParamSet& tuned, std::mt19937_64& rng) const {
    NoiseBatch b;
    b.t = std::uniform_int_distribution<int>(0, backend.num_timesteps() - 1)(rng);
    b.latent_seed = rng();
    b.target_cond = target_;
    b.uncond = uncond_;
    b.x_t = backend.generate_latent(tuned, target_, uncond_, b.t, b.latent_seed);

    const int m = config_.effective_M(), n = config_.effective_N();
    std::vector<std::size_t> ci, ri;
    switch (config_.variant) {
    case Variant::Crce:
        ci = pick(coref_text_.size(), m, rng);
        ri = pick(retain_text_.size(), n, rng);
        break;
    case Variant::CrceFixed:
        ci = fixed_corefs_;
        ri = fixed_retains_;
        break;
    case Variant::CrceSphere: {
        const Eigen::Map<const Eigen::VectorXd> center(target_.data(), target_.size());
        for (int k = 0; k < m; ++k) {
            Eigen::VectorXd s = sphere_sample(center, config_.sphere_radius, rng);
            Conditioning c = Eigen::Map<const Conditioning>(s.data(), target_.rows(), target_.cols());
            b.coref_conds.push_back({"sphere#" + std::to_string(k), std::move(c), 1.0});
        }
        ri = pick(retain_text_.size(), n, rng);
        break;
    }
    case Variant::EsdOnly: break;
    }
    for (auto i : ci)
        b.coref_conds.push_back({coref_text_[i], coref_cond_[i], coref_weights_[i]});
    for (auto i : ri)
        b.retain_conds.push_back({retain_text_[i], retain_cond_[i], retain_weights_[i]});
    return b;
}

ordered_json to_json(const StepLog& s) {
    ordered_json j;
    j["step"] = s.step;
    j["t"] = s.t;
    j["esd"] = s.loss.esd_term;
    j["coref"] = s.loss.coref_term;
    j["retain"] = s.loss.retain_term;
    j["total"] = s.loss.total;
    j["coref_ids"] = s.coref_ids;
    j["retain_ids"] = s.retain_ids;
    j["rng"] = s.rng_digest;
    return j;
}

std::string rng_digest(const std::mt19937_64& rng) {
    std::ostringstream os;
    os << rng;
    return sha256_hex(os.str()).substr(0, 16);
}

TrainingResult run_training(const ConceptRecord& record, const ErasureConfig& config, const DiffusionBackend& backend,
                            TextEncoder& encoder, const std::function<void(const StepLog&)>& on_step) {
    config.validate();
    const ParamSet& frozen = backend.pretrained();
    TrainingResult out;
    out.params = frozen;
    const auto mask = apply_param_scope(out.params, config.param_scope);
    const BatchSampler sampler(record, config, encoder);
    std::mt19937_64 rng(config.seed);
    const int m = config.effective_M(), n = config.effective_N();

    ParamSet adam_m = frozen.zeros_like(), adam_v = frozen.zeros_like();
    for (int step = 0; step < config.iterations; ++step) {
        const NoiseBatch batch = sampler.sample(backend, out.params, rng);
        ParamSet grad = frozen.zeros_like();
        const LossBreakdown loss = crce_loss(batch, m, n, out.params, frozen, backend, config.eta, &grad);
        if (!std::isfinite(loss.total) || !grad.all_finite())
            throw NumericalError("non-finite loss at step " + std::to_string(step) + ": " + batch.describe());

        const double c1 = 1.0 - std::pow(config.adam_beta1, step + 1);
        const double c2 = 1.0 - std::pow(config.adam_beta2, step + 1);
        for (std::size_t i = 0; i < out.params.size(); ++i) {
            if (!mask[i])
                continue;
            auto& p = out.params[i].value;
            const auto& g = grad[i].value;
            if (config.optimizer == Optimizer::Sgd) {
                p -= config.learning_rate * g;
            } else {
                auto& mm = adam_m[i].value;
                auto& vv = adam_v[i].value;
                mm = config.adam_beta1 * mm + (1 - config.adam_beta1) * g;
                vv = config.adam_beta2 * vv + (1 - config.adam_beta2) * g.cwiseAbs2();
                p.array() -= config.learning_rate * (mm.array() / c1) /
                             ((vv.array() / c2).sqrt() + config.adam_epsilon);
            }
        }

        StepLog s;
        s.step = step;
        s.t = batch.t;
        s.loss = loss;
        for (const auto& c : batch.coref_conds)
            s.coref_ids.push_back(c.text);
        for (const auto& r : batch.retain_conds)
            s.retain_ids.push_back(r.text);
        s.rng_digest = rng_digest(rng);
        if (on_step)
            on_step(s);
        out.log.push_back(std::move(s));
    }
    out.rng_digest = rng_digest(rng);
    return out;
}

double gradient_check(const LossFn& loss_fn, const ParamSet& params, double epsilon, int samples,
                      std::uint64_t seed) {
    ParamSet analytic = params.zeros_like();
    loss_fn(params, &analytic);

    std::vector<std::pair<std::size_t, Eigen::Index>> coords;
    for (std::size_t i = 0; i < params.size(); ++i)
        for (Eigen::Index j = 0; j < params[i].value.size(); ++j)
            coords.emplace_back(i, j);
    if (samples > 0 && static_cast<std::size_t>(samples) < coords.size()) {
        std::mt19937_64 rng(seed);
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(static_cast<std::size_t>(samples));
    }

    ParamSet work = params;
    double worst = 0.0;
    for (const auto& [i, j] : coords) {
        double& x = work[i].value(j);
        const double saved = x;
        x = saved + epsilon;
        const double up = loss_fn(work, nullptr);
        x = saved - epsilon;
        const double down = loss_fn(work, nullptr);
        x = saved;
        const double numeric = (up - down) / (2 * epsilon);
        const double a = analytic[i].value(j);
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
        worst = std::max(worst, std::abs(a - numeric) / denom);
    }
    return worst;
}

} // namespace crce
