#pragma once

#include "crce/backend.hpp"
#include "crce/dataset.hpp"
#include "crce/embedding.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace crce {

enum class Variant { Crce, CrceFixed, CrceSphere, EsdOnly };
enum class CertaintyMode { Llm, UniformOne, Noise };
enum class NoiseSide { Coref, Retain, Both };
enum class ParamScope { CrossAttentionKV, Full };
enum class Optimizer { Sgd, Adam };

std::string_view to_string(Variant v) noexcept;
std::string_view to_string(CertaintyMode m) noexcept;
std::string_view to_string(NoiseSide s) noexcept;
std::string_view to_string(ParamScope s) noexcept;
std::string_view to_string(Optimizer o) noexcept;
Variant parse_variant(std::string_view s);
CertaintyMode parse_certainty_mode(std::string_view s);
NoiseSide parse_noise_side(std::string_view s);
ParamScope parse_param_scope(std::string_view s);
Optimizer parse_optimizer(std::string_view s);

struct ErasureConfig {
    double eta = 1.0;
    int iterations = 500;
    double learning_rate = 1e-5;
    int M = 5;
    int N = 3;
    Variant variant = Variant::Crce;
    CertaintyMode certainty_mode = CertaintyMode::Llm;
    double noise_sigma = 0.0;
    NoiseSide noise_side = NoiseSide::Both;
    ParamScope param_scope = ParamScope::CrossAttentionKV;
    double sphere_radius = 0.0;
    std::uint64_t seed = 0;
    Optimizer optimizer = Optimizer::Sgd;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;

    /// Throws ConfigError on a violated invariant.
    void validate() const;
    /// M and N the loss actually uses (esd_only forces both to 0).
    int effective_M() const { return variant == Variant::EsdOnly ? 0 : M; }
    int effective_N() const { return variant == Variant::EsdOnly ? 0 : N; }
};

nlohmann::ordered_json to_json(const ErasureConfig& c);
/// Fields absent from `j` keep the values already in `base`.
ErasureConfig erasure_config_from_json(const nlohmann::json& j, ErasureConfig base = {});

/// Hyper-parameters that make the toy backend erase within its default 500 steps.
ErasureConfig toy_erasure_preset();

struct WeightedConditioning {
    std::string text;
    Conditioning cond;
    double weight = 1.0;
};

struct NoiseBatch {
    Latent x_t;
    int t = 0;
    std::uint64_t latent_seed = 0;
    Conditioning target_cond;
    Conditioning uncond;
    std::vector<WeightedConditioning> coref_conds;
    std::vector<WeightedConditioning> retain_conds;

    std::string describe() const;
};

struct LossBreakdown {
    double esd_term = 0.0;
    double coref_term = 0.0;
    double retain_term = 0.0;
    double total = 0.0;
};

/// eps_uncond - eta * (eps_cond - eps_uncond)
template <typename DerivedU, typename DerivedC>
typename DerivedU::PlainObject compute_anchor(const Eigen::MatrixBase<DerivedU>& eps_uncond,
                                              const Eigen::MatrixBase<DerivedC>& eps_cond,
                                              typename DerivedU::Scalar eta) {
    if (eps_uncond.rows() != eps_cond.rows() || eps_uncond.cols() != eps_cond.cols())
        throw ShapeError("compute_anchor: shape mismatch");
    return eps_uncond - eta * (eps_cond - eps_uncond);
}

/// Squared L2 norm of the difference, summed over all elements.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar esd_loss(const Eigen::MatrixBase<DerivedA>& eps_tuned,
                                   const Eigen::MatrixBase<DerivedB>& anchor) {
    if (eps_tuned.rows() != anchor.rows() || eps_tuned.cols() != anchor.cols())
        throw ShapeError("esd_loss: shape mismatch");
    return (eps_tuned - anchor).squaredNorm();
}

/// ESD term plus certainty-weighted coref and retain terms, all on the batch's shared (x_t, t).
/// `M` and `N` must equal the batch list sizes. When `grad` is given, d total / d tuned is added to it.
LossBreakdown crce_loss(const NoiseBatch& batch, int M, int N, const ParamSet& tuned, const ParamSet& frozen,
                        const DiffusionBackend& backend, double eta, ParamSet* grad = nullptr);

/// One flag per tensor of `params`: true when trainable under `scope`.
std::vector<bool> apply_param_scope(const ParamSet& params, ParamScope scope);

/// Draws per-step batches for one training run. Conditionings are encoded once;
/// noisy certainties and the crce_fixed subset are drawn once from the run seed.
class BatchSampler {
public:
    BatchSampler(const ConceptRecord& record, const ErasureConfig& config, TextEncoder& encoder);

    NoiseBatch sample(const DiffusionBackend& backend, const ParamSet& tuned, std::mt19937_64& rng) const;

    /// Weight the loss uses for each train entry, after certainty-mode adjustments.
    const std::vector<double>& coref_weights() const noexcept { return coref_weights_; }
    const std::vector<double>& retain_weights() const noexcept { return retain_weights_; }

private:
    std::vector<std::size_t> pick(std::size_t pool, int k, std::mt19937_64& rng) const;

    ErasureConfig config_;
    std::vector<std::string> coref_text_, retain_text_;
    std::vector<Conditioning> coref_cond_, retain_cond_;
    std::vector<double> coref_weights_, retain_weights_;
    Conditioning target_, uncond_;
    std::vector<std::size_t> fixed_corefs_, fixed_retains_;
};

struct StepLog {
    int step = 0;
    int t = 0;
    LossBreakdown loss;
    std::vector<std::string> coref_ids;
    std::vector<std::string> retain_ids;
    std::string rng_digest;
};

nlohmann::ordered_json to_json(const StepLog& s);

struct TrainingResult {
    ParamSet params;
    std::vector<StepLog> log;
    std::string rng_digest;
};

/// Runs `config.iterations` optimizer steps on crce_loss over the scoped parameters,
/// starting from the backend's pretrained weights. Throws NumericalError on a
/// non-finite loss, describing the offending batch.
TrainingResult run_training(const ConceptRecord& record, const ErasureConfig& config, const DiffusionBackend& backend,
                            TextEncoder& encoder, const std::function<void(const StepLog&)>& on_step = {});

/// Loss callback for gradient checks: returns the loss and, if `grad` is non-null, adds its gradient.
using LossFn = std::function<double(const ParamSet& params, ParamSet* grad)>;

/// Max relative error between analytic and central-difference gradients over `samples`
/// randomly chosen scalars (all of them when samples <= 0).
double gradient_check(const LossFn& loss_fn, const ParamSet& params, double epsilon, int samples = 200,
                      std::uint64_t seed = 0);

/// Digest of a Mersenne twister's full state.
std::string rng_digest(const std::mt19937_64& rng);

} // namespace crce
