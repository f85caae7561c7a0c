#pragma once

#include "crce/backend.hpp"
#include "crce/toy_world.hpp"

#include <filesystem>
#include <optional>

namespace crce::toy {

struct ToyBackendConfig {
    int hidden = 48;
    int attn_dim = 16;
    int time_features = 8;
    int timesteps = 50;
    double beta_start = 1e-3;
    double beta_end = 0.25;
    /// Classifier-free guidance scale used when sampling.
    double guidance = 3.0;
    /// Points per training latent.
    int latent_points = 16;
};

struct PretrainOptions {
    int steps = 3000;
    int prompts_per_step = 8;
    int points_per_prompt = 16;
    double learning_rate = 3e-3;
    double uncond_prob = 0.15;
    std::uint64_t seed = 1234;
};

/// Small conditional denoiser on 2-D points:
///   h  = silu(proj_in [x, time features])
///   h += attn2.to_out(softmax(q k^T / sqrt(a)) v),  q from h, k and v from the conditioning tokens
///   eps = proj_out silu(ff h)
/// Parameter names follow the diffusers convention, so `attn2.to_k` / `attn2.to_v`
/// select the cross-attention key and value projections.
class ToyDiffusionBackend : public DiffusionBackend {
public:
    explicit ToyDiffusionBackend(ToyBackendConfig config = {}, std::uint64_t init_seed = 7);

    /// Backend with pretrained weights loaded from `weights`.
    static ToyDiffusionBackend from_checkpoint(const std::filesystem::path& weights, ToyBackendConfig config = {});
    /// Locates the shipped pretrained toy weights (env CRCE_TOY_WEIGHTS, then the data directory).
    static std::optional<std::filesystem::path> default_weights();

    std::string id() const override;
    const ParamSet& pretrained() const override { return pretrained_; }
    void set_pretrained(ParamSet p);
    int num_timesteps() const override { return config_.timesteps; }
    const ToyBackendConfig& config() const noexcept { return config_; }

    Latent predict_noise(const ParamSet& params, const Latent& x_t, int t, const Conditioning& cond) const override;
    void accumulate_vjp(const ParamSet& params, const Latent& x_t, int t, const Conditioning& cond,
                        const Latent& grad_out, ParamSet& grads) const override;
    Latent generate_latent(const ParamSet& params, const Conditioning& cond, const Conditioning& uncond, int t,
                           std::uint64_t seed) const override;
    Latent generate(const ParamSet& params, const Conditioning& cond, const Conditioning& uncond,
                    std::uint64_t seed) const override;

    /// Forward diffusion q(x_t | x_0) with the given noise.
    Latent add_noise(const Latent& x0, const Latent& noise, int t) const;
    double alpha_bar(int t) const;

    /// Denoising-score-matching pretraining of the reference weights with Adam.
    /// Returns the final mean loss.
    double pretrain(TextEncoder& encoder, const PretrainOptions& options);

private:
    Eigen::RowVectorXd time_embedding(int t) const;
    Latent ddim(const ParamSet& params, const Conditioning& cond, const Conditioning& uncond, Latent x, int from_t,
                int to_t) const;

    ToyBackendConfig config_;
    std::vector<double> alpha_bar_;
    ParamSet pretrained_;
};

} // namespace crce::toy
