#pragma once

#include "crce/embedding.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace crce {

/// Noisy latent, or a noise prediction of the same shape.
using Latent = Eigen::MatrixXd;

struct NamedTensor {
    std::string name;
    Eigen::MatrixXd value;
};

/// Ordered, named parameter tensors of a denoiser.
class ParamSet {
public:
    void add(std::string name, Eigen::MatrixXd value);

    std::size_t size() const noexcept { return tensors_.size(); }
    bool empty() const noexcept { return tensors_.empty(); }
    NamedTensor& operator[](std::size_t i) { return tensors_[i]; }
    const NamedTensor& operator[](std::size_t i) const { return tensors_[i]; }
    auto begin() { return tensors_.begin(); }
    auto end() { return tensors_.end(); }
    auto begin() const { return tensors_.begin(); }
    auto end() const { return tensors_.end(); }

    const Eigen::MatrixXd& at(std::string_view name) const;
    Eigen::MatrixXd& at(std::string_view name);
    bool contains(std::string_view name) const;

    Eigen::Index scalar_count() const;
    ParamSet zeros_like() const;
    bool same_layout(const ParamSet& other) const;
    /// this += a * x
    void axpy(double a, const ParamSet& x);
    double squared_norm() const;
    bool all_finite() const;

    /// SHA-256 over names, shapes and raw little-endian values.
    std::string digest() const;

private:
    std::vector<NamedTensor> tensors_;
};

/// Pluggable noise-prediction model plus its sampler.
///
/// Unconditional predictions are made with the encoding of the empty prompt,
/// the same way classifier-free guidance is run in practice.
class DiffusionBackend {
public:
    virtual ~DiffusionBackend() = default;

    virtual std::string id() const = 0;
    /// Frozen reference weights.
    virtual const ParamSet& pretrained() const = 0;
    virtual int num_timesteps() const = 0;

    /// Deterministic; output has the shape of `x_t`.
    virtual Latent predict_noise(const ParamSet& params, const Latent& x_t, int t, const Conditioning& cond) const = 0;

    /// Adds d<grad_out, predict_noise(params, x_t, t, cond)>/d params into `grads`.
    virtual void accumulate_vjp(const ParamSet& params, const Latent& x_t, int t, const Conditioning& cond,
                                const Latent& grad_out, ParamSet& grads) const = 0;

    /// Starts from seeded Gaussian noise and denoises with guidance down to timestep `t`.
    virtual Latent generate_latent(const ParamSet& params, const Conditioning& cond, const Conditioning& uncond,
                                   int t, std::uint64_t seed) const = 0;

    /// Fully denoised sample for one seed.
    virtual Latent generate(const ParamSet& params, const Conditioning& cond, const Conditioning& uncond,
                            std::uint64_t seed) const = 0;

    virtual void save_checkpoint(const ParamSet& params, const std::filesystem::path& path) const;
    virtual ParamSet load_checkpoint(const std::filesystem::path& path) const;
};

} // namespace crce
