#include "crce/toy_backend.hpp"

#include "crce/error.hpp"
#include "crce/util.hpp"

#include <cmath>
#include <cstdlib>
#include <numbers>
#include <random>

namespace crce::toy {

namespace {

using Eigen::MatrixXd;
using Eigen::RowVectorXd;

struct Forward {
    MatrixXd z0, a1, h1, q, k, v, p, o, h2, a3, h3, y;
};

MatrixXd silu(const MatrixXd& a) { return a.array() / (1.0 + (-a.array()).exp()); }

MatrixXd silu_grad(const MatrixXd& a) {
    const Eigen::ArrayXXd s = 1.0 / (1.0 + (-a.array()).exp());
    return (s * (1.0 + a.array() * (1.0 - s))).matrix();
}

RowVectorXd bias_row(const MatrixXd& b) { return b.col(0).transpose(); }

Forward forward(const ParamSet& p, const Latent& x, const RowVectorXd& temb, const Conditioning& c) {
    const auto& w_in = p.at("proj_in.weight");
    const auto& wq = p.at("attn2.to_q.weight");
    const auto& wk = p.at("attn2.to_k.weight");
    const auto& wv = p.at("attn2.to_v.weight");
    const auto& wo = p.at("attn2.to_out.0.weight");
    const auto& w1 = p.at("ff.weight");
    const auto& wt = p.at("time_proj.weight");
    const auto& w2 = p.at("proj_out.weight");
    if (x.cols() != 2)
        throw ShapeError("toy latent must have 2 columns, got " + std::to_string(x.cols()));
    if (c.cols() != wk.cols())
        throw ShapeError("conditioning width " + std::to_string(c.cols()) + " does not match key projection " +
                         std::to_string(wk.cols()));

    const Eigen::Index n = x.rows();
    Forward f;
    f.z0.resize(n, 2 + temb.size());
    f.z0.leftCols(2) = x;
    f.z0.rightCols(temb.size()) = temb.replicate(n, 1);
    f.a1 = (f.z0 * w_in.transpose()).rowwise() + bias_row(p.at("proj_in.bias"));
    f.h1 = silu(f.a1);

    const double scale = 1.0 / std::sqrt(static_cast<double>(wq.rows()));
    f.q = f.h1 * wq.transpose();
    f.k = c * wk.transpose();
    f.v = c * wv.transpose();
    f.p = (f.q * f.k.transpose()) * scale;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double m = f.p.row(i).maxCoeff();
        f.p.row(i) = (f.p.row(i).array() - m).exp();
        f.p.row(i) /= f.p.row(i).sum();
    }
    f.o = f.p * f.v;
    f.h2 = f.h1 + ((f.o * wo.transpose()).rowwise() + bias_row(p.at("attn2.to_out.0.bias")));

    const RowVectorXd tproj = temb * wt.transpose() + bias_row(p.at("ff.bias"));
    f.a3 = (f.h2 * w1.transpose()).rowwise() + tproj;
    f.h3 = silu(f.a3);
    f.y = (f.h3 * w2.transpose()).rowwise() + bias_row(p.at("proj_out.bias"));
    return f;
}

MatrixXd init_matrix(Eigen::Index rows, Eigen::Index cols, double gain, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, gain / std::sqrt(static_cast<double>(cols)));
    MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i)
            m(i, j) = g(rng);
    return m;
}

} // namespace

ToyDiffusionBackend::ToyDiffusionBackend(ToyBackendConfig config, std::uint64_t init_seed) : config_(config) {
    if (config_.timesteps < 2 || config_.hidden < 1 || config_.attn_dim < 1 || config_.time_features % 2 != 0)
        throw ConfigError("invalid toy backend configuration");
    double ab = 1.0;
    for (int t = 0; t < config_.timesteps; ++t) {
        const double beta =
            config_.beta_start + (config_.beta_end - config_.beta_start) * t / (config_.timesteps - 1);
        ab *= 1.0 - beta;
        alpha_bar_.push_back(ab);
    }

    std::mt19937_64 rng(init_seed);
    const int h = config_.hidden, a = config_.attn_dim, f = config_.time_features;
    pretrained_.add("proj_in.weight", init_matrix(h, 2 + f, 1.0, rng));
    pretrained_.add("proj_in.bias", MatrixXd::Zero(h, 1));
    pretrained_.add("attn2.to_q.weight", init_matrix(a, h, 1.0, rng));
    pretrained_.add("attn2.to_k.weight", init_matrix(a, kEmbedDim, 1.0, rng));
    pretrained_.add("attn2.to_v.weight", init_matrix(a, kEmbedDim, 1.0, rng));
    pretrained_.add("attn2.to_out.0.weight", init_matrix(h, a, 1.0, rng));
    pretrained_.add("attn2.to_out.0.bias", MatrixXd::Zero(h, 1));
    pretrained_.add("ff.weight", init_matrix(h, h, 1.0, rng));
    pretrained_.add("ff.bias", MatrixXd::Zero(h, 1));
    pretrained_.add("time_proj.weight", init_matrix(h, f, 1.0, rng));
    pretrained_.add("proj_out.weight", init_matrix(2, h, 0.5, rng));
    pretrained_.add("proj_out.bias", MatrixXd::Zero(2, 1));
}

ToyDiffusionBackend ToyDiffusionBackend::from_checkpoint(const std::filesystem::path& weights,
                                                         ToyBackendConfig config) {
    ToyDiffusionBackend b(config);
    b.pretrained_ = b.load_checkpoint(weights);
    return b;
}

std::optional<std::filesystem::path> ToyDiffusionBackend::default_weights() {
    namespace fs = std::filesystem;
    if (const char* env = std::getenv("CRCE_TOY_WEIGHTS"))
        return fs::path(env);
#ifdef CRCE_DATA_DIR
    if (fs::path p = fs::path(CRCE_DATA_DIR) / "toy_pretrained.bin"; fs::exists(p))
        return p;
#endif
    if (fs::path p = "data/toy_pretrained.bin"; fs::exists(p))
        return p;
    return std::nullopt;
}

std::string ToyDiffusionBackend::id() const {
    return "toy-mixture-denoiser(h=" + std::to_string(config_.hidden) + ",a=" + std::to_string(config_.attn_dim) +
           ",T=" + std::to_string(config_.timesteps) + ")";
}

void ToyDiffusionBackend::set_pretrained(ParamSet p) {
    if (!p.same_layout(pretrained_))
        throw ShapeError("set_pretrained: layout mismatch");
    pretrained_ = std::move(p);
}

double ToyDiffusionBackend::alpha_bar(int t) const {
    if (t < 0)
        return 1.0;
    if (t >= config_.timesteps)
        throw ValidationError("timestep " + std::to_string(t) + " outside schedule");
    return alpha_bar_[static_cast<std::size_t>(t)];
}

Eigen::RowVectorXd ToyDiffusionBackend::time_embedding(int t) const {
    if (t < 0 || t >= config_.timesteps)
        throw ValidationError("timestep " + std::to_string(t) + " outside schedule");
    const int half = config_.time_features / 2;
    const double u = static_cast<double>(t) / (config_.timesteps - 1);
    RowVectorXd e(config_.time_features);
    for (int i = 0; i < half; ++i) {
        const double w = std::numbers::pi * std::ldexp(1.0, i);
        e(2 * i) = std::sin(w * u);
        e(2 * i + 1) = std::cos(w * u);
    }
    return e;
}

Latent ToyDiffusionBackend::predict_noise(const ParamSet& params, const Latent& x_t, int t,
                                          const Conditioning& cond) const {
    return forward(params, x_t, time_embedding(t), cond).y;
}

void ToyDiffusionBackend::accumulate_vjp(const ParamSet& params, const Latent& x_t, int t, const Conditioning& cond,
                                         const Latent& grad_out, ParamSet& grads) const {
    const RowVectorXd temb = time_embedding(t);
    const Forward f = forward(params, x_t, temb, cond);
    if (grad_out.rows() != f.y.rows() || grad_out.cols() != f.y.cols())
        throw ShapeError("accumulate_vjp: grad_out shape mismatch");
    if (!grads.same_layout(params))
        throw ShapeError("accumulate_vjp: gradient layout mismatch");

    const auto& wq = params.at("attn2.to_q.weight");
    const auto& wo = params.at("attn2.to_out.0.weight");
    const auto& w1 = params.at("ff.weight");
    const auto& w2 = params.at("proj_out.weight");
    const double scale = 1.0 / std::sqrt(static_cast<double>(wq.rows()));

    const MatrixXd& g = grad_out;
    grads.at("proj_out.weight") += g.transpose() * f.h3;
    grads.at("proj_out.bias") += g.colwise().sum().transpose();

    const MatrixXd da3 = (g * w2).cwiseProduct(silu_grad(f.a3));
    grads.at("ff.weight") += da3.transpose() * f.h2;
    const Eigen::VectorXd da3_sum = da3.colwise().sum().transpose();
    grads.at("ff.bias") += da3_sum;
    grads.at("time_proj.weight") += da3_sum * temb;

    const MatrixXd dh2 = da3 * w1;
    grads.at("attn2.to_out.0.weight") += dh2.transpose() * f.o;
    grads.at("attn2.to_out.0.bias") += dh2.colwise().sum().transpose();

    const MatrixXd d_o = dh2 * wo;
    const MatrixXd dp = d_o * f.v.transpose();
    const MatrixXd dv = f.p.transpose() * d_o;
    MatrixXd ds = f.p.cwiseProduct(dp);
    const Eigen::VectorXd row_dot = ds.rowwise().sum();
    ds -= f.p.cwiseProduct(row_dot.replicate(1, f.p.cols()));
    ds *= scale;
    const MatrixXd dq = ds * f.k;
    const MatrixXd dk = ds.transpose() * f.q;

    grads.at("attn2.to_v.weight") += dv.transpose() * cond;
    grads.at("attn2.to_k.weight") += dk.transpose() * cond;
    grads.at("attn2.to_q.weight") += dq.transpose() * f.h1;

    const MatrixXd dh1 = dh2 + dq * wq;
    const MatrixXd da1 = dh1.cwiseProduct(silu_grad(f.a1));
    grads.at("proj_in.weight") += da1.transpose() * f.z0;
    grads.at("proj_in.bias") += da1.colwise().sum().transpose();
}

Latent ToyDiffusionBackend::add_noise(const Latent& x0, const Latent& noise, int t) const {
    const double ab = alpha_bar(t);
    return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * noise;
}

Latent ToyDiffusionBackend::ddim(const ParamSet& params, const Conditioning& cond, const Conditioning& uncond,
                                 Latent x, int from_t, int to_t) const {
    for (int s = from_t; s > to_t; --s) {
        const RowVectorXd temb = time_embedding(s);
        const MatrixXd eu = forward(params, x, temb, uncond).y;
        const MatrixXd ec = forward(params, x, temb, cond).y;
        const MatrixXd eps = eu + config_.guidance * (ec - eu);
        const double ab = alpha_bar(s);
        const double ab_prev = alpha_bar(s - 1);
        const MatrixXd x0 = (x - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
        x = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps;
    }
    return x;
}

Latent ToyDiffusionBackend::generate_latent(const ParamSet& params, const Conditioning& cond,
                                            const Conditioning& uncond, int t, std::uint64_t seed) const {
    if (t < 0 || t >= config_.timesteps)
        throw ValidationError("generate_latent: timestep out of range");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    Latent x(config_.latent_points, 2);
    for (Eigen::Index i = 0; i < x.size(); ++i)
        x(i) = g(rng);
    return ddim(params, cond, uncond, std::move(x), config_.timesteps - 1, t);
}

Latent ToyDiffusionBackend::generate(const ParamSet& params, const Conditioning& cond, const Conditioning& uncond,
                                     std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    Latent x(1, 2);
    x(0, 0) = g(rng);
    x(0, 1) = g(rng);
    return ddim(params, cond, uncond, std::move(x), config_.timesteps - 1, -1);
}

double ToyDiffusionBackend::pretrain(TextEncoder& encoder, const PretrainOptions& o) {
    std::mt19937_64 rng(o.seed);
    std::uniform_int_distribution<int> pick_k(0, kComponents - 1);
    std::uniform_int_distribution<int> pick_t(0, config_.timesteps - 1);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> g(0.0, 1.0);

    std::vector<std::vector<Conditioning>> conds(kComponents);
    for (const auto& c : lexicon()) {
        auto& bucket = conds[static_cast<std::size_t>(c.component)];
        bucket.push_back(encoder.encode_sequence(c.name));
        for (const auto& a : c.aliases)
            bucket.push_back(encoder.encode_sequence(a));
    }
    const Conditioning uncond = encoder.encode_sequence("");

    ParamSet& p = pretrained_;
    ParamSet m = p.zeros_like(), v = p.zeros_like();
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    double last = 0.0;
    for (int step = 1; step <= o.steps; ++step) {
        ParamSet grad = p.zeros_like();
        double loss = 0.0;
        const double denom = static_cast<double>(o.prompts_per_step) * o.points_per_prompt * 2;
        for (int j = 0; j < o.prompts_per_step; ++j) {
            const int k = pick_k(rng);
            const auto& bucket = conds[static_cast<std::size_t>(k)];
            const Conditioning& c =
                unif(rng) < o.uncond_prob
                    ? uncond
                    : bucket[std::uniform_int_distribution<std::size_t>(0, bucket.size() - 1)(rng)];
            const int t = pick_t(rng);
            const Latent x0 = sample_component(k, o.points_per_prompt, rng);
            Latent noise(o.points_per_prompt, 2);
            for (Eigen::Index i = 0; i < noise.size(); ++i)
                noise(i) = g(rng);
            const Latent xt = add_noise(x0, noise, t);
            const Latent diff = predict_noise(p, xt, t, c) - noise;
            loss += diff.squaredNorm() / denom;
            accumulate_vjp(p, xt, t, c, 2.0 * diff / denom, grad);
        }
        // linear decay over the last third
        const double frac = static_cast<double>(step) / o.steps;
        const double lr = o.learning_rate * (frac < 2.0 / 3.0 ? 1.0 : std::max(0.05, 3.0 * (1.0 - frac)));
        const double c1 = 1.0 - std::pow(b1, step), c2 = 1.0 - std::pow(b2, step);
        for (std::size_t i = 0; i < p.size(); ++i) {
            auto& gi = grad[i].value;
            m[i].value = b1 * m[i].value + (1 - b1) * gi;
            v[i].value = b2 * v[i].value + (1 - b2) * gi.cwiseAbs2();
            p[i].value.array() -= lr * (m[i].value.array() / c1) / ((v[i].value.array() / c2).sqrt() + eps);
        }
        last = 0.98 * last + 0.02 * loss;
        if (step == 1)
            last = loss;
    }
    return last;
}

} // namespace crce::toy
