#include "crce/clip_text_encoder.hpp"

#include "crce/error.hpp"
#include "crce/util.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <limits>

namespace crce {

using nlohmann::json;

ClipTextConfig ClipTextConfig::from_file(const std::filesystem::path& config_json) {
    auto j = json::parse(read_file(config_json));
    if (j.contains("text_config") && j["text_config"].is_object())
        j = j["text_config"];
    ClipTextConfig c;
    c.hidden_size = j.value("hidden_size", c.hidden_size);
    c.intermediate_size = j.value("intermediate_size", c.intermediate_size);
    c.num_attention_heads = j.value("num_attention_heads", c.num_attention_heads);
    c.num_hidden_layers = j.value("num_hidden_layers", c.num_hidden_layers);
    c.max_position_embeddings = j.value("max_position_embeddings", c.max_position_embeddings);
    c.layer_norm_eps = j.value("layer_norm_eps", c.layer_norm_eps);
    c.hidden_act = j.value("hidden_act", c.hidden_act);
    if (c.hidden_size % c.num_attention_heads != 0)
        throw ConfigError("hidden_size must be divisible by num_attention_heads");
    return c;
}

template <typename Scalar>
ClipTextTransformer<Scalar>::ClipTextTransformer(const ClipTextConfig& config, const SafetensorsFile& w)
    : config_(config) {
    const std::string prefix = w.contains("text_model.embeddings.token_embedding.weight") ? "text_model." : "";
    auto mat = [&](const std::string& name) { return w.matrix<Scalar>(prefix + name); };
    auto row = [&](const std::string& name) -> RowVector { return w.vector<Scalar>(prefix + name).transpose(); };

    token_embedding_ = mat("embeddings.token_embedding.weight");
    position_embedding_ = mat("embeddings.position_embedding.weight");
    if (token_embedding_.cols() != config.hidden_size)
        throw ConfigError("token embedding width does not match hidden_size");
    for (int l = 0; l < config.num_hidden_layers; ++l) {
        const std::string p = "encoder.layers." + std::to_string(l) + ".";
        Layer layer;
        layer.q_w = mat(p + "self_attn.q_proj.weight");
        layer.q_b = row(p + "self_attn.q_proj.bias");
        layer.k_w = mat(p + "self_attn.k_proj.weight");
        layer.k_b = row(p + "self_attn.k_proj.bias");
        layer.v_w = mat(p + "self_attn.v_proj.weight");
        layer.v_b = row(p + "self_attn.v_proj.bias");
        layer.o_w = mat(p + "self_attn.out_proj.weight");
        layer.o_b = row(p + "self_attn.out_proj.bias");
        layer.fc1_w = mat(p + "mlp.fc1.weight");
        layer.fc1_b = row(p + "mlp.fc1.bias");
        layer.fc2_w = mat(p + "mlp.fc2.weight");
        layer.fc2_b = row(p + "mlp.fc2.bias");
        layer.ln1_g = row(p + "layer_norm1.weight");
        layer.ln1_b = row(p + "layer_norm1.bias");
        layer.ln2_g = row(p + "layer_norm2.weight");
        layer.ln2_b = row(p + "layer_norm2.bias");
        layers_.push_back(std::move(layer));
    }
    final_ln_g_ = row("final_layer_norm.weight");
    final_ln_b_ = row("final_layer_norm.bias");
    if (w.contains("text_projection.weight"))
        projection_ = w.matrix<Scalar>("text_projection.weight");
}

template <typename Scalar>
auto ClipTextTransformer<Scalar>::layer_norm(const Matrix& x, const RowVector& gamma, const RowVector& beta) const
    -> Matrix {
    Matrix out(x.rows(), x.cols());
    const auto eps = static_cast<Scalar>(config_.layer_norm_eps);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const Scalar mean = x.row(r).mean();
        RowVector centered = x.row(r).array() - mean;
        const Scalar var = centered.squaredNorm() / static_cast<Scalar>(x.cols());
        out.row(r) = (centered.array() / std::sqrt(var + eps)) * gamma.array() + beta.array();
    }
    return out;
}

template <typename Scalar>
auto ClipTextTransformer<Scalar>::activation(const Matrix& x) const -> Matrix {
    if (config_.hidden_act == "quick_gelu")
        return x.array() * (Scalar(1) / (Scalar(1) + (Scalar(-1.702) * x.array()).exp()));
    if (config_.hidden_act == "gelu")
        return x.unaryExpr([](Scalar v) { return Scalar(0.5) * v * (Scalar(1) + std::erf(v / std::sqrt(Scalar(2)))); });
    throw ConfigError("unsupported activation " + config_.hidden_act);
}

template <typename Scalar>
auto ClipTextTransformer<Scalar>::forward(const std::vector<int>& ids) const -> Matrix {
    const auto n = static_cast<Eigen::Index>(ids.size());
    if (n == 0 || n > position_embedding_.rows())
        throw ValidationError("sequence length " + std::to_string(n) + " outside encoder range");
    const int heads = config_.num_attention_heads;
    const Eigen::Index hd = config_.hidden_size / heads;
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));

    Matrix x(n, config_.hidden_size);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (ids[i] < 0 || ids[i] >= token_embedding_.rows())
            throw ValidationError("token id out of range");
        x.row(i) = token_embedding_.row(ids[i]) + position_embedding_.row(i);
    }

    for (const auto& L : layers_) {
        Matrix h = layer_norm(x, L.ln1_g, L.ln1_b);
        Matrix q = ((h * L.q_w.transpose()).rowwise() + L.q_b) * scale;
        Matrix k = (h * L.k_w.transpose()).rowwise() + L.k_b;
        Matrix v = (h * L.v_w.transpose()).rowwise() + L.v_b;
        Matrix ctx(n, config_.hidden_size);
        for (int hh = 0; hh < heads; ++hh) {
            const auto cols = Eigen::seqN(hh * hd, hd);
            Matrix s = q(Eigen::all, cols) * k(Eigen::all, cols).transpose();
            for (Eigen::Index i = 0; i < n; ++i) {
                // causal mask: token i attends to 0..i
                const Scalar m = s.row(i).head(i + 1).maxCoeff();
                RowVector p = RowVector::Zero(n);
                p.head(i + 1) = (s.row(i).head(i + 1).array() - m).exp();
                p /= p.sum();
                s.row(i) = p;
            }
            ctx(Eigen::all, cols) = s * v(Eigen::all, cols);
        }
        x += (ctx * L.o_w.transpose()).rowwise() + L.o_b;

        h = layer_norm(x, L.ln2_g, L.ln2_b);
        Matrix f = (h * L.fc1_w.transpose()).rowwise() + L.fc1_b;
        f = activation(f);
        x += (f * L.fc2_w.transpose()).rowwise() + L.fc2_b;
    }
    return layer_norm(x, final_ln_g_, final_ln_b_);
}

template class ClipTextTransformer<float>;
template class ClipTextTransformer<double>;

std::string_view pooling_name(ClipPooling p) noexcept {
    switch (p) {
    case ClipPooling::Eos: return "eos";
    case ClipPooling::EosProjected: return "eos_projected";
    case ClipPooling::Mean: return "mean";
    }
    return "";
}

ClipPooling parse_pooling(std::string_view s) {
    if (s == "eos") return ClipPooling::Eos;
    if (s == "eos_projected") return ClipPooling::EosProjected;
    if (s == "mean") return ClipPooling::Mean;
    throw ConfigError("unknown pooling '" + std::string(s) + "'");
}

namespace {

struct CheckpointLayout {
    std::filesystem::path config, weights, vocab, merges, tokenizer_config;
};

CheckpointLayout resolve_layout(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    CheckpointLayout l;
    fs::path enc = fs::exists(dir / "text_encoder") ? dir / "text_encoder" : dir;
    fs::path tok = fs::exists(dir / "tokenizer") ? dir / "tokenizer" : dir;
    l.config = enc / "config.json";
    l.weights = enc / "model.safetensors";
    l.vocab = tok / "vocab.json";
    l.merges = tok / "merges.txt";
    l.tokenizer_config = tok / "tokenizer_config.json";
    for (const auto* p : {&l.config, &l.weights, &l.vocab, &l.merges})
        if (!fs::exists(*p))
            throw ConfigError("CLIP checkpoint is missing " + p->string());
    return l;
}

} // namespace

ClipTextEncoder::ClipTextEncoder(const std::filesystem::path& model_dir, ClipPooling pooling)
    : dir_(model_dir), pooling_(pooling) {
    auto layout = resolve_layout(model_dir);
    tokenizer_ = std::make_unique<ClipTokenizer>(layout.vocab, layout.merges);
    if (std::filesystem::exists(layout.tokenizer_config)) {
        auto tc = json::parse(read_file(layout.tokenizer_config));
        if (auto it = tc.find("pad_token"); it != tc.end()) {
            std::string pad = it->is_string() ? it->get<std::string>()
                              : it->is_object() ? it->value("content", std::string{})
                                                : std::string{};
            if (!pad.empty()) {
                auto ids = tokenizer_->encode_words(pad);
                if (ids.size() == 1)
                    tokenizer_->set_pad_id(ids[0]);
            }
        }
    }
    SafetensorsFile weights(layout.weights);
    model_ = std::make_unique<ClipTextTransformer<float>>(ClipTextConfig::from_file(layout.config), weights);
    set_pooling(pooling);
}

void ClipTextEncoder::set_pooling(ClipPooling p) {
    if (p == ClipPooling::EosProjected && !model_->projection())
        throw ConfigError("checkpoint has no text_projection; eos_projected pooling unavailable");
    pooling_ = p;
}

std::string ClipTextEncoder::id() const {
    return "clip:" + std::filesystem::absolute(dir_).lexically_normal().string() + ":" +
           std::string(pooling_name(pooling_));
}

std::vector<int> ClipTextEncoder::tokenize(const std::string& text) const {
    return tokenizer_->encode(text, static_cast<std::size_t>(model_->config().max_position_embeddings));
}

EmbeddingVector ClipTextEncoder::encode_pooled(const std::string& text) {
    if (trim(text).empty())
        throw ValidationError("encode_pooled: text must not be empty");
    auto ids = tokenize(text);
    auto hidden = model_->forward(ids);
    const Eigen::Index eos = static_cast<Eigen::Index>(ids.size()) - 1;
    Eigen::VectorXf pooled;
    switch (pooling_) {
    case ClipPooling::Eos: pooled = hidden.row(eos).transpose(); break;
    case ClipPooling::EosProjected: pooled = *model_->projection() * hidden.row(eos).transpose(); break;
    case ClipPooling::Mean: pooled = hidden.colwise().mean().transpose(); break;
    }
    Eigen::VectorXd out = pooled.cast<double>();
    out.normalize();
    return {out, true};
}

Conditioning ClipTextEncoder::encode_sequence(const std::string& text) {
    auto ids = tokenize(text);
    ids.resize(static_cast<std::size_t>(model_->config().max_position_embeddings), tokenizer_->pad_id());
    return model_->forward(ids).cast<double>();
}

std::optional<std::filesystem::path> ClipTextEncoder::discover() {
    namespace fs = std::filesystem;
    std::vector<fs::path> candidates;
    if (const char* env = std::getenv("CRCE_CLIP_MODEL_DIR"))
        candidates.emplace_back(env);
    if (const char* home = std::getenv("HOME")) {
        candidates.emplace_back(fs::path(home) / "models/stable-diffusion-v1-4");
        candidates.emplace_back(fs::path(home) / "models/clip-vit-large-patch14");
    }
    candidates.emplace_back("/models/stable-diffusion-v1-4");
    candidates.emplace_back("/models/clip-vit-large-patch14");
    for (const auto& c : candidates) {
        std::error_code ec;
        try {
            if (fs::exists(c, ec)) {
                resolve_layout(c);
                return c;
            }
        } catch (const ConfigError&) {
        }
    }
    return std::nullopt;
}

} // namespace crce
