#pragma once

#include "crce/clip_tokenizer.hpp"
#include "crce/embedding.hpp"
#include "crce/safetensors.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace crce {

struct ClipTextConfig {
    int hidden_size = 768;
    int intermediate_size = 3072;
    int num_attention_heads = 12;
    int num_hidden_layers = 12;
    int max_position_embeddings = 77;
    double layer_norm_eps = 1e-5;
    std::string hidden_act = "quick_gelu";

    /// Reads a CLIPTextModel config.json, or the `text_config` section of a CLIPModel one.
    static ClipTextConfig from_file(const std::filesystem::path& config_json);
};

/// Pre-LN causal transformer of the CLIP text tower.
template <typename Scalar>
class ClipTextTransformer {
public:
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
    using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

    ClipTextTransformer(const ClipTextConfig& config, const SafetensorsFile& weights);

    /// Final-layer-normed hidden states, one row per input id.
    Matrix forward(const std::vector<int>& ids) const;

    const ClipTextConfig& config() const noexcept { return config_; }
    /// Text projection matrix when the checkpoint carries one (full CLIPModel).
    const std::optional<Matrix>& projection() const noexcept { return projection_; }

private:
    struct Layer {
        Matrix q_w, k_w, v_w, o_w, fc1_w, fc2_w;
        RowVector q_b, k_b, v_b, o_b, fc1_b, fc2_b;
        RowVector ln1_g, ln1_b, ln2_g, ln2_b;
    };

    Matrix layer_norm(const Matrix& x, const RowVector& gamma, const RowVector& beta) const;
    Matrix activation(const Matrix& x) const;

    ClipTextConfig config_;
    Matrix token_embedding_;
    Matrix position_embedding_;
    std::vector<Layer> layers_;
    RowVector final_ln_g_, final_ln_b_;
    std::optional<Matrix> projection_;
};

enum class ClipPooling { Eos, EosProjected, Mean };

std::string_view pooling_name(ClipPooling p) noexcept;
ClipPooling parse_pooling(std::string_view s);

/// TextEncoder over a Hugging Face CLIP text checkpoint directory. Accepts either a
/// flat directory (config.json, model.safetensors, vocab.json, merges.txt) or a
/// Stable Diffusion pipeline root with `text_encoder/` and `tokenizer/`.
class ClipTextEncoder : public TextEncoder {
public:
    explicit ClipTextEncoder(const std::filesystem::path& model_dir, ClipPooling pooling = ClipPooling::Eos);

    std::string id() const override;
    EmbeddingVector encode_pooled(const std::string& text) override;
    /// Full padded sequence (max_position_embeddings rows), as a diffusion model consumes it.
    Conditioning encode_sequence(const std::string& text) override;

    std::vector<int> tokenize(const std::string& text) const;
    ClipPooling pooling() const noexcept { return pooling_; }
    void set_pooling(ClipPooling p);

    /// Locates a checkpoint via $CRCE_CLIP_MODEL_DIR or a few conventional paths.
    static std::optional<std::filesystem::path> discover();

private:
    std::filesystem::path dir_;
    ClipPooling pooling_;
    std::unique_ptr<ClipTokenizer> tokenizer_;
    std::unique_ptr<ClipTextTransformer<float>> model_;
};

extern template class ClipTextTransformer<float>;
extern template class ClipTextTransformer<double>;

} // namespace crce
