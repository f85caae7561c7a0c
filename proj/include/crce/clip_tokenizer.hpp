#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

namespace crce {

/// Byte-level BPE tokenizer used by CLIP text encoders, reading the
/// `vocab.json` + `merges.txt` pair shipped with Hugging Face checkpoints.
class ClipTokenizer {
public:
    ClipTokenizer(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt);

    /// Lower-cased, whitespace-collapsed pre-tokenisation followed by BPE.
    std::vector<int> encode_words(const std::string& text) const;

    /// [BOS] tokens [EOS]. Throws ValidationError when longer than `max_length`
    /// instead of truncating.
    std::vector<int> encode(const std::string& text, std::size_t max_length) const;

    int bos_id() const noexcept { return bos_; }
    int eos_id() const noexcept { return eos_; }
    int pad_id() const noexcept { return pad_; }
    void set_pad_id(int id) { pad_ = id; }
    std::size_t vocab_size() const noexcept { return vocab_.size(); }

    /// Splits text into pre-tokens the way the CLIP regex does for common scripts.
    static std::vector<std::string> pre_tokenize(const std::string& text);

private:
    std::vector<std::string> bpe(const std::string& token) const;

    std::unordered_map<std::string, int> vocab_;
    std::map<std::pair<std::string, std::string>, int> ranks_;
    std::vector<std::string> byte_encoder_;
    int bos_ = -1;
    int eos_ = -1;
    int pad_ = -1;
};

} // namespace crce
