#include "crce/clip_tokenizer.hpp"

#include "crce/error.hpp"
#include "crce/util.hpp"

#include <json.hpp>

#include <climits>
#include <sstream>

namespace crce {

namespace {

void append_utf8(std::string& out, char32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

std::vector<char32_t> decode_utf8(const std::string& s) {
    std::vector<char32_t> out;
    for (std::size_t i = 0; i < s.size();) {
        auto c = static_cast<unsigned char>(s[i]);
        int extra = c < 0x80 ? 0 : (c >> 5) == 0x6 ? 1 : (c >> 4) == 0xE ? 2 : (c >> 3) == 0x1E ? 3 : -1;
        if (extra < 0 || i + extra >= s.size()) {
            out.push_back(0xFFFD);
            ++i;
            continue;
        }
        char32_t cp = extra == 0 ? c : c & (0x3F >> extra);
        for (int k = 1; k <= extra; ++k)
            cp = (cp << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3F);
        out.push_back(cp);
        i += extra + 1;
    }
    return out;
}

bool is_space(char32_t c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v' || c == 0xA0 || c == 0x3000 ||
           (c >= 0x2000 && c <= 0x200A);
}

bool is_digit(char32_t c) { return c >= '0' && c <= '9'; }

// Approximates \p{L}: ASCII letters plus letter-bearing non-ASCII blocks.
bool is_letter(char32_t c) {
    if (c < 0x80)
        return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
    if (c < 0xC0 || c == 0xD7 || c == 0xF7)
        return c == 0xAA || c == 0xB5 || c == 0xBA;
    if ((c >= 0x2000 && c <= 0x2BFF) || (c >= 0x3000 && c <= 0x303F) || (c >= 0xFF00 && c <= 0xFF20) ||
        (c >= 0x1F000 && c <= 0x1FAFF))
        return false;
    return true;
}

char32_t to_lower_cp(char32_t c) {
    if (c >= 'A' && c <= 'Z')
        return c + 32;
    if (c >= 0xC0 && c <= 0xDE && c != 0xD7)
        return c + 32;
    return c;
}

std::vector<std::string> make_byte_encoder() {
    std::vector<int> bs;
    for (int b = '!'; b <= '~'; ++b) bs.push_back(b);
    for (int b = 0xA1; b <= 0xAC; ++b) bs.push_back(b);
    for (int b = 0xAE; b <= 0xFF; ++b) bs.push_back(b);
    std::vector<char32_t> map(256, 0);
    std::vector<bool> used(256, false);
    for (int b : bs) {
        map[b] = static_cast<char32_t>(b);
        used[b] = true;
    }
    int n = 0;
    for (int b = 0; b < 256; ++b)
        if (!used[b])
            map[b] = static_cast<char32_t>(256 + n++);
    std::vector<std::string> out(256);
    for (int b = 0; b < 256; ++b)
        append_utf8(out[b], map[b]);
    return out;
}

const std::string kBos = "<|startoftext|>";
const std::string kEos = "<|endoftext|>";

} // namespace

ClipTokenizer::ClipTokenizer(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt)
    : byte_encoder_(make_byte_encoder()) {
    auto vj = nlohmann::json::parse(read_file(vocab_json));
    for (auto& [tok, id] : vj.items())
        vocab_.emplace(tok, id.get<int>());

    std::istringstream merges(read_file(merges_txt));
    std::string line;
    int rank = 0;
    bool first = true;
    while (std::getline(merges, line)) {
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (first && line.rfind("#version", 0) == 0) {
            first = false;
            continue;
        }
        first = false;
        auto sp = line.find(' ');
        if (line.empty() || sp == std::string::npos)
            continue;
        ranks_.emplace(std::make_pair(line.substr(0, sp), line.substr(sp + 1)), rank++);
    }

    auto special = [&](const std::string& t) {
        auto it = vocab_.find(t);
        if (it == vocab_.end())
            throw ParseError("vocabulary lacks special token " + t, vocab_json.string());
        return it->second;
    };
    bos_ = special(kBos);
    eos_ = special(kEos);
    pad_ = eos_;
}

std::vector<std::string> ClipTokenizer::pre_tokenize(const std::string& raw) {
    // whitespace_clean + lower()
    std::vector<char32_t> cps;
    bool pending = false;
    for (char32_t c : decode_utf8(raw)) {
        if (is_space(c)) {
            pending = !cps.empty();
            continue;
        }
        if (pending) {
            cps.push_back(' ');
            pending = false;
        }
        cps.push_back(to_lower_cp(c));
    }

    auto matches = [&](std::size_t i, const std::string& lit) {
        if (i + lit.size() > cps.size())
            return false;
        for (std::size_t k = 0; k < lit.size(); ++k)
            if (cps[i + k] != static_cast<char32_t>(lit[k]))
                return false;
        return true;
    };
    static const char* contractions[] = {"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"};

    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < cps.size()) {
        std::string tok;
        if (matches(i, kBos) || matches(i, kEos)) {
            const auto& lit = matches(i, kBos) ? kBos : kEos;
            out.push_back(lit);
            i += lit.size();
            continue;
        }
        bool contraction = false;
        for (const char* c : contractions) {
            if (matches(i, c)) {
                out.emplace_back(c);
                i += std::char_traits<char>::length(c);
                contraction = true;
                break;
            }
        }
        if (contraction)
            continue;
        char32_t c = cps[i];
        if (is_space(c)) {
            ++i;
        } else if (is_letter(c)) {
            while (i < cps.size() && is_letter(cps[i]))
                append_utf8(tok, cps[i++]);
            out.push_back(std::move(tok));
        } else if (is_digit(c)) {
            append_utf8(tok, cps[i++]);
            out.push_back(std::move(tok));
        } else {
            while (i < cps.size() && !is_space(cps[i]) && !is_letter(cps[i]) && !is_digit(cps[i]))
                append_utf8(tok, cps[i++]);
            out.push_back(std::move(tok));
        }
    }
    return out;
}

std::vector<std::string> ClipTokenizer::bpe(const std::string& token) const {
    std::vector<std::string> word;
    for (unsigned char b : token)
        word.push_back(byte_encoder_[b]);
    if (word.empty())
        return {};
    word.back() += "</w>";

    while (word.size() > 1) {
        int best = INT_MAX;
        std::size_t best_i = 0;
        for (std::size_t i = 0; i + 1 < word.size(); ++i) {
            auto it = ranks_.find({word[i], word[i + 1]});
            if (it != ranks_.end() && it->second < best) {
                best = it->second;
                best_i = i;
            }
        }
        if (best == INT_MAX)
            break;
        const std::string first = word[best_i];
        const std::string second = word[best_i + 1];
        std::vector<std::string> merged;
        for (std::size_t i = 0; i < word.size();) {
            if (i + 1 < word.size() && word[i] == first && word[i + 1] == second) {
                merged.push_back(first + second);
                i += 2;
            } else {
                merged.push_back(word[i++]);
            }
        }
        word = std::move(merged);
    }
    return word;
}

std::vector<int> ClipTokenizer::encode_words(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& tok : pre_tokenize(text)) {
        if (tok == kBos || tok == kEos) {
            ids.push_back(vocab_.at(tok));
            continue;
        }
        for (const auto& piece : bpe(tok)) {
            auto it = vocab_.find(piece);
            if (it == vocab_.end())
                throw ValidationError("token '" + piece + "' is missing from the vocabulary");
            ids.push_back(it->second);
        }
    }
    return ids;
}

std::vector<int> ClipTokenizer::encode(const std::string& text, std::size_t max_length) const {
    std::vector<int> ids{bos_};
    auto words = encode_words(text);
    ids.insert(ids.end(), words.begin(), words.end());
    ids.push_back(eos_);
    if (ids.size() > max_length)
        throw ValidationError("prompt needs " + std::to_string(ids.size()) + " tokens, encoder limit is " +
                              std::to_string(max_length));
    return ids;
}

} // namespace crce
