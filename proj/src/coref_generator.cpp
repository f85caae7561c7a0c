#include "crce/coref_generator.hpp"

#include "crce/util.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <random>

namespace crce {

using nlohmann::json;

namespace {

constexpr const char* kTaskInstruction = R"(This research program focuses on the concept erasing behavior of Text-2-Image models, especially Stable Diffusion v1.4.
The goal is to explore the under-/over-erasure behavior of the current concept erasure algorithms.
As part of this academic study, you will generate coreferential (coref) lists and retention (retains) lists for specified concepts.

1. You will be given a concept that can belong to one of the following categories: Object, Intellectual Property (IP), and Celebrity.
2. Your objective is to provide a list of 15 corefs concepts that correspond to the specified target concept.
3. The corefs should be visually related to the target concept.
4. That means these prompts can be used to generate an related image from the corefs for generative models such as Stable Diffusion.
5. Do not use very vague and general description.
6. Better not to include other irrelevant concept in the prompt.
   a. For example, when we find corefs for the celebrity "Samuel L. Jackson", the bad prompt such as "Frequent co-star with Bruce Willis" will let the T2I generative model generate "Bruce Willis" but not "Samuel L. Jackson" himself.
   b. The input concept could have multiple meanings, if you find the word to be ambiguous, you can use each of its meaning to form a JSON list. For example, apple may refer to "the fruit apple" or "the tech company apple", so you need to generate two sets of answers.

Also provide a list of 15 retains: concepts that are similar to the target but distinct from it, which should remain intact if the target concept is erased.

Respond with JSON only, no prose. The reply must be a JSON list with one object per meaning of the concept:
[{"sense": "<meaning>", "corefs": [{"text": "...", "certainty": "..."}, ... 15 items], "retains": [{"text": "...", "certainty": "..."}, ... 15 items]}])";

constexpr const char* kCertaintyCriteria = R"(1. Order the concepts by their relevance or confidence:
   a. The first item should be a synonym or the most accurate descriptor of the concept.
   b. The last item should be the most vague or loosely related concept.
   c. If it is possible, give more high certainty coreferential as many as possible
2. Assign a level of certainty to each item. Use the following scale: from "Very High" to "High", "Normal", "Low", and "Very Low".

The level of certainty should be based on these Certainty Criteria:
1. Visual and Semantic Relevance:
   a. Coref entries are chosen because they are visually or conceptually similar to the target concept, ensuring they can prompt related images in generative models.
   b. Retain entries are selected to represent similar but distinct concepts that should remain intact if the target concept is erased.
2. Contextual Specificity:
   a. For celebrity and IP concepts, details such as roles, iconic traits, and narrative associations are incorporated to ensure the corefs accurately represent the subject.
3. Avoiding Vague Descriptions:
   a. The generated terms aim to be specific enough to avoid misinterpretations by generative models.
   b. Unrelated or overly generic descriptors are avoided to maintain high relevance.
4. Balancing Similarity and Distinctiveness:
   a. Coref lists focus on descriptors that are tightly aligned with the target concept.
   b. Retain lists include similar entities that are visually related but not identical, ensuring that the concept erasing process does not inadvertently remove associated, yet distinct, concepts.)";

std::string category_display(Category c) {
    switch (c) {
    case Category::Object: return "Object";
    case Category::IP: return "Intellectual Property (IP)";
    case Category::Celebrity: return "Celebrity";
    }
    return "";
}

/// Index of the bracket matching text[open], honouring JSON strings.
std::size_t matching_bracket(const std::string& text, std::size_t open) {
    const char o = text[open];
    const char c = o == '[' ? ']' : '}';
    int depth = 0;
    bool in_string = false;
    for (std::size_t i = open; i < text.size(); ++i) {
        char ch = text[i];
        if (in_string) {
            if (ch == '\\')
                ++i;
            else if (ch == '"')
                in_string = false;
            continue;
        }
        if (ch == '"')
            in_string = true;
        else if (ch == o)
            ++depth;
        else if (ch == c && --depth == 0)
            return i;
    }
    return std::string::npos;
}

/// Strict parse first, then the first balanced JSON block embedded in prose.
std::optional<json> extract_json(const std::string& text) {
    try {
        return json::parse(text);
    } catch (const json::parse_error&) {
    }
    for (std::size_t pos = 0; pos < text.size(); ++pos) {
        if (text[pos] != '[' && text[pos] != '{')
            continue;
        auto end = matching_bracket(text, pos);
        if (end == std::string::npos)
            continue;
        try {
            auto j = json::parse(text.substr(pos, end - pos + 1));
            if (j.is_array() || j.is_object())
                return j;
        } catch (const json::parse_error&) {
        }
    }
    return std::nullopt;
}

std::vector<CandidateEntry> parse_pool(const json& arr, const std::string& side, std::vector<Violation>& violations) {
    std::vector<CandidateEntry> out;
    if (!arr.is_array()) {
        violations.push_back({"MALFORMED_POOL", side, side + " is not a list", Violation::Severity::Error});
        return out;
    }
    for (std::size_t i = 0; i < arr.size(); ++i) {
        auto path = side + "[" + std::to_string(i) + "]";
        CandidateEntry e;
        const auto& item = arr[i];
        if (item.is_string()) {
            e.text = item.get<std::string>();
        } else if (item.is_object()) {
            if (auto it = item.find("text"); it != item.end() && it->is_string())
                e.text = it->get<std::string>();
            if (auto it = item.find("certainty"); it != item.end() && it->is_string())
                e.certainty_label = it->get<std::string>();
        }
        e.certainty = try_parse_certainty(e.certainty_label);
        if (!e.certainty)
            violations.push_back({"UNKNOWN_CERTAINTY", path,
                                  "certainty '" + e.certainty_label + "' is not one of the five levels",
                                  Violation::Severity::Error});
        out.push_back(std::move(e));
    }
    return out;
}

ProposalPools parse_sense(const json& j, std::size_t index) {
    ProposalPools p;
    if (!j.is_object())
        throw ParseError("sense entry is not an object", "senses[" + std::to_string(index) + "]");
    if (auto it = j.find("sense"); it != j.end() && it->is_string())
        p.sense = it->get<std::string>();
    auto cor = j.find("corefs");
    auto ret = j.find("retains");
    if (cor == j.end() || ret == j.end())
        throw ParseError("sense needs both 'corefs' and 'retains'", "senses[" + std::to_string(index) + "]");
    p.corefs = parse_pool(*cor, "corefs", p.violations);
    p.retains = parse_pool(*ret, "retains", p.violations);
    return p;
}

} // namespace

std::vector<ChatMessage> build_generation_prompt(const std::string& target, Category category) {
    if (trim(target).empty())
        throw ValidationError("target concept must not be empty");
    return {
        {Role::System, kTaskInstruction},
        {Role::System, kCertaintyCriteria},
        {Role::User, "Concept: " + target + "\nCategory: " + category_display(category)},
    };
}

std::vector<ProposalPools> parse_generation_response(const std::string& text) {
    auto j = extract_json(text);
    if (!j)
        throw ResponseParseError("no JSON payload found in LLM response", text);

    const json* senses = &*j;
    json wrapped;
    if (j->is_object()) {
        if (auto it = j->find("senses"); it != j->end()) {
            senses = &*it;
        } else {
            wrapped = json::array({*j});
            senses = &wrapped;
        }
    }
    if (!senses->is_array() || senses->empty())
        throw ResponseParseError("LLM response holds no senses", text);

    std::vector<ProposalPools> out;
    try {
        for (std::size_t i = 0; i < senses->size(); ++i)
            out.push_back(parse_sense((*senses)[i], i));
    } catch (const ParseError& e) {
        throw ResponseParseError(e.what(), text);
    }
    return out;
}

std::string render_generation_response(const std::vector<ProposalPools>& proposals) {
    json arr = json::array();
    auto pool = [](const std::vector<CandidateEntry>& entries) {
        json a = json::array();
        for (const auto& e : entries)
            a.push_back(json{{"text", e.text},
                             {"certainty", e.certainty ? std::string(certainty_label(*e.certainty)) : e.certainty_label}});
        return a;
    };
    for (const auto& p : proposals)
        arr.push_back(json{{"sense", p.sense}, {"corefs", pool(p.corefs)}, {"retains", pool(p.retains)}});
    return arr.dump(2);
}

std::vector<Violation> validate_pools(const std::vector<CandidateEntry>& coref_pool,
                                      const std::vector<CandidateEntry>& retain_pool, const std::string& target) {
    std::vector<Violation> out;
    const auto target_key = normalize_prompt(target);
    std::map<std::string, std::string> coref_keys;

    auto check = [&](const std::vector<CandidateEntry>& pool, const std::string& side, bool is_retain) {
        if (pool.size() != kPoolSize)
            out.push_back({"POOL_SIZE", side,
                           "expected " + std::to_string(kPoolSize) + " entries, found " + std::to_string(pool.size()),
                           Violation::Severity::Error});
        std::map<std::string, std::string> seen;
        int prev_rank = -1;
        for (std::size_t i = 0; i < pool.size(); ++i) {
            auto path = side + "[" + std::to_string(i) + "]";
            const auto& e = pool[i];
            auto key = normalize_prompt(e.text);
            if (key.empty()) {
                out.push_back({"EMPTY_TEXT", path, "entry text is empty", Violation::Severity::Error});
            } else {
                if (auto [it, ok] = seen.emplace(key, path); !ok)
                    out.push_back({"DUPLICATE", path, "'" + e.text + "' duplicates " + it->second,
                                   Violation::Severity::Error});
                if (is_retain) {
                    if (key == target_key)
                        out.push_back({"TARGET_IN_RETAIN", path, "retain equals the target concept",
                                       Violation::Severity::Error});
                    if (auto it = coref_keys.find(key); it != coref_keys.end())
                        out.push_back({"SET_OVERLAP", path, "also proposed as coref at " + it->second,
                                       Violation::Severity::Error});
                } else {
                    coref_keys.emplace(key, path);
                }
            }
            if (!e.certainty) {
                out.push_back({"UNKNOWN_CERTAINTY", path, "certainty '" + e.certainty_label + "' is not a known level",
                               Violation::Severity::Error});
                continue;
            }
            int rank = certainty_rank(*e.certainty);
            if (rank < prev_rank)
                out.push_back({"NON_MONOTONE", path,
                               std::string(certainty_label(*e.certainty)) + " follows a lower certainty",
                               Violation::Severity::Warning});
            prev_rank = std::max(prev_rank, rank);
        }
    };
    check(coref_pool, "corefs", false);
    check(retain_pool, "retains", true);
    return out;
}

std::vector<ConceptEntry> to_entries(const std::vector<CandidateEntry>& pool) {
    std::vector<ConceptEntry> out;
    out.reserve(pool.size());
    for (const auto& e : pool) {
        if (!e.certainty)
            throw ValidationError("entry '" + e.text + "' has unknown certainty '" + e.certainty_label + "'");
        out.push_back({trim(e.text), *e.certainty});
    }
    return out;
}

std::vector<CandidateEntry> to_candidates(const std::vector<ConceptEntry>& entries) {
    std::vector<CandidateEntry> out;
    for (const auto& e : entries)
        out.push_back({e.text, std::string(certainty_label(e.certainty)), e.certainty});
    return out;
}

ConceptSplit split_train_test(const std::vector<ConceptEntry>& pool, std::uint64_t seed) {
    if (pool.size() != kPoolSize)
        throw ValidationError("split needs exactly " + std::to_string(kPoolSize) + " entries, got " +
                              std::to_string(pool.size()));
    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    // Fisher-Yates with an explicit draw so the split does not depend on the
    // standard library's shuffle implementation.
    for (std::size_t i = idx.size() - 1; i > 0; --i) {
        std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
        std::swap(idx[i], idx[j]);
    }
    std::vector<bool> in_train(pool.size(), false);
    for (std::size_t k = 0; k < kTrainSize; ++k)
        in_train[idx[k]] = true;
    ConceptSplit out;
    for (std::size_t i = 0; i < pool.size(); ++i)
        (in_train[i] ? out.train : out.test).push_back(pool[i]);
    return out;
}

const std::vector<ProposalPools>& GenerationSession::latest() const {
    if (proposals.empty())
        throw ValidationError("session has no proposals yet");
    return proposals.back();
}

GenerationSession start_session(const std::string& target, Category category, ChatClient& client) {
    GenerationSession s;
    s.target = target;
    s.category = category;
    s.transcript = build_generation_prompt(target, category);
    auto reply = client.send_chat(s.transcript);
    auto pools = parse_generation_response(reply);
    s.transcript.push_back({Role::Assistant, reply});
    s.proposals.push_back(std::move(pools));
    s.round = 1;
    return s;
}

GenerationSession refine(const GenerationSession& session, const std::string& expert_feedback, ChatClient& client) {
    if (session.proposals.empty())
        throw ValidationError("refine needs a session with at least one proposal round");
    if (trim(expert_feedback).empty())
        throw ValidationError("expert feedback must not be empty");
    auto transcript = session.transcript;
    transcript.push_back({Role::User, expert_feedback});
    auto reply = client.send_chat(transcript);
    auto pools = parse_generation_response(reply);

    GenerationSession next = session;
    next.transcript = std::move(transcript);
    next.transcript.push_back({Role::Assistant, reply});
    next.proposals.push_back(std::move(pools));
    next.round = session.round + 1;
    return next;
}

GenerationSession session_from_record(const ConceptRecord& record) {
    GenerationSession s;
    s.target = record.target;
    s.category = record.category;
    s.transcript = build_generation_prompt(record.target, record.category);
    ProposalPools pools;
    pools.sense = record.disambiguation.value_or("");
    pools.corefs = to_candidates(record.corefs.all());
    pools.retains = to_candidates(record.retains.all());
    s.transcript.push_back({Role::Assistant, render_generation_response({pools})});
    s.proposals.push_back({std::move(pools)});
    s.round = 1;
    return s;
}

DraftResult draft_record_from_pools(const ProposalPools& pools, const std::string& target, Category category,
                                    bool ambiguous, std::uint64_t seed) {
    DraftResult out;
    out.violations = pools.violations;
    auto pool_violations = validate_pools(pools.corefs, pools.retains, target);
    out.violations.insert(out.violations.end(), pool_violations.begin(), pool_violations.end());

    auto& r = out.record;
    r.target = target;
    r.category = category;
    r.state = RecordState::Draft;
    if (ambiguous && !pools.sense.empty())
        r.disambiguation = pools.sense;

    auto resolved = [](const std::vector<CandidateEntry>& pool) {
        std::vector<ConceptEntry> entries;
        for (const auto& e : pool)
            if (e.certainty && !trim(e.text).empty())
                entries.push_back({trim(e.text), *e.certainty});
        return entries;
    };
    auto corefs = resolved(pools.corefs);
    auto retains = resolved(pools.retains);
    // Seeds for the two sides differ so the partitions are independent.
    if (corefs.size() == kPoolSize)
        r.corefs = split_train_test(corefs, seed);
    else
        r.corefs.train = std::move(corefs);
    if (retains.size() == kPoolSize)
        r.retains = split_train_test(retains, seed ^ 0x9e3779b97f4a7c15ULL);
    else
        r.retains.train = std::move(retains);
    return out;
}

} // namespace crce
