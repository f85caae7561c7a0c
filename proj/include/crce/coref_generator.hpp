#pragma once

#include "crce/chat_client.hpp"
#include "crce/dataset.hpp"
#include "crce/error.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace crce {

/// Entry as proposed by the LLM, before its certainty label is known to be valid.
struct CandidateEntry {
    std::string text;
    std::string certainty_label;
    std::optional<Certainty> certainty;

    bool operator==(const CandidateEntry&) const = default;
};

/// One ambiguity sense: a coref pool and a retain pool, 15 each when well-formed.
struct ProposalPools {
    std::string sense;
    std::vector<CandidateEntry> corefs;
    std::vector<CandidateEntry> retains;
    /// Parse-time problems such as UNKNOWN_CERTAINTY.
    std::vector<Violation> violations;
};

/// Raised when no JSON payload can be recovered from an LLM reply.
class ResponseParseError : public ParseError {
public:
    ResponseParseError(const std::string& what, std::string raw)
        : ParseError(what, "llm response"), raw_(std::move(raw)) {}

    const std::string& raw_text() const noexcept { return raw_; }

private:
    std::string raw_;
};

/// Task instruction, certainty criteria, then the user turn naming the concept.
std::vector<ChatMessage> build_generation_prompt(const std::string& target, Category category);

std::vector<ProposalPools> parse_generation_response(const std::string& text);

/// Inverse of parse_generation_response for well-formed pools.
std::string render_generation_response(const std::vector<ProposalPools>& proposals);

std::vector<Violation> validate_pools(const std::vector<CandidateEntry>& coref_pool,
                                      const std::vector<CandidateEntry>& retain_pool,
                                      const std::string& target);

/// Throws ValidationError if any entry has an unresolved certainty.
std::vector<ConceptEntry> to_entries(const std::vector<CandidateEntry>& pool);
std::vector<CandidateEntry> to_candidates(const std::vector<ConceptEntry>& entries);

/// Uniform random 10/5 partition of a 15-entry pool; pool order is kept inside each part.
ConceptSplit split_train_test(const std::vector<ConceptEntry>& pool, std::uint64_t seed);

struct GenerationSession {
    std::string target;
    Category category = Category::Object;
    std::vector<ChatMessage> transcript;
    /// One element per round; each round holds one ProposalPools per sense.
    std::vector<std::vector<ProposalPools>> proposals;
    int round = 0;

    const std::vector<ProposalPools>& latest() const;
};

/// Sends the initial prompt and parses the first proposal (round 1).
GenerationSession start_session(const std::string& target, Category category, ChatClient& client);

/// Appends expert feedback, re-queries with the full transcript and parses a new
/// proposal. The input session is never modified; on failure the error propagates.
GenerationSession refine(const GenerationSession& session, const std::string& expert_feedback, ChatClient& client);

/// Seeds a session from an existing record so regeneration requests have context.
GenerationSession session_from_record(const ConceptRecord& record);

/// Draft record for one sense. Pools are validated and split with `seed`.
struct DraftResult {
    ConceptRecord record;
    std::vector<Violation> violations;
};
DraftResult draft_record_from_pools(const ProposalPools& pools, const std::string& target, Category category,
                                    bool ambiguous, std::uint64_t seed);

} // namespace crce
