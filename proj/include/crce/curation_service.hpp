#pragma once

#include "crce/chat_client.hpp"
#include "crce/coref_generator.hpp"
#include "crce/dataset.hpp"
#include "crce/error.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

namespace crce {

struct RecordSummary {
    std::string id;
    std::string target;
    Category category = Category::Object;
    std::optional<std::string> disambiguation;
    RecordState state = RecordState::Draft;
    std::int64_t revision = 0;
    std::size_t coref_train = 0, coref_test = 0, retain_train = 0, retain_test = 0;
    std::size_t errors = 0, warnings = 0;
};

nlohmann::ordered_json to_json(const RecordSummary& s);

struct RecordFilter {
    std::optional<RecordState> state;
    std::optional<Category> category;
};

enum class EditOp { SetText, SetCertainty, DeleteEntry, AddEntry, ApproveRecord };

std::string_view to_string(EditOp op) noexcept;
EditOp parse_edit_op(std::string_view s);

/// `path` addresses an entry ("corefs.train[3]") or, for add_entry, a list
/// ("retains.test") or an insertion index within it. approve_record ignores it.
struct EditCommand {
    std::string record;
    std::string path;
    EditOp op = EditOp::SetText;
    nlohmann::json value;
    std::int64_t base_revision = 0;

    bool operator==(const EditCommand&) const = default;
};

nlohmann::ordered_json to_json(const EditCommand& c);
/// `record` may be omitted from the payload when `default_record` supplies it.
EditCommand edit_command_from_json(const nlohmann::json& j, const std::string& default_record = {});

/// Rejected curation request. `code` is REVISION_CONFLICT, INVALID_PATH,
/// INVALID_VALUE, NOT_FOUND or APPROVAL_BLOCKED.
class CurationError : public Error {
public:
    CurationError(std::string code, const std::string& what, std::vector<Violation> violations = {},
                  std::int64_t current_revision = -1)
        : Error(what), code_(std::move(code)), violations_(std::move(violations)), revision_(current_revision) {}

    const std::string& code() const noexcept { return code_; }
    const std::vector<Violation>& violations() const noexcept { return violations_; }
    std::int64_t current_revision() const noexcept { return revision_; }

private:
    std::string code_;
    std::vector<Violation> violations_;
    std::int64_t revision_;
};

struct EditResult {
    ConceptRecord record;
    std::vector<Violation> violations;
};

struct EntryChange {
    enum class Kind { Added, Removed, Changed };

    Kind kind = Kind::Added;
    std::string side;
    /// Current location for removed and changed entries; empty for additions.
    std::string path;
    std::string text;
    std::optional<Certainty> before;
    std::optional<Certainty> after;
};

std::string_view to_string(EntryChange::Kind k) noexcept;

struct ProposalDiff {
    std::string record;
    std::int64_t base_revision = 0;
    int round = 0;
    std::vector<EntryChange> changes;
    ProposalPools proposal;
    /// Parse or pool problems in the proposal itself.
    std::vector<Violation> violations;
};

nlohmann::ordered_json to_json(const ProposalDiff& d);

/// Pool-level comparison by normalised text. Pure; used by request_regeneration.
std::vector<EntryChange> diff_pools(const ConceptRecord& current, const ProposalPools& proposal);

/// Edit commands that apply the selected changes, in an order where every
/// command's path and base_revision are valid once the preceding ones applied.
std::vector<EditCommand> diff_to_edit_commands(const ProposalDiff& diff, const std::vector<std::size_t>& accepted);

/// Dataset holder for expert curation. Readers run concurrently; mutations are
/// serialised and each accepted edit is persisted before the call returns.
class CurationService {
public:
    /// Loads `dataset_path` and writes back to it after every edit.
    explicit CurationService(std::filesystem::path dataset_path, ChatClient* llm = nullptr);
    /// In-memory service, persisted only when `persist_to` is given.
    explicit CurationService(CorefConceptDataset dataset, std::optional<std::filesystem::path> persist_to = {},
                             ChatClient* llm = nullptr);

    std::vector<RecordSummary> list_records(const RecordFilter& filter = {}) const;
    ConceptRecord get_record(const std::string& id) const;
    CorefConceptDataset snapshot() const;

    EditResult apply_edit(const EditCommand& cmd);

    /// Sends expert feedback for one more LLM round and diffs the proposal against
    /// the record's current pools. Nothing is applied.
    ProposalDiff request_regeneration(const std::string& id, const std::string& expert_feedback);

    void set_llm(ChatClient* llm) { llm_ = llm; }

private:
    ConceptRecord& find_locked(const std::string& id);
    void persist_locked() const;

    mutable std::shared_mutex mutex_;
    CorefConceptDataset dataset_;
    std::optional<std::filesystem::path> path_;
    ChatClient* llm_ = nullptr;

    std::mutex session_mutex_;
    std::map<std::string, GenerationSession> sessions_;
};

} // namespace crce
