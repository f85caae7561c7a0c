#include "crce/curation_service.hpp"

#include "crce/util.hpp"

#include <algorithm>
#include <regex>
#include <set>
#include <tuple>

namespace crce {

using nlohmann::json;
using nlohmann::ordered_json;

ordered_json to_json(const RecordSummary& s) {
    ordered_json j;
    j["id"] = s.id;
    j["target"] = s.target;
    j["category"] = category_name(s.category);
    if (s.disambiguation)
        j["disambiguation"] = *s.disambiguation;
    j["state"] = state_name(s.state);
    j["revision"] = s.revision;
    j["counts"] = {{"coref_train", s.coref_train},
                   {"coref_test", s.coref_test},
                   {"retain_train", s.retain_train},
                   {"retain_test", s.retain_test}};
    j["errors"] = s.errors;
    j["warnings"] = s.warnings;
    return j;
}

std::string_view to_string(EditOp op) noexcept {
    switch (op) {
    case EditOp::SetText: return "set_text";
    case EditOp::SetCertainty: return "set_certainty";
    case EditOp::DeleteEntry: return "delete_entry";
    case EditOp::AddEntry: return "add_entry";
    case EditOp::ApproveRecord: return "approve_record";
    }
    return "?";
}

EditOp parse_edit_op(std::string_view s) {
    for (auto op : {EditOp::SetText, EditOp::SetCertainty, EditOp::DeleteEntry, EditOp::AddEntry, EditOp::ApproveRecord})
        if (to_string(op) == s)
            return op;
    throw ValidationError("unknown edit operation '" + std::string(s) + "'");
}

ordered_json to_json(const EditCommand& c) {
    ordered_json j;
    j["record"] = c.record;
    j["path"] = c.path;
    j["operation"] = to_string(c.op);
    j["value"] = c.value;
    j["base_revision"] = c.base_revision;
    return j;
}

EditCommand edit_command_from_json(const json& j, const std::string& default_record) {
    if (!j.is_object())
        throw ParseError("edit command must be an object");
    EditCommand c;
    try {
        c.record = j.value("record", default_record);
        c.path = j.value("path", std::string{});
        c.op = parse_edit_op(j.at("operation").get<std::string>());
        c.value = j.value("value", json());
        c.base_revision = j.at("base_revision").get<std::int64_t>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("edit command: ") + e.what());
    }
    if (c.record.empty())
        throw ParseError("edit command names no record");
    return c;
}

std::string_view to_string(EntryChange::Kind k) noexcept {
    switch (k) {
    case EntryChange::Kind::Added: return "added";
    case EntryChange::Kind::Removed: return "removed";
    case EntryChange::Kind::Changed: return "changed";
    }
    return "?";
}

ordered_json to_json(const ProposalDiff& d) {
    ordered_json j;
    j["record"] = d.record;
    j["base_revision"] = d.base_revision;
    j["round"] = d.round;
    ordered_json changes = ordered_json::array();
    for (const auto& c : d.changes) {
        ordered_json cj;
        cj["kind"] = to_string(c.kind);
        cj["side"] = c.side;
        if (!c.path.empty())
            cj["path"] = c.path;
        cj["text"] = c.text;
        cj["before"] = c.before ? json(certainty_label(*c.before)) : json(nullptr);
        cj["after"] = c.after ? json(certainty_label(*c.after)) : json(nullptr);
        changes.push_back(std::move(cj));
    }
    j["changes"] = std::move(changes);
    auto pool = [](const std::vector<CandidateEntry>& p) {
        ordered_json a = ordered_json::array();
        for (const auto& e : p)
            a.push_back({{"text", e.text}, {"certainty", e.certainty_label}});
        return a;
    };
    j["proposal"] = {{"sense", d.proposal.sense}, {"corefs", pool(d.proposal.corefs)},
                     {"retains", pool(d.proposal.retains)}};
    ordered_json vs = ordered_json::array();
    for (const auto& v : d.violations)
        vs.emplace_back(to_json(v));
    j["violations"] = std::move(vs);
    return j;
}

namespace {

struct EntryPath {
    std::string side;
    std::string list;
    std::optional<std::size_t> index;
};

EntryPath parse_path(const std::string& path) {
    static const std::regex re(R"(^(corefs|retains)\.(train|test)(?:\[(\d{1,6})\])?$)");
    std::smatch m;
    if (!std::regex_match(path, m, re))
        throw CurationError("INVALID_PATH", "'" + path + "' is not of the form corefs|retains.train|test[i]");
    EntryPath p{m[1], m[2], std::nullopt};
    if (m[3].matched)
        p.index = std::stoul(m[3]);
    return p;
}

std::vector<ConceptEntry>& list_at(ConceptRecord& r, const EntryPath& p) {
    ConceptSplit& split = p.side == "corefs" ? r.corefs : r.retains;
    return p.list == "train" ? split.train : split.test;
}

std::string entry_text(const json& v) {
    if (!v.is_string() || trim(v.get<std::string>()).empty())
        throw CurationError("INVALID_VALUE", "entry text must be a non-empty string");
    return trim(v.get<std::string>());
}

Certainty entry_certainty(const json& v) {
    if (!v.is_string())
        throw CurationError("INVALID_VALUE", "certainty must be one of the five labels");
    auto c = try_parse_certainty(v.get<std::string>());
    if (!c)
        throw CurationError("INVALID_VALUE", "unknown certainty '" + v.get<std::string>() + "'");
    return *c;
}

/// Record validation plus per-list ordering warnings shown to the expert.
std::vector<Violation> curation_violations(const ConceptRecord& r) {
    auto out = validate_record(r);
    auto scan = [&](const std::vector<ConceptEntry>& list, const std::string& prefix) {
        int prev = -1;
        for (std::size_t i = 0; i < list.size(); ++i) {
            const int rank = certainty_rank(list[i].certainty);
            if (rank < prev)
                out.push_back({"NON_MONOTONE", prefix + "[" + std::to_string(i) + "]",
                               std::string(certainty_label(list[i].certainty)) + " follows a lower certainty",
                               Violation::Severity::Warning});
            prev = std::max(prev, rank);
        }
    };
    scan(r.corefs.train, "corefs.train");
    scan(r.corefs.test, "corefs.test");
    scan(r.retains.train, "retains.train");
    scan(r.retains.test, "retains.test");
    return out;
}

RecordSummary summarize(const ConceptRecord& r) {
    RecordSummary s;
    s.id = r.id();
    s.target = r.target;
    s.category = r.category;
    s.disambiguation = r.disambiguation;
    s.state = r.state;
    s.revision = r.revision;
    s.coref_train = r.corefs.train.size();
    s.coref_test = r.corefs.test.size();
    s.retain_train = r.retains.train.size();
    s.retain_test = r.retains.test.size();
    for (const auto& v : curation_violations(r))
        ++(v.is_error() ? s.errors : s.warnings);
    return s;
}

} // namespace

std::vector<EntryChange> diff_pools(const ConceptRecord& current, const ProposalPools& proposal) {
    std::vector<EntryChange> out;
    auto side = [&](const ConceptSplit& split, const std::vector<CandidateEntry>& proposed, const std::string& name) {
        struct Located {
            const ConceptEntry* entry;
            std::string path;
        };
        std::vector<Located> cur;
        for (std::size_t i = 0; i < split.train.size(); ++i)
            cur.push_back({&split.train[i], name + ".train[" + std::to_string(i) + "]"});
        for (std::size_t i = 0; i < split.test.size(); ++i)
            cur.push_back({&split.test[i], name + ".test[" + std::to_string(i) + "]"});

        std::map<std::string, const CandidateEntry*> prop;
        for (const auto& e : proposed)
            prop.emplace(normalize_prompt(e.text), &e);
        std::set<std::string> cur_keys;
        for (const auto& c : cur) {
            const auto key = normalize_prompt(c.entry->text);
            cur_keys.insert(key);
            auto it = prop.find(key);
            if (it == prop.end())
                out.push_back({EntryChange::Kind::Removed, name, c.path, c.entry->text, c.entry->certainty, {}});
            else if (it->second->certainty && *it->second->certainty != c.entry->certainty)
                out.push_back({EntryChange::Kind::Changed, name, c.path, c.entry->text, c.entry->certainty,
                               it->second->certainty});
        }
        for (const auto& e : proposed)
            if (!cur_keys.contains(normalize_prompt(e.text)) && e.certainty && !trim(e.text).empty())
                out.push_back({EntryChange::Kind::Added, name, "", trim(e.text), {}, e.certainty});
    };
    side(current.corefs, proposal.corefs, "corefs");
    side(current.retains, proposal.retains, "retains");
    return out;
}

std::vector<EditCommand> diff_to_edit_commands(const ProposalDiff& diff, const std::vector<std::size_t>& accepted) {
    std::vector<const EntryChange*> changed, removed, added;
    for (auto i : accepted) {
        if (i >= diff.changes.size())
            throw ValidationError("accepted change index " + std::to_string(i) + " out of range");
        const auto& c = diff.changes[i];
        (c.kind == EntryChange::Kind::Changed ? changed : c.kind == EntryChange::Kind::Removed ? removed : added)
            .push_back(&c);
    }
    // Deleting from the back keeps earlier indices valid.
    std::sort(removed.begin(), removed.end(), [](const EntryChange* a, const EntryChange* b) {
        auto pa = parse_path(a->path), pb = parse_path(b->path);
        return std::tie(pa.side, pa.list, *pb.index) < std::tie(pb.side, pb.list, *pa.index);
    });
    removed.erase(std::unique(removed.begin(), removed.end(),
                              [](const EntryChange* a, const EntryChange* b) { return a->path == b->path; }),
                  removed.end());

    std::vector<EditCommand> out;
    std::int64_t rev = diff.base_revision;
    auto emit = [&](std::string path, EditOp op, json value) {
        out.push_back({diff.record, std::move(path), op, std::move(value), rev++});
    };
    for (const auto* c : changed)
        emit(c->path, EditOp::SetCertainty, std::string(certainty_label(*c->after)));

    // Track list sizes only to decide where additions go; sizes come from paths seen in the diff.
    std::map<std::string, std::int64_t> removed_count;
    for (const auto* c : removed) {
        emit(c->path, EditOp::DeleteEntry, nullptr);
        auto p = parse_path(c->path);
        ++removed_count[p.side + "." + p.list];
    }
    // Additions refill held-out slots vacated by removals, everything else goes to train.
    for (const auto* c : added) {
        std::string list = c->side + ".train";
        if (auto it = removed_count.find(c->side + ".test"); it != removed_count.end() && it->second > 0) {
            list = c->side + ".test";
            --it->second;
        }
        emit(list, EditOp::AddEntry, {{"text", c->text}, {"certainty", certainty_label(*c->after)}});
    }
    return out;
}

CurationService::CurationService(std::filesystem::path dataset_path, ChatClient* llm)
    : dataset_(load_dataset(dataset_path)), path_(std::move(dataset_path)), llm_(llm) {}

CurationService::CurationService(CorefConceptDataset dataset, std::optional<std::filesystem::path> persist_to,
                                 ChatClient* llm)
    : dataset_(std::move(dataset)), path_(std::move(persist_to)), llm_(llm) {}

std::vector<RecordSummary> CurationService::list_records(const RecordFilter& filter) const {
    std::shared_lock lock(mutex_);
    std::vector<RecordSummary> out;
    for (const auto& r : dataset_.concepts) {
        if (filter.state && r.state != *filter.state)
            continue;
        if (filter.category && r.category != *filter.category)
            continue;
        out.push_back(summarize(r));
    }
    return out;
}

ConceptRecord CurationService::get_record(const std::string& id) const {
    std::shared_lock lock(mutex_);
    const auto* r = dataset_.find(id);
    if (!r)
        throw CurationError("NOT_FOUND", "no record '" + id + "'");
    return *r;
}

CorefConceptDataset CurationService::snapshot() const {
    std::shared_lock lock(mutex_);
    return dataset_;
}

ConceptRecord& CurationService::find_locked(const std::string& id) {
    auto* r = dataset_.find(id);
    if (!r)
        throw CurationError("NOT_FOUND", "no record '" + id + "'");
    return *r;
}

void CurationService::persist_locked() const {
    if (path_)
        save_dataset(dataset_, *path_);
}

EditResult CurationService::apply_edit(const EditCommand& cmd) {
    std::unique_lock lock(mutex_);
    ConceptRecord& live = find_locked(cmd.record);
    if (cmd.base_revision != live.revision)
        throw CurationError("REVISION_CONFLICT",
                            "record '" + cmd.record + "' is at revision " + std::to_string(live.revision) +
                                ", edit was based on " + std::to_string(cmd.base_revision),
                            {}, live.revision);

    ConceptRecord next = live;
    if (cmd.op == EditOp::ApproveRecord) {
        next.state = RecordState::Approved;
        auto violations = curation_violations(next);
        if (has_errors(violations))
            throw CurationError("APPROVAL_BLOCKED", "record '" + cmd.record + "' has validation errors",
                                std::move(violations), live.revision);
    } else {
        const auto p = parse_path(cmd.path);
        auto& list = list_at(next, p);
        if (cmd.op == EditOp::AddEntry) {
            const auto& v = cmd.value;
            if (!v.is_object() || !v.contains("text") || !v.contains("certainty"))
                throw CurationError("INVALID_VALUE", "add_entry needs {\"text\", \"certainty\"}");
            const std::size_t at = p.index.value_or(list.size());
            if (at > list.size())
                throw CurationError("INVALID_PATH", "insertion index beyond end of " + p.side + "." + p.list);
            list.insert(list.begin() + static_cast<std::ptrdiff_t>(at),
                        ConceptEntry{entry_text(v["text"]), entry_certainty(v["certainty"])});
        } else {
            if (!p.index || *p.index >= list.size())
                throw CurationError("INVALID_PATH", "'" + cmd.path + "' does not name an existing entry");
            auto& entry = list[*p.index];
            switch (cmd.op) {
            case EditOp::SetText: entry.text = entry_text(cmd.value); break;
            case EditOp::SetCertainty: entry.certainty = entry_certainty(cmd.value); break;
            case EditOp::DeleteEntry: list.erase(list.begin() + static_cast<std::ptrdiff_t>(*p.index)); break;
            default: break;
            }
        }
        // Content changes reopen review; approval has to be granted again.
        next.state = RecordState::Draft;
    }
    ++next.revision;

    const ConceptRecord previous = live;
    live = next;
    try {
        persist_locked();
    } catch (...) {
        live = previous;
        throw;
    }
    return {next, curation_violations(next)};
}

ProposalDiff CurationService::request_regeneration(const std::string& id, const std::string& expert_feedback) {
    if (!llm_)
        throw ConfigError("no LLM client configured for regeneration");
    const ConceptRecord record = get_record(id);

    GenerationSession session;
    {
        std::lock_guard lock(session_mutex_);
        auto it = sessions_.find(id);
        session = it != sessions_.end() ? it->second : session_from_record(record);
    }
    // The LLM call holds no dataset lock; edits proceed meanwhile.
    GenerationSession next = refine(session, expert_feedback, *llm_);
    {
        std::lock_guard lock(session_mutex_);
        sessions_[id] = next;
    }

    const auto& senses = next.latest();
    if (senses.empty())
        throw ParseError("regeneration produced no proposal");
    const ProposalPools* chosen = &senses.front();
    for (const auto& s : senses)
        if (record.disambiguation && normalize_prompt(s.sense) == normalize_prompt(*record.disambiguation))
            chosen = &s;

    ProposalDiff d;
    d.record = id;
    d.base_revision = record.revision;
    d.round = next.round;
    d.proposal = *chosen;
    d.changes = diff_pools(record, *chosen);
    d.violations = chosen->violations;
    auto pv = validate_pools(chosen->corefs, chosen->retains, record.target);
    d.violations.insert(d.violations.end(), pv.begin(), pv.end());
    return d;
}

} // namespace crce
