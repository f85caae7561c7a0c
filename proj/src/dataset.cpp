#include "crce/dataset.hpp"

#include "crce/error.hpp"
#include "crce/util.hpp"

#include <map>
#include <set>

namespace crce {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view category_name(Category c) noexcept {
    switch (c) {
    case Category::Object: return "object";
    case Category::IP: return "ip";
    case Category::Celebrity: return "celebrity";
    }
    return "";
}

Category parse_category(std::string_view s) {
    auto key = to_lower(trim(s));
    if (key == "object") return Category::Object;
    if (key == "ip" || key == "intellectual property") return Category::IP;
    if (key == "celebrity") return Category::Celebrity;
    throw ValidationError("unknown category '" + std::string(s) + "'");
}

std::string_view state_name(RecordState s) noexcept {
    return s == RecordState::Approved ? "approved" : "draft";
}

RecordState parse_state(std::string_view s) {
    auto key = to_lower(trim(s));
    if (key == "draft") return RecordState::Draft;
    if (key == "approved") return RecordState::Approved;
    throw ValidationError("unknown record state '" + std::string(s) + "'");
}

std::vector<ConceptEntry> ConceptSplit::all() const {
    std::vector<ConceptEntry> out = train;
    out.insert(out.end(), test.begin(), test.end());
    return out;
}

std::string ConceptRecord::id() const {
    auto slug = [](std::string_view s) {
        std::string out;
        for (char ch : normalize_prompt(s))
            out.push_back(ch == ' ' ? '-' : ch);
        return out;
    };
    std::string out = slug(target);
    if (disambiguation && !disambiguation->empty())
        out += "-" + slug(*disambiguation);
    return out;
}

const ConceptRecord* CorefConceptDataset::find(std::string_view key) const {
    for (const auto& r : concepts)
        if (r.id() == key)
            return &r;
    for (const auto& r : concepts)
        if (r.target == key)
            return &r;
    return nullptr;
}

ConceptRecord* CorefConceptDataset::find(std::string_view key) {
    return const_cast<ConceptRecord*>(std::as_const(*this).find(key));
}

json to_json(const Violation& v) {
    return json{{"code", v.code},
                {"path", v.path},
                {"message", v.message},
                {"severity", v.is_error() ? "error" : "warning"}};
}

bool has_errors(const std::vector<Violation>& violations) {
    for (const auto& v : violations)
        if (v.is_error())
            return true;
    return false;
}

std::vector<Violation> validate_record(const ConceptRecord& record) {
    std::vector<Violation> out;
    auto add = [&](std::string code, std::string path, std::string msg) {
        out.push_back({std::move(code), std::move(path), std::move(msg), Violation::Severity::Error});
    };

    if (trim(record.target).empty())
        add("EMPTY_TARGET", "target", "target concept is empty");
    if (record.revision < 0)
        add("BAD_REVISION", "revision", "revision must be non-negative");

    struct Side {
        const char* name;
        const ConceptSplit* split;
    };
    const Side sides[] = {{"corefs", &record.corefs}, {"retains", &record.retains}};

    for (const auto& side : sides) {
        if (record.state == RecordState::Approved) {
            if (side.split->train.size() != kTrainSize)
                add("LIST_LENGTH", std::string(side.name) + ".train",
                    "expected " + std::to_string(kTrainSize) + " entries, found " +
                        std::to_string(side.split->train.size()));
            if (side.split->test.size() != kTestSize)
                add("LIST_LENGTH", std::string(side.name) + ".test",
                    "expected " + std::to_string(kTestSize) + " entries, found " +
                        std::to_string(side.split->test.size()));
        }

        std::map<std::string, std::string> seen;
        auto scan = [&](const std::vector<ConceptEntry>& list, const std::string& prefix) {
            for (std::size_t i = 0; i < list.size(); ++i) {
                auto path = prefix + "[" + std::to_string(i) + "]";
                auto key = normalize_prompt(list[i].text);
                if (key.empty()) {
                    add("EMPTY_TEXT", path, "entry text is empty");
                    continue;
                }
                auto [it, inserted] = seen.emplace(key, path);
                if (!inserted)
                    add("DUPLICATE", path, "'" + list[i].text + "' duplicates " + it->second);
            }
        };
        scan(side.split->train, std::string(side.name) + ".train");
        scan(side.split->test, std::string(side.name) + ".test");
    }

    std::map<std::string, std::string> coref_keys;
    auto index_side = [](const ConceptSplit& split, const std::string& name) {
        std::vector<std::pair<std::string, std::string>> keys;
        for (std::size_t i = 0; i < split.train.size(); ++i)
            keys.emplace_back(normalize_prompt(split.train[i].text), name + ".train[" + std::to_string(i) + "]");
        for (std::size_t i = 0; i < split.test.size(); ++i)
            keys.emplace_back(normalize_prompt(split.test[i].text), name + ".test[" + std::to_string(i) + "]");
        return keys;
    };
    for (auto& [k, p] : index_side(record.corefs, "corefs"))
        if (!k.empty())
            coref_keys.emplace(k, p);

    const auto target_key = normalize_prompt(record.target);
    for (auto& [k, p] : index_side(record.retains, "retains")) {
        if (k.empty())
            continue;
        if (auto it = coref_keys.find(k); it != coref_keys.end())
            add("SET_OVERLAP", p, "retain also listed as coref at " + it->second);
        if (k == target_key)
            add("TARGET_IN_RETAIN", p, "retain entry equals the target concept");
    }
    return out;
}

std::vector<Violation> validate_dataset(const CorefConceptDataset& dataset) {
    std::vector<Violation> out;
    if (dataset.version != kDatasetVersion)
        out.push_back({"SCHEMA_VERSION", "version", "unsupported version " + dataset.version,
                       Violation::Severity::Error});
    std::set<std::pair<std::string, std::string>> keys;
    for (std::size_t i = 0; i < dataset.concepts.size(); ++i) {
        const auto& r = dataset.concepts[i];
        auto prefix = "concepts[" + std::to_string(i) + "]";
        if (!keys.emplace(normalize_prompt(r.target), normalize_prompt(r.disambiguation.value_or(""))).second)
            out.push_back({"DUPLICATE_TARGET", prefix, "target '" + r.target + "' repeats",
                           Violation::Severity::Error});
        for (auto v : validate_record(r)) {
            v.path = prefix + "." + v.path;
            out.push_back(std::move(v));
        }
    }
    return out;
}

// ---------------------------------------------------------------- JSON

namespace {

ordered_json entries_to_json(const std::vector<ConceptEntry>& list) {
    ordered_json arr = ordered_json::array();
    for (const auto& e : list)
        arr.push_back(ordered_json{{"text", e.text}, {"certainty", certainty_label(e.certainty)}});
    return arr;
}

const json& require(const json& j, const char* key, const std::string& where) {
    if (!j.is_object())
        throw ParseError("expected an object", where);
    auto it = j.find(key);
    if (it == j.end())
        throw ParseError(std::string("missing required field '") + key + "'", where);
    return *it;
}

std::string require_string(const json& j, const char* key, const std::string& where) {
    const auto& v = require(j, key, where);
    if (!v.is_string())
        throw ParseError(std::string("field '") + key + "' must be a string", where);
    return v.get<std::string>();
}

std::vector<ConceptEntry> entries_from_json(const json& j, const std::string& where) {
    if (!j.is_array())
        throw ParseError("expected an array of entries", where);
    std::vector<ConceptEntry> out;
    for (std::size_t i = 0; i < j.size(); ++i) {
        auto path = where + "[" + std::to_string(i) + "]";
        ConceptEntry e;
        e.text = require_string(j[i], "text", path);
        auto label = require_string(j[i], "certainty", path);
        auto c = try_parse_certainty(label);
        if (!c)
            throw ParseError("unknown certainty label '" + label + "'", path);
        e.certainty = *c;
        out.push_back(std::move(e));
    }
    return out;
}

ConceptSplit split_from_json(const json& j, const std::string& where) {
    ConceptSplit s;
    s.train = entries_from_json(require(j, "train", where), where + ".train");
    s.test = entries_from_json(require(j, "test", where), where + ".test");
    return s;
}

} // namespace

ordered_json record_to_json(const ConceptRecord& r) {
    ordered_json j;
    j["target"] = r.target;
    j["category"] = category_name(r.category);
    if (r.disambiguation)
        j["disambiguation"] = *r.disambiguation;
    j["state"] = state_name(r.state);
    j["revision"] = r.revision;
    j["corefs"] = ordered_json{{"train", entries_to_json(r.corefs.train)}, {"test", entries_to_json(r.corefs.test)}};
    j["retains"] =
        ordered_json{{"train", entries_to_json(r.retains.train)}, {"test", entries_to_json(r.retains.test)}};
    return j;
}

ConceptRecord record_from_json(const json& j, const std::string& where) {
    ConceptRecord r;
    r.target = require_string(j, "target", where);
    try {
        r.category = parse_category(require_string(j, "category", where));
    } catch (const ValidationError& e) {
        throw ParseError(e.what(), where + ".category");
    }
    if (auto it = j.find("disambiguation"); it != j.end() && !it->is_null()) {
        if (!it->is_string())
            throw ParseError("field 'disambiguation' must be a string", where);
        r.disambiguation = it->get<std::string>();
    }
    if (auto it = j.find("state"); it != j.end()) {
        try {
            r.state = parse_state(it->get<std::string>());
        } catch (const std::exception& e) {
            throw ParseError(e.what(), where + ".state");
        }
    }
    if (auto it = j.find("revision"); it != j.end()) {
        if (!it->is_number_integer())
            throw ParseError("field 'revision' must be an integer", where);
        r.revision = it->get<std::int64_t>();
    }
    r.corefs = split_from_json(require(j, "corefs", where), where + ".corefs");
    r.retains = split_from_json(require(j, "retains", where), where + ".retains");
    return r;
}

ordered_json dataset_to_json(const CorefConceptDataset& d) {
    ordered_json j;
    j["version"] = d.version;
    j["concepts"] = ordered_json::array();
    for (const auto& r : d.concepts)
        j["concepts"].push_back(record_to_json(r));
    return j;
}

CorefConceptDataset dataset_from_json(const json& j) {
    CorefConceptDataset d;
    d.version = require_string(j, "version", "$");
    if (d.version != kDatasetVersion)
        throw ParseError("schema version mismatch: expected " + std::string(kDatasetVersion) + ", found " +
                             d.version,
                         "$.version");
    const auto& concepts = require(j, "concepts", "$");
    if (!concepts.is_array())
        throw ParseError("expected an array", "$.concepts");
    for (std::size_t i = 0; i < concepts.size(); ++i)
        d.concepts.push_back(record_from_json(concepts[i], "concepts[" + std::to_string(i) + "]"));
    return d;
}

std::string dump_dataset(const CorefConceptDataset& d) { return dataset_to_json(d).dump(2) + "\n"; }

CorefConceptDataset parse_dataset(std::string_view text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        std::size_t line = 1;
        for (std::size_t i = 0; i < e.byte && i < text.size(); ++i)
            if (text[i] == '\n')
                ++line;
        throw ParseError(e.what(), "line " + std::to_string(line));
    }
    return dataset_from_json(j);
}

CorefConceptDataset load_dataset(const std::filesystem::path& path) {
    auto text = read_file(path);
    try {
        return parse_dataset(text);
    } catch (const ParseError& e) {
        throw ParseError(e.what(), path.string());
    }
}

void save_dataset(const CorefConceptDataset& dataset, const std::filesystem::path& path) {
    atomic_write(path, dump_dataset(dataset));
}

std::string dataset_digest(const CorefConceptDataset& dataset) { return sha256_hex(dump_dataset(dataset)); }

} // namespace crce
