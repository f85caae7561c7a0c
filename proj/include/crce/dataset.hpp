#pragma once

#include "crce/certainty.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace crce {

enum class Category { Object, IP, Celebrity };
enum class RecordState { Draft, Approved };

std::string_view category_name(Category c) noexcept;
Category parse_category(std::string_view s);
std::string_view state_name(RecordState s) noexcept;
RecordState parse_state(std::string_view s);

struct ConceptEntry {
    std::string text;
    Certainty certainty = Certainty::Normal;

    double weight() const noexcept { return certainty_to_weight(certainty); }
    bool operator==(const ConceptEntry&) const = default;
};

/// Ten training and five held-out entries for one side (corefs or retains).
struct ConceptSplit {
    std::vector<ConceptEntry> train;
    std::vector<ConceptEntry> test;

    std::vector<ConceptEntry> all() const;
    bool operator==(const ConceptSplit&) const = default;
};

inline constexpr std::size_t kTrainSize = 10;
inline constexpr std::size_t kTestSize = 5;
inline constexpr std::size_t kPoolSize = kTrainSize + kTestSize;

struct ConceptRecord {
    std::string target;
    Category category = Category::Object;
    std::optional<std::string> disambiguation;
    RecordState state = RecordState::Draft;
    std::int64_t revision = 0;
    ConceptSplit corefs;
    ConceptSplit retains;

    /// Stable slug used as the record id by the curation API, e.g. "bat-animal".
    std::string id() const;
    bool operator==(const ConceptRecord&) const = default;
};

struct CorefConceptDataset {
    std::string version = "1.0";
    std::vector<ConceptRecord> concepts;

    const ConceptRecord* find(std::string_view id_or_target) const;
    ConceptRecord* find(std::string_view id_or_target);
    bool operator==(const CorefConceptDataset&) const = default;
};

inline constexpr std::string_view kDatasetVersion = "1.0";

/// One rule failure. `code` is machine-readable (LIST_LENGTH, SET_OVERLAP, ...),
/// `path` points into the record (e.g. "corefs.train[3]").
struct Violation {
    enum class Severity { Error, Warning };

    std::string code;
    std::string path;
    std::string message;
    Severity severity = Severity::Error;

    bool is_error() const noexcept { return severity == Severity::Error; }
};

nlohmann::json to_json(const Violation& v);

std::vector<Violation> validate_record(const ConceptRecord& record);
std::vector<Violation> validate_dataset(const CorefConceptDataset& dataset);
bool has_errors(const std::vector<Violation>& violations);

nlohmann::ordered_json record_to_json(const ConceptRecord& record);
/// `where` prefixes field paths in error messages.
ConceptRecord record_from_json(const nlohmann::json& j, const std::string& where = "record");

nlohmann::ordered_json dataset_to_json(const CorefConceptDataset& dataset);
CorefConceptDataset dataset_from_json(const nlohmann::json& j);

/// Serialised form exactly as save_dataset writes it.
std::string dump_dataset(const CorefConceptDataset& dataset);
CorefConceptDataset parse_dataset(std::string_view text);

CorefConceptDataset load_dataset(const std::filesystem::path& path);
void save_dataset(const CorefConceptDataset& dataset, const std::filesystem::path& path);

/// SHA-256 of the canonical serialisation.
std::string dataset_digest(const CorefConceptDataset& dataset);

} // namespace crce
