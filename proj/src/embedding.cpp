#include "crce/embedding.hpp"

#include "crce/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>

namespace crce {

using nlohmann::json;

EmbeddingVector SerializedEncoder::encode_pooled(const std::string& text) {
    std::lock_guard lock(mutex_);
    return inner_->encode_pooled(text);
}

Conditioning SerializedEncoder::encode_sequence(const std::string& text) {
    std::lock_guard lock(mutex_);
    return inner_->encode_sequence(text);
}

CachedEncoder::CachedEncoder(std::shared_ptr<TextEncoder> inner, std::filesystem::path cache_file)
    : inner_(std::move(inner)), file_(std::move(cache_file)) {
    if (!std::filesystem::exists(file_))
        return;
    auto j = json::parse(read_file(file_));
    auto it = j.find(inner_->id());
    if (it == j.end())
        return;
    for (auto& [text, values] : it->items()) {
        auto v = values.get<std::vector<double>>();
        cache_[text] = Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
    }
}

CachedEncoder::~CachedEncoder() {
    try {
        flush();
    } catch (...) {
    }
}

EmbeddingVector CachedEncoder::encode_pooled(const std::string& text) {
    std::lock_guard lock(mutex_);
    if (auto it = cache_.find(text); it != cache_.end()) {
        ++hits_;
        return {it->second, true};
    }
    auto e = inner_->encode_pooled(text);
    cache_[text] = e.values;
    dirty_ = true;
    return e;
}

void CachedEncoder::flush() {
    std::lock_guard lock(mutex_);
    if (!dirty_)
        return;
    json j = json::object();
    if (std::filesystem::exists(file_))
        j = json::parse(read_file(file_));
    json& section = j[inner_->id()];
    for (const auto& [text, v] : cache_)
        section[text] = std::vector<double>(v.data(), v.data() + v.size());
    atomic_write(file_, j.dump());
    dirty_ = false;
}

const DistanceRow* DistanceReport::find(const std::string& text) const {
    for (const auto& r : rows)
        if (r.text == text)
            return &r;
    return nullptr;
}

namespace {

struct Item {
    std::string text;
    ConceptGroup group;
    std::optional<Certainty> certainty;
};

DistanceReport build_report(const std::string& target, const std::vector<Item>& items, TextEncoder& encoder) {
    DistanceReport report;
    report.target = target;
    report.encoder_id = encoder.id();
    if (items.empty())
        return report;
    const auto anchor = encoder.encode_pooled(target);
    for (const auto& item : items) {
        auto e = encoder.encode_pooled(item.text);
        DistanceRow row;
        row.text = item.text;
        row.group = item.group;
        row.certainty = item.certainty;
        row.cosine = cosine_similarity(anchor, e);
        row.euclidean = euclidean_distance(anchor, e);
        if (anchor.normalized && e.normalized)
            row.identity_ok = std::abs(row.euclidean - chord_length(row.cosine)) < kNormIdentityTolerance;
        report.rows.push_back(std::move(row));
    }
    std::stable_sort(report.rows.begin(), report.rows.end(), [](const DistanceRow& a, const DistanceRow& b) {
        if (a.group != b.group)
            return a.group == ConceptGroup::Coref;
        return a.cosine > b.cosine;
    });
    return report;
}

} // namespace

DistanceReport distance_report(const std::string& target, const ConceptRecord& record, TextEncoder& encoder) {
    std::vector<Item> items;
    for (const auto& e : record.corefs.all())
        items.push_back({e.text, ConceptGroup::Coref, e.certainty});
    for (const auto& e : record.retains.all())
        items.push_back({e.text, ConceptGroup::Retain, e.certainty});
    return build_report(target, items, encoder);
}

DistanceReport distance_report(const std::string& target, const std::vector<std::string>& corefs,
                               const std::vector<std::string>& retains, TextEncoder& encoder) {
    std::vector<Item> items;
    for (const auto& t : corefs)
        items.push_back({t, ConceptGroup::Coref, std::nullopt});
    for (const auto& t : retains)
        items.push_back({t, ConceptGroup::Retain, std::nullopt});
    return build_report(target, items, encoder);
}

std::string distance_report_csv(const DistanceReport& report) {
    auto quote = [](const std::string& s) {
        if (s.find_first_of(",\"\n") == std::string::npos)
            return s;
        std::string out = "\"";
        for (char c : s) {
            if (c == '"')
                out += '"';
            out += c;
        }
        return out + "\"";
    };
    std::string out = "group,text,certainty,cosine,euclidean,identity_ok\n";
    char buf[64];
    for (const auto& r : report.rows) {
        out += r.group == ConceptGroup::Coref ? "coref," : "retain,";
        out += quote(r.text) + ",";
        if (r.certainty)
            out += std::string(certainty_label(*r.certainty));
        std::snprintf(buf, sizeof buf, ",%.4f,%.4f,", r.cosine, r.euclidean);
        out += buf;
        out += r.identity_ok ? "true\n" : "false\n";
    }
    return out;
}

} // namespace crce
