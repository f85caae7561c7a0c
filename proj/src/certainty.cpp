#include "crce/certainty.hpp"

#include "crce/error.hpp"

#include <cctype>

namespace crce {

double certainty_to_weight(Certainty c) noexcept {
    switch (c) {
    case Certainty::VeryHigh: return 1.0;
    case Certainty::High: return 0.8;
    case Certainty::Normal: return 0.6;
    case Certainty::Low: return 0.4;
    case Certainty::VeryLow: return 0.2;
    }
    return 0.0;
}

double certainty_to_weight(std::string_view label) { return certainty_to_weight(parse_certainty(label)); }

std::string_view certainty_label(Certainty c) noexcept {
    switch (c) {
    case Certainty::VeryHigh: return "Very High";
    case Certainty::High: return "High";
    case Certainty::Normal: return "Normal";
    case Certainty::Low: return "Low";
    case Certainty::VeryLow: return "Very Low";
    }
    return "";
}

std::optional<Certainty> try_parse_certainty(std::string_view label) {
    std::string key;
    for (char ch : label) {
        auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c) || c == '_' || c == '-')
            continue;
        key.push_back(static_cast<char>(std::tolower(c)));
    }
    if (key == "veryhigh") return Certainty::VeryHigh;
    if (key == "high") return Certainty::High;
    if (key == "normal") return Certainty::Normal;
    if (key == "low") return Certainty::Low;
    if (key == "verylow") return Certainty::VeryLow;
    return std::nullopt;
}

Certainty parse_certainty(std::string_view label) {
    if (auto c = try_parse_certainty(label))
        return *c;
    throw ValidationError("unknown certainty label '" + std::string(label) + "'");
}

} // namespace crce
