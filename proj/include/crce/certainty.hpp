#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace crce {

/// Five ordinal certainty levels attached to every coref/retain entry.
enum class Certainty { VeryHigh, High, Normal, Low, VeryLow };

inline constexpr std::array<Certainty, 5> kAllCertainties = {
    Certainty::VeryHigh, Certainty::High, Certainty::Normal, Certainty::Low, Certainty::VeryLow};

/// Loss weight for a level: 1.0, 0.8, 0.6, 0.4, 0.2 from Very High down to Very Low.
double certainty_to_weight(Certainty c) noexcept;

/// Parses a label and returns its weight. Throws ValidationError naming the label.
double certainty_to_weight(std::string_view label);

/// Canonical label, capitalised exactly as written to dataset files.
std::string_view certainty_label(Certainty c) noexcept;

/// Tolerant parse: case, surrounding space, and `_`/`-` separators are ignored.
std::optional<Certainty> try_parse_certainty(std::string_view label);

/// Throws ValidationError naming the offending string.
Certainty parse_certainty(std::string_view label);

/// Position in the ordering, 0 for Very High.
inline int certainty_rank(Certainty c) noexcept { return static_cast<int>(c); }

} // namespace crce
