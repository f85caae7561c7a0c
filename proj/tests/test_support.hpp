#pragma once

#include "crce/coref_generator.hpp"
#include "crce/dataset.hpp"

#include <unistd.h>

#include <filesystem>
#include <string>

namespace crce::testing {

/// 15 corefs and 15 retains with certainties descending in blocks of three.
inline ProposalPools make_pools(const std::string& stem, const std::string& sense = {}) {
    ProposalPools p;
    p.sense = sense;
    for (int i = 0; i < 15; ++i) {
        const auto c = static_cast<Certainty>(i / 3);
        p.corefs.push_back({stem + " coref " + std::to_string(i), std::string(certainty_label(c)), c});
        p.retains.push_back({stem + " retain " + std::to_string(i), std::string(certainty_label(c)), c});
    }
    return p;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("crce_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace crce::testing
