// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace rmot {

class VocabularyError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Closed vocabulary of the expression templates.
inline constexpr std::array<std::string_view, 25> kVocabulary = {
    "cars",  "vehicles", "people", "pedestrians", "red",      "blue",      "light", "dark", "colored",
    "on",    "the",      "left",   "right",       "moving",   "in",        "same",  "opposite",
    "direction", "ahead", "of",    "us",          "which",    "are",       "who",   "walking",
};

inline std::vector<std::size_t> tokenize(std::string_view text) {
    std::vector<std::size_t> ids;
    std::istringstream is{std::string(text)};
    std::string word;
    while (is >> word) {
        bool found = false;
        for (std::size_t i = 0; i < kVocabulary.size(); ++i) {
            if (kVocabulary[i] == word) {
                ids.push_back(i);
                found = true;
                break;
            }
        }
        if (!found) throw VocabularyError("unknown token '" + word + "'");
    }
    return ids;
}

}  // namespace rmot
