// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cctype>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace grpolab {

inline bool is_word_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) != 0;
}

// Case-insensitive occurrence of `keyword` with word boundaries on both
// sides (the neighbouring characters, if any, are not alphanumeric).
// Keywords may themselves contain hyphens or spaces.
inline bool keyword_present(std::string_view text, std::string_view keyword) {
    if (keyword.empty() || text.size() < keyword.size()) return false;
    auto lower = [](char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); };
    for (size_t i = 0; i + keyword.size() <= text.size(); ++i) {
        bool hit = true;
        for (size_t j = 0; j < keyword.size(); ++j) {
            if (lower(text[i + j]) != lower(keyword[j])) { hit = false; break; }
        }
        if (!hit) continue;
        if (i > 0 && is_word_char(text[i - 1]) && is_word_char(keyword.front())) continue;
        const size_t end = i + keyword.size();
        if (end < text.size() && is_word_char(text[end]) && is_word_char(keyword.back())) continue;
        return true;
    }
    return false;
}

// All matching keywords, sorted and deduplicated.
inline std::vector<std::string> match_keywords(std::string_view text,
                                               std::span<const std::string> keywords) {
    std::vector<std::string> out;
    for (const auto& k : keywords) {
        if (keyword_present(text, k)) out.push_back(k);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

} // namespace grpolab
