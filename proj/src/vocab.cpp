// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#include "grpolab/vocab.hpp"

#include <algorithm>

#include "grpolab/errors.hpp"
#include "grpolab/rng.hpp"

namespace grpolab {

namespace {
constexpr std::string_view kBoxOpen = "\\boxed{";
}

Vocab::Vocab() {
    std::fill(std::begin(char_ids_), std::end(char_ids_), -1);
}

Vocab Vocab::text_ascii() {
    Vocab v;
    auto add = [&v](std::string tok) {
        v.tokens_.push_back(std::move(tok));
        return static_cast<int>(v.tokens_.size()) - 1;
    };
    v.bos_ = add("<bos>");
    v.eos_ = add("<eos>");
    v.pad_ = add("<pad>");
    v.answer_open_ = add(std::string(kBoxOpen));
    v.char_ids_[static_cast<unsigned char>('\n')] = add("\n");
    for (int c = 0x20; c <= 0x7e; ++c) {
        v.char_ids_[c] = add(std::string(1, static_cast<char>(c)));
    }
    v.answer_close_ = v.char_ids_[static_cast<unsigned char>('}')];
    return v;
}

Vocab Vocab::symbols(int n) {
    Vocab v;
    for (int i = 0; i < n; ++i) {
        const char c = static_cast<char>('a' + i);
        v.char_ids_[static_cast<unsigned char>(c)] = i;
        v.tokens_.push_back(std::string(1, c));
    }
    return v;
}

std::vector<int> Vocab::encode(std::string_view text) const {
    std::vector<int> out;
    out.reserve(text.size());
    size_t i = 0;
    while (i < text.size()) {
        if (answer_open_ >= 0 && text.substr(i, kBoxOpen.size()) == kBoxOpen) {
            out.push_back(answer_open_);
            i += kBoxOpen.size();
            continue;
        }
        const int id = char_ids_[static_cast<unsigned char>(text[i])];
        if (id < 0) {
            throw ConfigError("vocab: unencodable character 0x" +
                              std::to_string(static_cast<unsigned>(static_cast<unsigned char>(text[i]))));
        }
        out.push_back(id);
        ++i;
    }
    return out;
}

std::string Vocab::decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
        if (id < 0 || id >= size()) throw ConfigError("vocab: id out of range");
        if (id == bos_ || id == eos_ || id == pad_) continue;
        out += tokens_[static_cast<size_t>(id)];
    }
    return out;
}

uint64_t Vocab::hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& t : tokens_) {
        h = mix64(h ^ fnv1a64(t));
    }
    return h;
}

} // namespace grpolab
