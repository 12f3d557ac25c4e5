// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace grpolab {

// Token inventory for the tiny policy. Text tokens are single printable
// ASCII characters plus '\n'; the answer-open marker "\boxed{" is one
// multi-character token so boxed answers stay cheap to emit. Encoding is
// greedy longest-match, so decode(encode(text)) == text for any encodable
// text and encode(decode(ids)) == ids for canonically encoded ids.
class Vocab {
public:
    // Default text vocab: <bos>, <eos>, <pad>, "\boxed{", '\n',
    // then printable ASCII 0x20..0x7e. 100 tokens total.
    static Vocab text_ascii();

    // Minimal vocab of n single-character tokens 'a', 'b', ... with no
    // special ids (bos/eos/pad = -1). Used by numeric tests.
    static Vocab symbols(int n);

    int size() const { return static_cast<int>(tokens_.size()); }
    int bos() const { return bos_; }
    int eos() const { return eos_; }
    int pad() const { return pad_; }
    int answer_open() const { return answer_open_; }
    int answer_close() const { return answer_close_; }

    const std::string& token(int id) const { return tokens_[static_cast<size_t>(id)]; }

    // Throws ConfigError on a character outside the inventory.
    std::vector<int> encode(std::string_view text) const;

    // Specials (<bos>/<eos>/<pad>) render as empty; everything else is the
    // token's literal text.
    std::string decode(std::span<const int> ids) const;

    // FNV-1a over the token list; stored in checkpoints to catch mismatched
    // vocabularies at load time.
    uint64_t hash() const;

private:
    std::vector<std::string> tokens_;
    int char_ids_[256];
    int bos_ = -1;
    int eos_ = -1;
    int pad_ = -1;
    int answer_open_ = -1;
    int answer_close_ = -1;

    Vocab();
};

} // namespace grpolab
