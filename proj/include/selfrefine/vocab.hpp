#pragma once

// Character-level tokenizer with a handful of multi-character answer-label
// tokens ("A)".."E)") so label emission and string matching never straddle
// token boundaries.

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "util.hpp"

namespace selfrefine::policy {

using TokenId = int32_t;
using TokenSeq = std::vector<TokenId>;

class Vocabulary {
  public:
    // Tiny vocabulary for tests and toy models: the five specials plus the
    // given single-character tokens.
    static Vocabulary from_chars(std::string_view chars) {
        Vocabulary v;
        v.add("<bos>");
        v.add("<eos>");
        v.add("<pad>");
        v.add("<sep>");
        v.add("<unk>");
        for (char c : chars) v.add(std::string(1, c));
        v.freeze();
        return v;
    }

    // specials first, then label tokens, then the covered character set
    static Vocabulary standard() {
        Vocabulary v;
        v.add("<bos>");
        v.add("<eos>");
        v.add("<pad>");
        v.add("<sep>");
        v.add("<unk>");
        for (char c = 'A'; c <= 'E'; ++c) v.add(std::string(1, c) + ")");
        v.add("\n");
        for (int c = 0x20; c <= 0x7e; ++c) v.add(std::string(1, static_cast<char>(c)));
        v.freeze();
        return v;
    }

    size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    const std::string& token(TokenId id) const { return tokens_.at(static_cast<size_t>(id)); }

    TokenId bos() const { return 0; }
    TokenId eos() const { return 1; }
    TokenId pad() const { return 2; }
    TokenId sep() const { return 3; }
    TokenId unk() const { return 4; }

    // Greedy longest-match encoding; uncovered bytes map to <unk> and are
    // counted through unknown_count.
    TokenSeq encode(std::string_view text, size_t* unknown_count = nullptr) const {
        TokenSeq out;
        out.reserve(text.size());
        size_t unknown = 0;
        size_t i = 0;
        while (i < text.size()) {
            if (i + 1 < text.size() && text[i] >= 'A' && text[i] <= 'E' && text[i + 1] == ')' &&
                label_ids_[static_cast<size_t>(text[i] - 'A')] >= 0) {
                out.push_back(label_ids_[static_cast<size_t>(text[i] - 'A')]);
                i += 2;
                continue;
            }
            const TokenId id = char_ids_[static_cast<unsigned char>(text[i])];
            if (id < 0) {
                out.push_back(unk());
                ++unknown;
            } else {
                out.push_back(id);
            }
            ++i;
        }
        if (unknown_count) *unknown_count = unknown;
        return out;
    }

    std::string decode(const TokenSeq& ids) const {
        std::string out;
        for (TokenId id : ids) {
            if (id < 0 || static_cast<size_t>(id) >= tokens_.size())
                throw DataError("decode: token id " + std::to_string(id) + " out of range");
            if (id == bos() || id == eos() || id == pad() || id == sep()) continue;
            if (id == unk()) {
                out += "\xEF\xBF\xBD";  // U+FFFD
                continue;
            }
            out += tokens_[static_cast<size_t>(id)];
        }
        return out;
    }

    // stable content hash for checkpoint compatibility checks
    uint64_t content_hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& t : tokens_) {
            h = fnv1a64(t, h);
            h = fnv1a64("\x1f", h);
        }
        return h;
    }

  private:
    void add(std::string token) {
        tokens_.push_back(std::move(token));
    }

    void freeze() {
        if (tokens_.size() > 512) throw ConfigError("vocabulary exceeds 512 tokens");
        char_ids_.fill(-1);
        label_ids_.fill(-1);
        for (size_t i = 0; i < tokens_.size(); ++i) {
            const std::string& t = tokens_[i];
            if (t.size() == 1) char_ids_[static_cast<unsigned char>(t[0])] = static_cast<TokenId>(i);
            if (t.size() == 2 && t[1] == ')' && t[0] >= 'A' && t[0] <= 'E')
                label_ids_[static_cast<size_t>(t[0] - 'A')] = static_cast<TokenId>(i);
        }
    }

    std::vector<std::string> tokens_;
    std::array<TokenId, 256> char_ids_{};
    std::array<TokenId, 5> label_ids_{};
};

}  // namespace selfrefine::policy
