#pragma once

// Token <-> id table with the six reserved specials. File format: one token
// per line, line number = id, specials first in the fixed order
// [PAD],[UNK],[SOS],[EOS],[MASK],[P].

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pmlm/common.hpp"

namespace pmlm {

enum class TokenMode { word, chars };

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kSosId = 2;
inline constexpr int kEosId = 3;
inline constexpr int kMaskId = 4;
inline constexpr int kPseudoId = 5;
inline constexpr int kNumSpecials = 6;

inline const std::array<std::string_view, kNumSpecials>& special_tokens() {
    static const std::array<std::string_view, kNumSpecials> t = {
        "[PAD]", "[UNK]", "[SOS]", "[EOS]", "[MASK]", "[P]"};
    return t;
}

// Byte length of the UTF-8 sequence starting at `s[i]`, validating the
// continuation bytes. Throws with the byte offset (plus `base_offset`,
// for callers reading a larger stream) on malformed input.
inline size_t utf8_advance(std::string_view s, size_t i, size_t base_offset = 0) {
    const auto bad = [&](size_t at) -> size_t {
        fail("malformed UTF-8 at byte offset " + std::to_string(base_offset + at));
    };
    const unsigned char c = static_cast<unsigned char>(s[i]);
    size_t len = 0;
    if (c < 0x80) len = 1;
    else if ((c & 0xE0) == 0xC0) len = 2;
    else if ((c & 0xF0) == 0xE0) len = 3;
    else if ((c & 0xF8) == 0xF0) len = 4;
    else return bad(i);
    if (i + len > s.size()) return bad(i);
    for (size_t k = 1; k < len; ++k) {
        if ((static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80) return bad(i + k);
    }
    return len;
}

inline void validate_utf8(std::string_view s, size_t base_offset = 0) {
    size_t i = 0;
    while (i < s.size()) i += utf8_advance(s, i, base_offset);
}

inline std::string ascii_lower(std::string_view s) {
    std::string out(s);
    for (char& c : out) {
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    }
    return out;
}

struct TokenizerOptions {
    TokenMode mode = TokenMode::word;
    bool lowercase = true;  // uncased by default
};

// Splits text into unit strings (whitespace words or UTF-8 characters).
inline std::vector<std::string> split_tokens(std::string_view text, const TokenizerOptions& opts) {
    std::vector<std::string> out;
    if (opts.mode == TokenMode::word) {
        size_t i = 0;
        while (i < text.size()) {
            while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
            size_t j = i;
            while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
            if (j > i) {
                std::string tok(text.substr(i, j - i));
                out.push_back(opts.lowercase ? ascii_lower(tok) : tok);
            }
            i = j;
        }
    } else {
        size_t i = 0;
        while (i < text.size()) {
            if (std::isspace(static_cast<unsigned char>(text[i]))) { ++i; continue; }
            const size_t len = utf8_advance(text, i);
            std::string tok(text.substr(i, len));
            out.push_back(opts.lowercase ? ascii_lower(tok) : tok);
            i += len;
        }
    }
    return out;
}

class Vocab {
public:
    Vocab() {
        for (auto sv : special_tokens()) push_token(std::string(sv));
    }

    int size() const { return static_cast<int>(id_to_token_.size()); }

    // Unknown strings map to [UNK].
    int lookup(const std::string& tok) const {
        auto it = token_to_id_.find(tok);
        return it == token_to_id_.end() ? kUnkId : it->second;
    }

    const std::string& token(int id) const {
        require(id >= 0 && id < size(), "token id out of range: " + std::to_string(id));
        return id_to_token_[static_cast<size_t>(id)];
    }

    bool contains(const std::string& tok) const { return token_to_id_.count(tok) != 0; }
    static bool is_special(int id) { return id >= 0 && id < kNumSpecials; }

    std::vector<int> encode(std::string_view text, const TokenizerOptions& opts) const {
        std::vector<int> ids;
        for (const auto& t : split_tokens(text, opts)) ids.push_back(lookup(t));
        return ids;
    }

    std::string decode(const std::vector<int>& ids, TokenMode mode) const {
        std::string out;
        for (size_t k = 0; k < ids.size(); ++k) {
            if (mode == TokenMode::word && k > 0) out += ' ';
            out += token(ids[k]);
        }
        return out;
    }

    // Most frequent units first; ties broken lexicographically. Deterministic.
    static Vocab build(std::istream& corpus, int max_size, const TokenizerOptions& opts) {
        require(max_size > kNumSpecials, "vocab max_size must exceed the special count");
        std::map<std::string, int64_t> counts;
        std::string line;
        bool any = false;
        while (std::getline(corpus, line)) {
            validate_utf8(line);
            for (auto& tok : split_tokens(line, opts)) {
                ++counts[tok];
                any = true;
            }
        }
        require(any, "empty corpus");

        std::vector<std::pair<std::string, int64_t>> entries(counts.begin(), counts.end());
        std::stable_sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });

        Vocab v;
        for (const auto& [tok, cnt] : entries) {
            if (v.size() >= max_size) break;
            if (!v.contains(tok)) v.push_token(tok);
        }
        return v;
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        require(out.good(), "cannot open vocab file for writing: " + path);
        for (const auto& t : id_to_token_) out << t << '\n';
    }

    static Vocab load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        require(in.good(), "cannot open vocab file: " + path);
        Vocab v;
        std::string line;
        int id = 0;
        while (std::getline(in, line)) {
            if (id < kNumSpecials) {
                require(line == special_tokens()[static_cast<size_t>(id)],
                        "vocab file: special token mismatch at line " + std::to_string(id + 1));
            } else {
                require(!v.contains(line), "vocab file: duplicate token '" + line + "'");
                v.push_token(line);
            }
            ++id;
        }
        require(id >= kNumSpecials, "vocab file truncated: " + path);
        return v;
    }

private:
    void push_token(std::string tok) {
        token_to_id_.emplace(tok, size());
        id_to_token_.push_back(std::move(tok));
    }

    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

}  // namespace pmlm
