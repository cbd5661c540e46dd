#pragma once

// Two-segment input packing and plain-text corpus streaming. Corpus format:
// UTF-8 text, blank line = document separator. Packed layout is
// [SOS] S1 [EOS] S2 [EOS] with segment ids 0 over [SOS]+S1+first [EOS]
// and 1 over S2+final [EOS].

#include <fstream>
#include <string>
#include <vector>

#include "pmlm/common.hpp"
#include "pmlm/vocab.hpp"

namespace pmlm {

struct PackedInput {
    std::vector<int> token_ids;
    std::vector<int> segment_ids;

    int length() const { return static_cast<int>(token_ids.size()); }

    // Tokens that may be masked: non-special content.
    int usable_length() const {
        int n = 0;
        for (int id : token_ids) n += Vocab::is_special(id) ? 0 : 1;
        return n;
    }
};

inline PackedInput pack_pair(const std::vector<int>& s1, const std::vector<int>& s2, int max_len) {
    const int total = static_cast<int>(s1.size() + s2.size()) + 3;
    require(total <= max_len, "sequence too long: " + std::to_string(total) + " > max_len " +
                                  std::to_string(max_len));
    for (int id : s1) require(!Vocab::is_special(id), "special token inside segment S1");
    for (int id : s2) require(!Vocab::is_special(id), "special token inside segment S2");

    PackedInput x;
    x.token_ids.reserve(static_cast<size_t>(total));
    x.token_ids.push_back(kSosId);
    x.token_ids.insert(x.token_ids.end(), s1.begin(), s1.end());
    x.token_ids.push_back(kEosId);
    const int seg0 = static_cast<int>(x.token_ids.size());
    x.token_ids.insert(x.token_ids.end(), s2.begin(), s2.end());
    x.token_ids.push_back(kEosId);
    x.segment_ids.assign(x.token_ids.size(), 1);
    for (int i = 0; i < seg0; ++i) x.segment_ids[static_cast<size_t>(i)] = 0;
    return x;
}

// Streams blank-line-separated documents from a UTF-8 text file. Single
// consumer per handle; UTF-8 is validated with file byte offsets.
class DocumentStream {
public:
    explicit DocumentStream(const std::string& path) : in_(path, std::ios::binary), path_(path) {
        require(in_.good(), "cannot open corpus file: " + path);
    }

    // Next document's raw text (lines joined with '\n'), or false at EOF.
    bool next(std::string& out) {
        out.clear();
        std::string line;
        bool started = false;
        while (true) {
            const auto line_offset = static_cast<size_t>(in_.tellg());
            if (!std::getline(in_, line)) break;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            validate_utf8(line, line_offset);
            const bool blank = line.find_first_not_of(" \t") == std::string::npos;
            if (blank) {
                if (started) return true;
                continue;
            }
            if (started) out += '\n';
            out += line;
            started = true;
        }
        return started;
    }

private:
    std::ifstream in_;
    std::string path_;
};

// Sentence-ish units: split at '.', '!', '?' or newline, delimiter kept with
// the left unit. Empty units dropped.
inline std::vector<std::string> split_sentences(const std::string& text) {
    std::vector<std::string> units;
    std::string cur;
    for (char c : text) {
        if (c == '\n') {
            if (!cur.empty()) units.push_back(cur);
            cur.clear();
            continue;
        }
        cur += c;
        if (c == '.' || c == '!' || c == '?') {
            units.push_back(cur);
            cur.clear();
        }
    }
    if (cur.find_first_not_of(" \t") != std::string::npos) units.push_back(cur);
    return units;
}

struct PairingStats {
    int64_t pairs = 0;
    int64_t dropped_oov_tokens = 0;  // OOV tokens removed from pre-training segments
    int64_t truncated_segments = 0;
};

// Tokenizes a document and packs consecutive sentence units into
// non-overlapping (S1,S2) pairs: (u1,u2), (u3,u4), ... A trailing unit (or a
// single-sentence document) becomes (S1, empty S2). Units are truncated to
// the max_len budget; OOV tokens are dropped so that packed segments never
// contain special ids.
inline std::vector<PackedInput> make_training_pairs(const std::string& doc_text, const Vocab& vocab,
                                                    const TokenizerOptions& opts, int max_len,
                                                    PairingStats* stats = nullptr) {
    require(max_len >= 4, "max_len too small to pack a pair");
    std::vector<std::vector<int>> units;
    for (const auto& u : split_sentences(doc_text)) {
        std::vector<int> ids;
        for (const auto& tok : split_tokens(u, opts)) {
            const int id = vocab.lookup(tok);
            if (Vocab::is_special(id)) {
                if (stats) ++stats->dropped_oov_tokens;
                continue;
            }
            ids.push_back(id);
        }
        if (!ids.empty()) units.push_back(std::move(ids));
    }

    std::vector<PackedInput> out;
    const int budget = max_len - 3;
    for (size_t i = 0; i < units.size(); i += 2) {
        std::vector<int> s1 = units[i];
        if (static_cast<int>(s1.size()) > budget) {
            s1.resize(static_cast<size_t>(budget));
            if (stats) ++stats->truncated_segments;
        }
        std::vector<int> s2;
        if (i + 1 < units.size()) {
            s2 = units[i + 1];
            const int room = budget - static_cast<int>(s1.size());
            if (static_cast<int>(s2.size()) > room) {
                s2.resize(static_cast<size_t>(room));
                if (stats) ++stats->truncated_segments;
            }
        }
        if (s1.empty() && s2.empty()) continue;
        out.push_back(pack_pair(s1, s2, max_len));
        if (stats) ++stats->pairs;
    }
    return out;
}

}  // namespace pmlm
