#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pmlm/corpus.hpp"
#include "pmlm/rng.hpp"
#include "pmlm/vocab.hpp"

using namespace pmlm;

namespace {

Vocab vocab_from(const std::string& text, int max_size = 64, TokenizerOptions opts = {}) {
    std::istringstream in(text);
    return Vocab::build(in, max_size, opts);
}

std::string write_temp(const std::string& name, const std::string& content) {
    const std::string path = testing::TempDir() + name;
    std::ofstream out(path, std::ios::binary);
    out << content;
    return path;
}

}  // namespace

TEST(Vocab, SpecialsFixedOrderAndIds) {
    const Vocab v = vocab_from("a");
    EXPECT_EQ(v.token(kPadId), "[PAD]");
    EXPECT_EQ(v.token(kUnkId), "[UNK]");
    EXPECT_EQ(v.token(kSosId), "[SOS]");
    EXPECT_EQ(v.token(kEosId), "[EOS]");
    EXPECT_EQ(v.token(kMaskId), "[MASK]");
    EXPECT_EQ(v.token(kPseudoId), "[P]");
    EXPECT_EQ(kNumSpecials, 6);
}

TEST(Vocab, FrequencyThenLexOrder) {
    // "a b a": a appears twice, b once
    const Vocab v = vocab_from("a b a");
    EXPECT_EQ(v.size(), kNumSpecials + 2);
    EXPECT_LT(v.lookup("a"), v.lookup("b"));
    EXPECT_EQ(v.lookup("a"), kNumSpecials);

    // equal frequency: lexicographic
    const Vocab v2 = vocab_from("z y x");
    EXPECT_LT(v2.lookup("x"), v2.lookup("y"));
    EXPECT_LT(v2.lookup("y"), v2.lookup("z"));
}

TEST(Vocab, CharModeTinyCase) {
    const Vocab v = vocab_from("ab", 8, {TokenMode::chars, true});
    EXPECT_EQ(v.size(), kNumSpecials + 2);
    EXPECT_TRUE(v.contains("a"));
    EXPECT_TRUE(v.contains("b"));
}

// Independent one-pass frequency counter as the ordering oracle.
TEST(Vocab, SyntheticCorpusTopFrequencyGetsLowestId) {
    Rng rng(99);
    std::ostringstream corpus;
    std::map<std::string, int64_t> oracle_counts;
    for (int s = 0; s < 10000; ++s) {
        const int len = rng.rand_int(3, 8);
        for (int k = 0; k < len; ++k) {
            // skewed distribution over 50 words
            const int w = std::min(rng.rand_int(0, 49), rng.rand_int(0, 49));
            const std::string tok = "w" + std::to_string(w);
            corpus << tok << ' ';
            ++oracle_counts[tok];
        }
        corpus << '\n';
    }
    const Vocab v = vocab_from(corpus.str(), 2000);

    std::string top_token;
    int64_t top_count = -1;
    for (const auto& [tok, cnt] : oracle_counts) {
        if (cnt > top_count || (cnt == top_count && tok < top_token)) {
            top_token = tok;
            top_count = cnt;
        }
    }
    EXPECT_EQ(v.lookup(top_token), kNumSpecials);

    // full ordering agrees with (count desc, token asc)
    std::vector<std::pair<std::string, int64_t>> sorted(oracle_counts.begin(), oracle_counts.end());
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    for (size_t i = 0; i < sorted.size(); ++i)
        EXPECT_EQ(v.lookup(sorted[i].first), kNumSpecials + static_cast<int>(i));
}

TEST(Vocab, UnknownLookupAndErrors) {
    const Vocab v = vocab_from("a b c");
    EXPECT_EQ(v.lookup("zebra"), kUnkId);
    std::istringstream empty("");
    EXPECT_THROW(Vocab::build(empty, 64, {}), Error);
    std::istringstream blank("   \n \t \n");
    EXPECT_THROW(Vocab::build(blank, 64, {}), Error);
}

TEST(Vocab, MaxSizeRespected) {
    const Vocab v = vocab_from("a b c d e f g h", kNumSpecials + 3);
    EXPECT_EQ(v.size(), kNumSpecials + 3);
}

TEST(Vocab, SaveLoadRoundTrip) {
    const Vocab v = vocab_from("delta alpha beta alpha");
    const std::string path = write_temp("vocab_rt.txt", "");
    v.save(path);
    const Vocab w = Vocab::load(path);
    EXPECT_EQ(w.size(), v.size());
    for (int i = 0; i < v.size(); ++i) EXPECT_EQ(w.token(i), v.token(i));

    // file layout: one token per line, specials first
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "[PAD]");
}

TEST(Vocab, LowercaseDefaultAndDisable) {
    const Vocab lower = vocab_from("Apple APPLE apple");
    EXPECT_EQ(lower.size(), kNumSpecials + 1);
    const Vocab cased = vocab_from("Apple APPLE apple", 64, {TokenMode::word, false});
    EXPECT_EQ(cased.size(), kNumSpecials + 3);
}

TEST(Tokenizer, WordRoundTripUpToWhitespace) {
    const TokenizerOptions opts{TokenMode::word, true};
    const std::string text = "the  quick\tbrown fox\n jumps";
    const Vocab v = vocab_from(text);
    const std::vector<int> ids = v.encode(text, opts);
    EXPECT_EQ(v.decode(ids, TokenMode::word), "the quick brown fox jumps");
}

TEST(Tokenizer, CharModeExactRoundTrip) {
    const TokenizerOptions opts{TokenMode::chars, false};
    const std::string text = "caf\xC3\xA9x";  // café + x, multi-byte point kept intact
    const Vocab v = vocab_from(text, 64, opts);
    const std::vector<int> ids = v.encode(text, opts);
    EXPECT_EQ(ids.size(), 5u);
    EXPECT_EQ(v.decode(ids, TokenMode::chars), text);
}

TEST(Tokenizer, CharRoundTripPropertyOverRandomStrings) {
    const TokenizerOptions opts{TokenMode::chars, false};
    Rng rng(4);
    const std::string alphabet = "abcdefgh123";
    for (int trial = 0; trial < 200; ++trial) {
        std::string s;
        const int n = rng.rand_int(1, 24);
        for (int i = 0; i < n; ++i) s += alphabet[static_cast<size_t>(rng.rand_int(0, 10))];
        const Vocab v = vocab_from(s, 64, opts);
        EXPECT_EQ(v.decode(v.encode(s, opts), TokenMode::chars), s);
    }
}

TEST(Tokenizer, MalformedUtf8ReportsByteOffset) {
    try {
        split_tokens("ab\xFFzz", {TokenMode::chars, false});
        FAIL() << "expected malformed UTF-8 error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("byte offset 2"), std::string::npos) << e.what();
    }
    // truncated multi-byte sequence at end
    EXPECT_THROW(validate_utf8("ok\xC3"), Error);
}

TEST(PackPair, BasicLayoutAndSegments) {
    const int a = kNumSpecials, b = kNumSpecials + 1, c = kNumSpecials + 2;
    const PackedInput x = pack_pair({a, b}, {c}, 16);
    EXPECT_EQ(x.token_ids, (std::vector<int>{kSosId, a, b, kEosId, c, kEosId}));
    EXPECT_EQ(x.segment_ids, (std::vector<int>{0, 0, 0, 0, 1, 1}));
}

TEST(PackPair, EmptySecondSegment) {
    const int a = kNumSpecials;
    const PackedInput x = pack_pair({a}, {}, 16);
    EXPECT_EQ(x.token_ids, (std::vector<int>{kSosId, a, kEosId, kEosId}));
    EXPECT_EQ(x.segment_ids, (std::vector<int>{0, 0, 0, 1}));
}

TEST(PackPair, ExactBoundaryAcceptedOverflowRejected) {
    const std::vector<int> s1(5, kNumSpecials), s2(8, kNumSpecials + 1);
    EXPECT_NO_THROW(pack_pair(s1, s2, 16));  // 5 + 8 + 3 == 16
    EXPECT_THROW(pack_pair(s1, s2, 15), Error);
}

TEST(PackPair, SpecialInsideSegmentRejected) {
    EXPECT_THROW(pack_pair({kMaskId}, {}, 16), Error);
    EXPECT_THROW(pack_pair({kNumSpecials}, {kEosId}, 16), Error);
    EXPECT_THROW(pack_pair({kUnkId}, {}, 16), Error);
}

// every PackedInput decodes to exactly two segments and three special tokens
TEST(PackPair, StructuralInvariantProperty) {
    Rng rng(11);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<int> s1, s2;
        for (int i = rng.rand_int(0, 6); i > 0; --i) s1.push_back(kNumSpecials + rng.rand_int(0, 9));
        for (int i = rng.rand_int(0, 6); i > 0; --i) s2.push_back(kNumSpecials + rng.rand_int(0, 9));
        const PackedInput x = pack_pair(s1, s2, 32);
        int specials = 0;
        for (int id : x.token_ids) specials += Vocab::is_special(id) ? 1 : 0;
        EXPECT_EQ(specials, 3);
        EXPECT_EQ(x.token_ids.size(), x.segment_ids.size());
        // segment ids are 0...0 then 1...1, switching right after the first [EOS]
        const auto first_eos =
            std::find(x.token_ids.begin(), x.token_ids.end(), kEosId) - x.token_ids.begin();
        for (size_t i = 0; i < x.segment_ids.size(); ++i)
            EXPECT_EQ(x.segment_ids[i], static_cast<long>(i) <= first_eos ? 0 : 1);
        EXPECT_EQ(x.usable_length(), static_cast<int>(s1.size() + s2.size()));
    }
}

TEST(DocumentStream, BlankLineSeparatesDocuments) {
    const std::string path = write_temp("docs1.txt", "first doc line one\nline two\n\nsecond doc\n");
    DocumentStream ds(path);
    std::string doc;
    ASSERT_TRUE(ds.next(doc));
    EXPECT_EQ(doc, "first doc line one\nline two");
    ASSERT_TRUE(ds.next(doc));
    EXPECT_EQ(doc, "second doc");
    EXPECT_FALSE(ds.next(doc));
}

TEST(DocumentStream, EmptyFileYieldsNothing) {
    const std::string path = write_temp("docs_empty.txt", "");
    DocumentStream ds(path);
    std::string doc;
    EXPECT_FALSE(ds.next(doc));
}

TEST(DocumentStream, MissingFileAndMalformedUtf8) {
    EXPECT_THROW(DocumentStream("/nonexistent/file.txt"), Error);
    const std::string path = write_temp("docs_bad.txt", "fine line\nbad \xFE line\n");
    DocumentStream ds(path);
    std::string doc;
    try {
        ds.next(doc);
        FAIL() << "expected malformed UTF-8 error";
    } catch (const Error& e) {
        // offset of 0xFE within the file: "fine line\n" is 10 bytes, "bad " 4 more
        EXPECT_NE(std::string(e.what()).find("byte offset 14"), std::string::npos) << e.what();
    }
}

namespace {

// Independent splitter oracle: sentence units end at [.!?] or newline.
std::vector<std::string> oracle_units(const std::string& text) {
    std::vector<std::string> units;
    std::string cur;
    for (char ch : text) {
        if (ch == '\n') {
            if (!cur.empty()) units.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
            if (ch == '.' || ch == '!' || ch == '?') {
                units.push_back(cur);
                cur.clear();
            }
        }
    }
    if (cur.find_first_not_of(" \t") != std::string::npos) units.push_back(cur);
    return units;
}

}  // namespace

TEST(TrainingPairs, ThreeSentenceDocumentPairsConsecutiveUnits) {
    const std::string doc = "aa bb. cc dd. ee ff.";
    // tokens keep the trailing period, so build the vocab over both forms
    const Vocab v = vocab_from("aa bb cc dd ee ff aa. bb. cc. dd. ee. ff.");
    const auto pairs = make_training_pairs(doc, v, {}, 16);

    const auto units = oracle_units(doc);
    ASSERT_EQ(units.size(), 3u);
    ASSERT_EQ(pairs.size(), 2u);  // (u1,u2), (u3, empty)

    const auto expect_tokens = [&](const PackedInput& x, const std::string& u1,
                                   const std::string& u2) {
        std::vector<int> want{kSosId};
        for (const auto& t : split_tokens(u1, {})) want.push_back(v.lookup(t));
        want.push_back(kEosId);
        for (const auto& t : split_tokens(u2, {})) want.push_back(v.lookup(t));
        want.push_back(kEosId);
        EXPECT_EQ(x.token_ids, want);
    };
    expect_tokens(pairs[0], units[0], units[1]);
    expect_tokens(pairs[1], units[2], "");
}

TEST(TrainingPairs, SingleSentenceDocBecomesS1WithEmptyS2) {
    const Vocab v = vocab_from("hello world hello. world.");
    const auto pairs = make_training_pairs("hello world", v, {}, 16);
    ASSERT_EQ(pairs.size(), 1u);
    EXPECT_EQ(pairs[0].segment_ids.back(), 1);
    EXPECT_EQ(pairs[0].token_ids.size(), 5u);  // SOS hello world EOS EOS
}

TEST(TrainingPairs, OovTokensDroppedNotPackedAsUnk) {
    const Vocab v = vocab_from("known words only known. words. only.");
    PairingStats stats;
    const auto pairs = make_training_pairs("known mystery words", v, {}, 16, &stats);
    ASSERT_EQ(pairs.size(), 1u);
    for (int id : pairs[0].token_ids) EXPECT_NE(id, kUnkId);
    EXPECT_EQ(stats.dropped_oov_tokens, 1);
}

TEST(TrainingPairs, OversizedUnitsTruncatedToBudget) {
    std::string doc;
    for (int i = 0; i < 30; ++i) doc += "word ";
    const Vocab v = vocab_from("word");
    PairingStats stats;
    const auto pairs = make_training_pairs(doc, v, {}, 10, &stats);
    ASSERT_EQ(pairs.size(), 1u);
    EXPECT_LE(pairs[0].length(), 10);
    EXPECT_GT(stats.truncated_segments, 0);
}
