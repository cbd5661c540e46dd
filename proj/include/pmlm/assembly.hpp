#pragma once

// Combined-instance assembly: token/position/segment ids, token categories,
// the leakage-safe self-attention mask, and the standalone oracle instances
// (vanilla cloze, per-step cloze, seq2seq) used for equivalence checks.
//
// Visibility rule, with C = context, K = conventional masks, O_i = original
// tokens of step i, P_i = pseudo tokens of step i:
//   C and K attend C u K;
//   O_i attends C u K u { O_j : j <= i };
//   P_i attends C u K u { O_j : j < i } u P_i (its own step's pseudos, incl. itself).
// C u K are attendable by every token; attention toward tokens predicted in
// the current or a future step is masked.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <sstream>
#include <string>
#include <vector>

#include "pmlm/common.hpp"
#include "pmlm/corpus.hpp"
#include "pmlm/masking.hpp"
#include "pmlm/vocab.hpp"

namespace pmlm {

enum class TokenCategory : uint8_t { context, conv_mask, original, pseudo };

inline const char* to_string(TokenCategory c) {
    switch (c) {
        case TokenCategory::context: return "ctx";
        case TokenCategory::conv_mask: return "conv";
        case TokenCategory::original: return "orig";
        case TokenCategory::pseudo: return "pseudo";
    }
    return "?";
}

struct CategoryTag {
    TokenCategory kind = TokenCategory::context;
    int step = 0;  // 1-based factorization step for original/pseudo, else 0
};

struct TargetRow {
    int row = 0;     // physical row in the instance
    int target = 0;  // original token id to predict
};

struct PmlmInstance {
    std::vector<int> token_ids;
    std::vector<int> position_ids;  // appended tokens reuse their source position
    std::vector<int> segment_ids;
    std::vector<CategoryTag> categories;
    std::vector<uint8_t> attention_mask;  // row-major rows() x rows(), 1 = may attend
    std::vector<TargetRow> ae_targets;    // at conventional-mask rows
    std::vector<TargetRow> par_targets;   // at pseudo rows

    int rows() const { return static_cast<int>(token_ids.size()); }
    bool may_attend(int i, int j) const {
        return attention_mask[static_cast<size_t>(i) * static_cast<size_t>(token_ids.size()) +
                              static_cast<size_t>(j)] != 0;
    }
};

inline std::vector<uint8_t> build_attention_mask(const std::vector<CategoryTag>& tags) {
    const size_t n = tags.size();
    std::vector<uint8_t> mask(n * n, 0);
    for (size_t i = 0; i < n; ++i) {
        const CategoryTag& q = tags[i];
        for (size_t j = 0; j < n; ++j) {
            const CategoryTag& k = tags[j];
            bool allow = false;
            if (k.kind == TokenCategory::context || k.kind == TokenCategory::conv_mask) {
                allow = true;  // C u K attendable by all tokens
            } else if (k.kind == TokenCategory::original) {
                if (q.kind == TokenCategory::original) allow = k.step <= q.step;
                else if (q.kind == TokenCategory::pseudo) allow = k.step < q.step;
            } else {  // pseudo key
                allow = q.kind == TokenCategory::pseudo && q.step == k.step;
            }
            mask[i * n + j] = allow ? 1 : 0;
        }
    }
    return mask;
}

namespace detail {

inline std::vector<CategoryTag> base_tags(const PackedInput& x, const FactorizationOrder& order) {
    std::vector<CategoryTag> tags(static_cast<size_t>(x.length()));
    for (int p = 0; p < x.length(); ++p) {
        tags[static_cast<size_t>(p)] =
            order.step_of(p) > 0 ? CategoryTag{TokenCategory::conv_mask, 0}
                                 : CategoryTag{TokenCategory::context, 0};
    }
    return tags;
}

inline void check_consistency(const PackedInput& x, const FactorizationOrder& order,
                              const CorruptionPlan& plan) {
    int masked = 0;
    for (const auto& s : order.steps) {
        require(s.len >= 1, "factorization step with empty span");
        require(s.begin >= 0 && s.end() <= x.length(), "factorization step out of bounds");
        for (int p = s.begin; p < s.end(); ++p) {
            require(!Vocab::is_special(x.token_ids[static_cast<size_t>(p)]),
                    "factorization step covers a special token");
            require(plan.index_of(p) >= 0, "corruption plan missing masked position");
        }
        masked += s.len;
    }
    require(static_cast<int>(plan.positions.size()) == masked,
            "corruption plan size does not match factorization order");
}

}  // namespace detail

// Canonical combined instance: the base sequence with masked positions holding
// their corruption-plan token, then per factorization step the step's [P]
// block followed by the step's original tokens, every appended token carrying
// the source position and segment id. Total length |x| + 2 * masked count.
inline PmlmInstance assemble_pmlm_input(const PackedInput& x, const FactorizationOrder& order,
                                        const CorruptionPlan& plan, const Vocab& vocab,
                                        bool append_pseudo = true) {
    (void)vocab;
    detail::check_consistency(x, order, plan);

    PmlmInstance inst;
    const int n = x.length();
    for (int p = 0; p < n; ++p) {
        const int orig = x.token_ids[static_cast<size_t>(p)];
        const int step = order.step_of(p);
        inst.token_ids.push_back(step > 0 ? plan.slot_token(p, orig) : orig);
        inst.position_ids.push_back(p);
        inst.segment_ids.push_back(x.segment_ids[static_cast<size_t>(p)]);
        inst.categories.push_back(step > 0 ? CategoryTag{TokenCategory::conv_mask, 0}
                                           : CategoryTag{TokenCategory::context, 0});
        if (step > 0) inst.ae_targets.push_back({p, orig});
    }
    if (append_pseudo) {
        for (size_t si = 0; si < order.steps.size(); ++si) {
            const MaskStep& s = order.steps[si];
            const int step = static_cast<int>(si) + 1;
            for (int p = s.begin; p < s.end(); ++p) {
                inst.par_targets.push_back(
                    {inst.rows(), x.token_ids[static_cast<size_t>(p)]});
                inst.token_ids.push_back(kPseudoId);
                inst.position_ids.push_back(p);
                inst.segment_ids.push_back(x.segment_ids[static_cast<size_t>(p)]);
                inst.categories.push_back({TokenCategory::pseudo, step});
            }
            for (int p = s.begin; p < s.end(); ++p) {
                inst.token_ids.push_back(x.token_ids[static_cast<size_t>(p)]);
                inst.position_ids.push_back(p);
                inst.segment_ids.push_back(x.segment_ids[static_cast<size_t>(p)]);
                inst.categories.push_back({TokenCategory::original, step});
            }
        }
    }
    inst.attention_mask = build_attention_mask(inst.categories);
    return inst;
}

// Vanilla cloze oracle: the base sequence with corruption applied, full
// bidirectional attention, AE targets only.
inline PmlmInstance build_cloze_instance(const PackedInput& x, const FactorizationOrder& order,
                                         const CorruptionPlan& plan) {
    detail::check_consistency(x, order, plan);
    PmlmInstance inst;
    const int n = x.length();
    for (int p = 0; p < n; ++p) {
        const int orig = x.token_ids[static_cast<size_t>(p)];
        const int step = order.step_of(p);
        inst.token_ids.push_back(step > 0 ? plan.slot_token(p, orig) : orig);
        inst.position_ids.push_back(p);
        inst.segment_ids.push_back(x.segment_ids[static_cast<size_t>(p)]);
        inst.categories.push_back(step > 0 ? CategoryTag{TokenCategory::conv_mask, 0}
                                           : CategoryTag{TokenCategory::context, 0});
        if (step > 0) inst.ae_targets.push_back({p, orig});
    }
    inst.attention_mask = build_attention_mask(inst.categories);  // C u K: all-allow
    return inst;
}

struct StepInstance {
    PmlmInstance instance;
    std::vector<int> source_rows;  // row in the combined instance for each row here
};

// Standalone oracle for factorization step i (1-based): exactly the tokens
// visible to P_i — context, all conventional masks, originals of steps < i,
// and step i's pseudos — with the combined instance's mask restricted to
// that subset. PAR targets at the P_i rows.
inline StepInstance build_step_instance(const PackedInput& x, const FactorizationOrder& order,
                                        const CorruptionPlan& plan, const Vocab& vocab,
                                        int step_i) {
    require(step_i >= 1 && step_i <= order.num_steps(),
            "factorization step out of range: " + std::to_string(step_i));
    const PmlmInstance big = assemble_pmlm_input(x, order, plan, vocab);

    StepInstance out;
    for (int r = 0; r < big.rows(); ++r) {
        const CategoryTag& t = big.categories[static_cast<size_t>(r)];
        const bool keep = t.kind == TokenCategory::context || t.kind == TokenCategory::conv_mask ||
                          (t.kind == TokenCategory::original && t.step < step_i) ||
                          (t.kind == TokenCategory::pseudo && t.step == step_i);
        if (!keep) continue;
        out.source_rows.push_back(r);
        out.instance.token_ids.push_back(big.token_ids[static_cast<size_t>(r)]);
        out.instance.position_ids.push_back(big.position_ids[static_cast<size_t>(r)]);
        out.instance.segment_ids.push_back(big.segment_ids[static_cast<size_t>(r)]);
        out.instance.categories.push_back(t);
    }
    const int m = out.instance.rows();
    out.instance.attention_mask.assign(static_cast<size_t>(m) * static_cast<size_t>(m), 0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j)
            out.instance.attention_mask[static_cast<size_t>(i) * static_cast<size_t>(m) +
                                        static_cast<size_t>(j)] =
                big.may_attend(out.source_rows[static_cast<size_t>(i)],
                               out.source_rows[static_cast<size_t>(j)])
                    ? 1
                    : 0;
    for (const auto& tr : big.par_targets) {
        const CategoryTag& t = big.categories[static_cast<size_t>(tr.row)];
        if (t.kind != TokenCategory::pseudo || t.step != step_i) continue;
        const auto it = std::find(out.source_rows.begin(), out.source_rows.end(), tr.row);
        out.instance.par_targets.push_back(
            {static_cast<int>(it - out.source_rows.begin()), tr.target});
    }
    return out;
}

// Seq2seq instance: [SOS] SRC [EOS] TGT [EOS] plus one [P] per target slot
// (each target token and the terminal [EOS]). Source tokens fully
// inter-attend; target token t_k sees source and t_1..t_k; [P]_k sees source,
// t_1..t_{k-1} and itself. Realized as singleton factorization steps.
inline PmlmInstance build_seq2seq_input(const std::vector<int>& src, const std::vector<int>& tgt,
                                        int max_len) {
    const int base_len = static_cast<int>(src.size() + tgt.size()) + 3;
    const int total = base_len + static_cast<int>(tgt.size()) + 1;
    require(total <= max_len, "sequence too long: seq2seq instance needs " + std::to_string(total) +
                                  " > max_len " + std::to_string(max_len));

    PmlmInstance inst;
    const auto push = [&inst](int tok, int pos, int seg, CategoryTag tag) {
        inst.token_ids.push_back(tok);
        inst.position_ids.push_back(pos);
        inst.segment_ids.push_back(seg);
        inst.categories.push_back(tag);
    };

    int pos = 0;
    push(kSosId, pos++, 0, {TokenCategory::context, 0});
    for (int id : src) push(id, pos++, 0, {TokenCategory::context, 0});
    push(kEosId, pos++, 0, {TokenCategory::context, 0});

    // target slots: tgt tokens then the terminal [EOS], one step per slot
    std::vector<int> slots = tgt;
    slots.push_back(kEosId);
    const int first_tgt_pos = pos;
    for (size_t k = 0; k < slots.size(); ++k)
        push(slots[k], first_tgt_pos + static_cast<int>(k), 1,
             {TokenCategory::original, static_cast<int>(k) + 1});
    for (size_t k = 0; k < slots.size(); ++k) {
        inst.par_targets.push_back({inst.rows(), slots[k]});
        push(kPseudoId, first_tgt_pos + static_cast<int>(k), 1,
             {TokenCategory::pseudo, static_cast<int>(k) + 1});
    }
    inst.attention_mask = build_attention_mask(inst.categories);
    return inst;
}

// Incremental decoding view: [SOS] SRC [EOS] prefix + one [P] for the next
// slot. Logits for the next token are read at the final (pseudo) row.
inline PmlmInstance build_decode_instance(const std::vector<int>& src,
                                          const std::vector<int>& prefix, int max_len) {
    const int total = static_cast<int>(src.size()) + 2 + static_cast<int>(prefix.size()) + 1;
    require(total <= max_len, "sequence too long: decode instance needs " + std::to_string(total) +
                                  " > max_len " + std::to_string(max_len));
    PmlmInstance inst;
    const auto push = [&inst](int tok, int pos, int seg, CategoryTag tag) {
        inst.token_ids.push_back(tok);
        inst.position_ids.push_back(pos);
        inst.segment_ids.push_back(seg);
        inst.categories.push_back(tag);
    };
    int pos = 0;
    push(kSosId, pos++, 0, {TokenCategory::context, 0});
    for (int id : src) push(id, pos++, 0, {TokenCategory::context, 0});
    push(kEosId, pos++, 0, {TokenCategory::context, 0});
    for (size_t k = 0; k < prefix.size(); ++k)
        push(prefix[k], pos++, 1, {TokenCategory::original, static_cast<int>(k) + 1});
    push(kPseudoId, pos, 1, {TokenCategory::pseudo, static_cast<int>(prefix.size()) + 1});
    inst.attention_mask = build_attention_mask(inst.categories);
    return inst;
}

// ---------------------------------------------------------------------------
// Leakage audit: transitive closure of the attend graph. PASS iff no pseudo
// token of step i reaches an original token of step j >= i, and no context or
// conventional-mask token reaches any original token.
// ---------------------------------------------------------------------------

struct LeakagePath {
    std::vector<int> rows;  // attention hops, source first
    std::string describe(const PmlmInstance& inst) const {
        std::ostringstream os;
        for (size_t k = 0; k < rows.size(); ++k) {
            const int r = rows[k];
            if (k) os << " -> ";
            os << "row" << r << "(" << to_string(inst.categories[static_cast<size_t>(r)].kind)
               << (inst.categories[static_cast<size_t>(r)].step > 0
                       ? std::to_string(inst.categories[static_cast<size_t>(r)].step)
                       : std::string())
               << "@pos" << inst.position_ids[static_cast<size_t>(r)] << ")";
        }
        return os.str();
    }
};

struct AuditReport {
    bool pass = true;
    std::vector<LeakagePath> violations;  // one shortest witness path per bad (src,dst) pair
    int rows = 0;

    std::string to_string(const PmlmInstance& inst) const {
        std::ostringstream os;
        os << "leakage audit: " << (pass ? "PASS" : "FAIL") << " (" << rows << " tokens, "
           << violations.size() << " violating paths)\n";
        for (const auto& v : violations) os << "  " << v.describe(inst) << "\n";
        return os.str();
    }
};

inline AuditReport audit_leakage(const PmlmInstance& inst) {
    const int n = inst.rows();
    AuditReport rep;
    rep.rows = n;

    const auto forbidden = [&](int src, int dst) {
        const CategoryTag& s = inst.categories[static_cast<size_t>(src)];
        const CategoryTag& d = inst.categories[static_cast<size_t>(dst)];
        if (d.kind != TokenCategory::original) return false;
        if (s.kind == TokenCategory::pseudo) return d.step >= s.step;
        return s.kind == TokenCategory::context || s.kind == TokenCategory::conv_mask;
    };

    // BFS from each row over attend edges; parents give a shortest witness.
    std::vector<int> parent(static_cast<size_t>(n));
    std::vector<char> seen(static_cast<size_t>(n));
    for (int src = 0; src < n; ++src) {
        std::fill(seen.begin(), seen.end(), 0);
        std::fill(parent.begin(), parent.end(), -1);
        std::deque<int> q{src};
        seen[static_cast<size_t>(src)] = 1;
        while (!q.empty()) {
            const int u = q.front();
            q.pop_front();
            for (int v = 0; v < n; ++v) {
                if (!inst.may_attend(u, v) || seen[static_cast<size_t>(v)]) continue;
                seen[static_cast<size_t>(v)] = 1;
                parent[static_cast<size_t>(v)] = u;
                q.push_back(v);
            }
        }
        for (int dst = 0; dst < n; ++dst) {
            if (dst == src || !seen[static_cast<size_t>(dst)] || !forbidden(src, dst)) continue;
            LeakagePath path;
            for (int r = dst; r != -1; r = parent[static_cast<size_t>(r)]) path.rows.push_back(r);
            std::reverse(path.rows.begin(), path.rows.end());
            rep.violations.push_back(std::move(path));
            rep.pass = false;
        }
    }
    return rep;
}

// Line-oriented grid of the attention mask with token/category/position
// labels, for golden-file diffing.
inline std::string format_mask_grid(const PmlmInstance& inst, const Vocab& vocab) {
    std::ostringstream os;
    const int n = inst.rows();
    for (int i = 0; i < n; ++i) {
        const CategoryTag& t = inst.categories[static_cast<size_t>(i)];
        os << "row " << i << "\t" << vocab.token(inst.token_ids[static_cast<size_t>(i)]) << "\t"
           << to_string(t.kind);
        if (t.step > 0) os << t.step;
        os << "\tpos=" << inst.position_ids[static_cast<size_t>(i)] << "\t";
        for (int j = 0; j < n; ++j) os << (inst.may_attend(i, j) ? '1' : '0');
        os << "\n";
    }
    return os.str();
}

}  // namespace pmlm
