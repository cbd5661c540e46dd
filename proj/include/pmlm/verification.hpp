#pragma once

// Executable checks of the structural claims: the combined instance's [M]
// rows match a vanilla cloze forward, its [P] rows match standalone per-step
// instances (so one pass computes every factorization step), the attend
// graph leaks nothing, analytic gradients match finite differences, the
// block sampler hits its target statistics, and joint training costs one
// forward pass per example.

#include <array>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "pmlm/assembly.hpp"
#include "pmlm/common.hpp"
#include "pmlm/corpus.hpp"
#include "pmlm/masking.hpp"
#include "pmlm/model.hpp"
#include "pmlm/objectives.hpp"
#include "pmlm/rng.hpp"
#include "pmlm/vocab.hpp"

namespace pmlm {

inline double relative_deviation(double a, double b) {
    const double scale = std::max({std::fabs(a), std::fabs(b), 1e-8});
    return std::fabs(a - b) / scale;
}

struct EquivalenceReport {
    int instance_id = 0;
    double max_rel_dev = 0.0;
    double threshold = 1e-5;
    bool pass = false;
    std::string detail;  // offending row / token label on failure

    std::string to_string() const {
        std::ostringstream os;
        os << (pass ? "PASS" : "FAIL") << " instance=" << instance_id
           << " max_rel_dev=" << max_rel_dev << " threshold=" << threshold;
        if (!detail.empty()) os << " " << detail;
        return os.str();
    }
};

namespace detail {

template <class S>
void compare_logit_rows(const Parameters<S>& params, const Matrix<S>& big_top, int big_row,
                        const Matrix<S>& small_top, int small_row, const PmlmInstance& big,
                        EquivalenceReport& rep) {
    const std::vector<S> a = logits_row(params, big_top.row(big_row));
    const std::vector<S> b = logits_row(params, small_top.row(small_row));
    for (size_t v = 0; v < a.size(); ++v) {
        const double dev = relative_deviation(static_cast<double>(a[v]), static_cast<double>(b[v]));
        if (dev > rep.max_rel_dev) {
            rep.max_rel_dev = dev;
            if (dev > rep.threshold) {
                std::ostringstream os;
                os << "row=" << big_row << " ("
                   << to_string(big.categories[static_cast<size_t>(big_row)].kind) << " pos="
                   << big.position_ids[static_cast<size_t>(big_row)] << ") vocab_entry=" << v;
                rep.detail = os.str();
            }
        }
    }
}

}  // namespace detail

// [M]-row logits of the combined instance vs a vanilla cloze instance.
template <class S>
EquivalenceReport check_ae_equivalence(const Parameters<S>& params, const ModelConfig& cfg,
                                       const PackedInput& x, const FactorizationOrder& order,
                                       const CorruptionPlan& plan, const Vocab& vocab,
                                       int instance_id = 0, double threshold = 1e-5) {
    EquivalenceReport rep;
    rep.instance_id = instance_id;
    rep.threshold = threshold;

    const PmlmInstance big = assemble_pmlm_input(x, order, plan, vocab);
    const AuditReport audit = audit_leakage(big);
    if (!audit.pass) {
        rep.pass = false;
        rep.detail = "leakage audit failed";
        return rep;
    }
    const PmlmInstance cloze = build_cloze_instance(x, order, plan);
    const Matrix<S> big_top = forward(big, params, cfg);
    const Matrix<S> cloze_top = forward(cloze, params, cfg);
    // [M] rows live at the same base index in both instances
    for (const TargetRow& tr : big.ae_targets)
        detail::compare_logit_rows(params, big_top, tr.row, cloze_top, tr.row, big, rep);
    rep.pass = rep.max_rel_dev <= rep.threshold;
    return rep;
}

// [P]-row logits of the combined instance vs standalone per-step instances.
template <class S>
EquivalenceReport check_par_equivalence(const Parameters<S>& params, const ModelConfig& cfg,
                                        const PackedInput& x, const FactorizationOrder& order,
                                        const CorruptionPlan& plan, const Vocab& vocab,
                                        int instance_id = 0, double threshold = 1e-5) {
    EquivalenceReport rep;
    rep.instance_id = instance_id;
    rep.threshold = threshold;

    const PmlmInstance big = assemble_pmlm_input(x, order, plan, vocab);
    const AuditReport audit = audit_leakage(big);
    if (!audit.pass) {
        rep.pass = false;
        rep.detail = "leakage audit failed";
        return rep;
    }
    const Matrix<S> big_top = forward(big, params, cfg);
    for (int i = 1; i <= order.num_steps(); ++i) {
        const StepInstance step = build_step_instance(x, order, plan, vocab, i);
        const Matrix<S> step_top = forward(step.instance, params, cfg);
        for (int r = 0; r < step.instance.rows(); ++r) {
            if (step.instance.categories[static_cast<size_t>(r)].kind != TokenCategory::pseudo)
                continue;
            detail::compare_logit_rows(params, big_top, step.source_rows[static_cast<size_t>(r)],
                                       step_top, r, big, rep);
        }
    }
    rep.pass = rep.max_rel_dev <= rep.threshold;
    return rep;
}

// ---------------------------------------------------------------------------
// Gradient check (64-bit): analytic backward vs central finite differences on
// the optimized joint objective mean_ae + mean_par.
// ---------------------------------------------------------------------------

struct GradCheckConfig {
    int hidden = 8;
    int layers = 2;
    int heads = 2;
    int ffn_hidden = 16;
    int vocab_content = 10;  // content tokens on top of the 6 specials => vocab 16
    int max_positions = 32;
    int rel_buckets = 8;
    int max_relative_distance = 8;
    double fd_step = 1e-4;
    double tol_rel = 1e-3;
    double tol_abs = 1e-6;
    uint64_t seed = 7;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    double tol_rel = 1e-3;
    int checked = 0;
    bool pass = false;
    std::string worst;  // tensor name / flat index

    std::string to_string() const {
        std::ostringstream os;
        os << (pass ? "PASS" : "FAIL") << " gradient check: " << checked
           << " parameters, max_rel_err=" << max_rel_err << " tolerance=" << tol_rel;
        if (!worst.empty()) os << " worst=" << worst;
        return os.str();
    }
};

// Fixed joint-objective scalar used by both the analytic and FD routes.
template <class S>
double joint_objective_value(const PmlmInstance& inst, const Parameters<S>& params,
                             const ModelConfig& cfg) {
    const Matrix<S> top = forward(inst, params, cfg);
    const JointLoss j = loss_joint(top, params, inst);
    return j.objective();
}

inline GradCheckReport check_gradients(const GradCheckConfig& gc = {}) {
    using S = double;
    GradCheckReport rep;
    rep.tol_rel = gc.tol_rel;

    // synthetic vocab of gc.vocab_content tokens
    std::ostringstream corpus;
    for (int i = 0; i < gc.vocab_content; ++i) corpus << "w" << i << " ";
    std::istringstream corpus_in(corpus.str());
    const Vocab vocab = Vocab::build(corpus_in, kNumSpecials + gc.vocab_content, {});

    ModelConfig cfg;
    cfg.layers = gc.layers;
    cfg.hidden = gc.hidden;
    cfg.heads = gc.heads;
    cfg.ffn_hidden = gc.ffn_hidden;
    cfg.vocab_size = vocab.size();
    cfg.max_positions = gc.max_positions;
    cfg.rel_buckets = gc.rel_buckets;
    cfg.max_relative_distance = gc.max_relative_distance;
    cfg.dropout = 0.0;  // verification runs fix dropout off

    Rng rng(gc.seed);
    std::vector<int> s1, s2;
    for (int i = 0; i < 6; ++i) s1.push_back(kNumSpecials + rng.rand_int(0, gc.vocab_content - 1));
    for (int i = 0; i < 4; ++i) s2.push_back(kNumSpecials + rng.rand_int(0, gc.vocab_content - 1));
    const PackedInput x = pack_pair(s1, s2, cfg.max_positions);
    const FactorizationOrder order = sample_blockwise_mask(x, rng);
    const CorruptionPlan plan = plan_corruption(order, vocab, rng);
    const PmlmInstance inst = assemble_pmlm_input(x, order, plan, vocab);

    Parameters<S> params = Parameters<S>::init(cfg, rng, 0.1);

    // analytic gradient of mean_ae + mean_par
    ForwardCache<S> cache;
    const Matrix<S> top = forward(inst, params, cfg, {true, nullptr}, &cache);
    Parameters<S> grads = Parameters<S>::zeros_like(params);
    Matrix<S> dh(inst.rows(), cfg.hidden);
    cross_entropy_rows(top, params, inst.ae_targets, 0.0, &dh, &grads,
                       1.0 / static_cast<double>(inst.ae_targets.size()));
    cross_entropy_rows(top, params, inst.par_targets, 0.0, &dh, &grads,
                       1.0 / static_cast<double>(inst.par_targets.size()));
    backward(inst, params, cfg, cache, dh, grads);

    // central finite differences, every parameter entry
    std::vector<std::pair<std::string, Matrix<S>*>> tensors;
    params.visit([&tensors](const std::string& name, Matrix<S>& m, bool) {
        tensors.emplace_back(name, &m);
    });
    std::vector<Matrix<S>*> grad_tensors;
    grads.visit([&grad_tensors](const std::string&, Matrix<S>& m, bool) {
        grad_tensors.push_back(&m);
    });

    for (size_t t = 0; t < tensors.size(); ++t) {
        Matrix<S>& m = *tensors[t].second;
        const Matrix<S>& g = *grad_tensors[t];
        for (size_t i = 0; i < m.d.size(); ++i) {
            const double orig = m.d[i];
            m.d[i] = orig + gc.fd_step;
            const double up = joint_objective_value(inst, params, cfg);
            m.d[i] = orig - gc.fd_step;
            const double down = joint_objective_value(inst, params, cfg);
            m.d[i] = orig;
            const double numeric = (up - down) / (2.0 * gc.fd_step);
            const double analytic = g.d[i];
            const double err = std::fabs(analytic - numeric);
            const double rel = err / std::max({std::fabs(analytic), std::fabs(numeric), gc.tol_abs});
            ++rep.checked;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst = tensors[t].first + "[" + std::to_string(i) + "]";
            }
        }
    }
    rep.pass = rep.max_rel_err <= gc.tol_rel;
    return rep;
}

// ---------------------------------------------------------------------------
// Sampler statistics
// ---------------------------------------------------------------------------

struct SamplerStatsReport {
    int sequences = 0;
    double ratio_min = 0, ratio_max = 0, ratio_mean = 0;
    std::array<double, 7> length_freq{};  // index 1..6
    bool ratio_pass = false;
    bool freq_pass = false;
    bool pass = false;

    std::string to_string() const {
        std::ostringstream os;
        os << (pass ? "PASS" : "FAIL") << " sampler stats over " << sequences
           << " sequences: ratio [" << ratio_min << ", " << ratio_max << "] mean " << ratio_mean
           << "; block-length freq";
        for (int l = 1; l <= 6; ++l) os << " " << l << ":" << length_freq[static_cast<size_t>(l)];
        return os.str();
    }
};

inline SamplerStatsReport check_sampler_stats(int n, int len, uint64_t seed,
                                              const MaskSamplerOptions& opts = {}) {
    require(n >= 1 && len >= 4, "sampler stats need n >= 1 and len >= 4");
    // synthetic packed input of total length `len`
    std::vector<int> s1(static_cast<size_t>(len - 3), kNumSpecials);
    const PackedInput x = pack_pair(s1, {}, len);
    const int usable = x.usable_length();

    SamplerStatsReport rep;
    rep.sequences = n;
    std::array<int64_t, 7> counts{};
    int64_t steps_total = 0;
    double ratio_sum = 0;
    rep.ratio_min = 1e9;
    rep.ratio_max = -1e9;
    for (int i = 0; i < n; ++i) {
        Rng rng(Rng::derive(seed, static_cast<uint64_t>(i)));
        const FactorizationOrder order = sample_blockwise_mask(x, rng, opts);
        for (const MaskStep& s : order.steps) {
            require(s.len >= 1 && s.len <= 6, "unexpected step length");
            ++counts[static_cast<size_t>(s.len)];
            ++steps_total;
        }
        const double ratio = static_cast<double>(order.masked_count()) / usable;
        ratio_sum += ratio;
        rep.ratio_min = std::min(rep.ratio_min, ratio);
        rep.ratio_max = std::max(rep.ratio_max, ratio);
    }
    rep.ratio_mean = ratio_sum / n;
    for (int l = 1; l <= 6; ++l)
        rep.length_freq[static_cast<size_t>(l)] =
            static_cast<double>(counts[static_cast<size_t>(l)]) / static_cast<double>(steps_total);

    // structural bound: the budget plus at most one extra block of overshoot
    const int budget = static_cast<int>(std::ceil(opts.mask_ratio * usable));
    const double ratio_cap = static_cast<double>(budget - 1 + opts.block_max) / usable;
    rep.ratio_pass = rep.ratio_min >= static_cast<double>(budget) / usable - 1e-12 &&
                     rep.ratio_max <= ratio_cap + 1e-12;
    const double p_block = opts.block_prob / (opts.block_max - opts.block_min + 1);
    rep.freq_pass = std::fabs(rep.length_freq[1] - (1.0 - opts.block_prob)) <= 0.01;
    for (int l = opts.block_min; l <= opts.block_max; ++l)
        rep.freq_pass = rep.freq_pass && std::fabs(rep.length_freq[static_cast<size_t>(l)] - p_block) <= 0.01;
    rep.pass = rep.ratio_pass && rep.freq_pass;
    return rep;
}

// ---------------------------------------------------------------------------
// One-pass accounting
// ---------------------------------------------------------------------------

struct PassCountReport {
    int batch = 0;
    uint64_t measured_joint = 0;  // forward passes for AE+PAR over the batch
    uint64_t measured_naive = 0;  // 1 cloze + |M| per-step instances per example
    double reuse_ratio = 0;
    bool pass = false;

    std::string to_string() const {
        std::ostringstream os;
        os << (pass ? "PASS" : "FAIL") << " forward passes over batch of " << batch
           << ": joint=" << measured_joint << " naive=" << measured_naive
           << " reuse=" << reuse_ratio << "x";
        return os.str();
    }
};

// Instrumented run: a batch whose examples each carry `steps_per_example`
// singleton factorization steps. Counts real forward() invocations for the
// one-pass joint loss and for the naive per-step construction.
template <class S = float>
PassCountReport count_forward_passes(int batch, int steps_per_example, uint64_t seed) {
    require(batch >= 1 && steps_per_example >= 1, "bad pass-count parameters");
    const int content = 12;
    std::ostringstream corpus;
    for (int i = 0; i < content; ++i) corpus << "w" << i << " ";
    std::istringstream corpus_in(corpus.str());
    const Vocab vocab = Vocab::build(corpus_in, kNumSpecials + content, {});

    // usable length chosen so ceil(0.15 * usable) == steps_per_example
    const int usable = steps_per_example * 20 / 3;
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.ffn_hidden = 32;
    cfg.vocab_size = vocab.size();
    cfg.max_positions = usable + 4;
    cfg.dropout = 0.0;
    Rng prng(seed);
    Parameters<S> params = Parameters<S>::init(cfg, prng, 0.05);

    MaskSamplerOptions sampler;
    sampler.block_prob = 0.0;  // singleton steps => |M| = masked count

    PassCountReport rep;
    rep.batch = batch;
    std::vector<PmlmInstance> joint_instances;
    std::vector<std::pair<PackedInput, std::pair<FactorizationOrder, CorruptionPlan>>> cases;
    for (int b = 0; b < batch; ++b) {
        Rng rng(Rng::derive(seed, static_cast<uint64_t>(b)));
        std::vector<int> s1;
        for (int i = 0; i < usable; ++i) s1.push_back(kNumSpecials + rng.rand_int(0, content - 1));
        const PackedInput x = pack_pair(s1, {}, usable + 3);
        FactorizationOrder order = sample_blockwise_mask(x, rng, sampler);
        require(order.num_steps() == steps_per_example,
                "pass-count setup: expected " + std::to_string(steps_per_example) + " steps, got " +
                    std::to_string(order.num_steps()));
        CorruptionPlan plan = plan_corruption(order, vocab, rng);
        joint_instances.push_back(assemble_pmlm_input(x, order, plan, vocab));
        cases.push_back({x, {order, plan}});
    }

    const uint64_t before_joint = forward_pass_counter().load();
    for (const auto& inst : joint_instances) {
        const Matrix<S> top = forward(inst, params, cfg);
        loss_joint(top, params, inst);  // AE and PAR read the same pass
    }
    rep.measured_joint = forward_pass_counter().load() - before_joint;

    const uint64_t before_naive = forward_pass_counter().load();
    for (const auto& [x, op] : cases) {
        const auto& [order, plan] = op;
        const PmlmInstance cloze = build_cloze_instance(x, order, plan);
        const Matrix<S> cloze_top = forward(cloze, params, cfg);
        loss_ae(cloze_top, params, cloze);
        for (int i = 1; i <= order.num_steps(); ++i) {
            const StepInstance st = build_step_instance(x, order, plan, vocab, i);
            const Matrix<S> st_top = forward(st.instance, params, cfg);
            loss_par(st_top, params, st.instance);
        }
    }
    rep.measured_naive = forward_pass_counter().load() - before_naive;

    rep.reuse_ratio = static_cast<double>(rep.measured_naive) / static_cast<double>(rep.measured_joint);
    rep.pass = rep.measured_joint == static_cast<uint64_t>(batch) &&
               rep.measured_naive == static_cast<uint64_t>(batch * (1 + steps_per_example));
    return rep;
}

// ---------------------------------------------------------------------------
// Random-case generator shared by the verify CLI and the test suites.
// ---------------------------------------------------------------------------

struct RandomCase {
    Vocab vocab;
    ModelConfig cfg;
    PackedInput x;
    FactorizationOrder order;
    CorruptionPlan plan;
};

inline RandomCase make_random_case(uint64_t seed, int content_vocab = 30, int max_seg = 10) {
    std::ostringstream corpus;
    for (int i = 0; i < content_vocab; ++i) corpus << "w" << i << " ";
    std::istringstream corpus_in(corpus.str());
    RandomCase rc{Vocab::build(corpus_in, kNumSpecials + content_vocab, {}), {}, {}, {}, {}};

    Rng rng(seed);
    rc.cfg.layers = 2;
    rc.cfg.hidden = 32;
    rc.cfg.heads = 2;
    rc.cfg.ffn_hidden = 64;
    rc.cfg.vocab_size = rc.vocab.size();
    rc.cfg.max_positions = 2 * max_seg + 8;
    rc.cfg.rel_buckets = 16;
    rc.cfg.max_relative_distance = 32;
    rc.cfg.dropout = 0.0;

    std::vector<int> s1, s2;
    const int n1 = rng.rand_int(3, max_seg);
    const int n2 = rng.rand_int(0, max_seg);
    for (int i = 0; i < n1; ++i) s1.push_back(kNumSpecials + rng.rand_int(0, content_vocab - 1));
    for (int i = 0; i < n2; ++i) s2.push_back(kNumSpecials + rng.rand_int(0, content_vocab - 1));
    rc.x = pack_pair(s1, s2, rc.cfg.max_positions);
    rc.order = sample_blockwise_mask(rc.x, rng);
    rc.plan = plan_corruption(rc.order, rc.vocab, rng);
    return rc;
}

}  // namespace pmlm
