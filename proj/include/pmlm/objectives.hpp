#pragma once

// AE / PAR / joint losses computed from one forward pass, the Adam(W)
// optimizer with linear warmup + linear decay, and the pre-training loop.
//
// Loss accounting: the summed cross-entropies (the corpus-sum objective form)
// and per-predicted-token means are both reported; the optimized scalar is
// mean_ae + mean_par, normalized per batch.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "pmlm/assembly.hpp"
#include "pmlm/common.hpp"
#include "pmlm/corpus.hpp"
#include "pmlm/masking.hpp"
#include "pmlm/model.hpp"
#include "pmlm/rng.hpp"
#include "pmlm/vocab.hpp"

namespace pmlm {

enum class ObjectiveKind { ae, ar, par, ae_ar, ae_par };

inline ObjectiveKind parse_objective(const std::string& s) {
    if (s == "ae") return ObjectiveKind::ae;
    if (s == "ar") return ObjectiveKind::ar;
    if (s == "par") return ObjectiveKind::par;
    if (s == "ae+ar") return ObjectiveKind::ae_ar;
    if (s == "ae+par") return ObjectiveKind::ae_par;
    fail("unknown objective '" + s + "' (expected ae, ar, par, ae+ar, ae+par)");
}

inline const char* to_string(ObjectiveKind k) {
    switch (k) {
        case ObjectiveKind::ae: return "ae";
        case ObjectiveKind::ar: return "ar";
        case ObjectiveKind::par: return "par";
        case ObjectiveKind::ae_ar: return "ae+ar";
        case ObjectiveKind::ae_par: return "ae+par";
    }
    return "?";
}

inline bool uses_ae_loss(ObjectiveKind k) {
    return k == ObjectiveKind::ae || k == ObjectiveKind::ae_ar || k == ObjectiveKind::ae_par;
}
inline bool uses_par_loss(ObjectiveKind k) { return k != ObjectiveKind::ae; }
// AR is PAR restricted to all-singleton factorization steps.
inline bool singleton_steps(ObjectiveKind k) { return k == ObjectiveKind::ar || k == ObjectiveKind::ae_ar; }
// AE-only instances skip [P] appending entirely.
inline bool appends_pseudo(ObjectiveKind k) { return k != ObjectiveKind::ae; }

struct LossStat {
    double sum = 0.0;  // summed negative log-likelihood
    int count = 0;     // predicted tokens

    double mean() const { return count > 0 ? sum / count : 0.0; }
    LossStat& operator+=(const LossStat& o) {
        sum += o.sum;
        count += o.count;
        return *this;
    }
};

// Cross-entropy at the given rows (optionally label-smoothed). When dh /
// grads are provided, accumulates d(sum of row losses)/d(...) scaled by
// grad_scale into them (classifier-tied embedding + output bias + dH rows).
template <class S>
LossStat cross_entropy_rows(const Matrix<S>& h_top, const Parameters<S>& params,
                            const std::vector<TargetRow>& targets, double label_smoothing = 0.0,
                            Matrix<S>* dh = nullptr, Parameters<S>* grads = nullptr,
                            double grad_scale = 1.0) {
    LossStat stat;
    const int V = params.tok_emb.rows;
    for (const TargetRow& tr : targets) {
        require(tr.target >= 0 && tr.target < V, "target token id out of range");
        std::vector<S> logits = logits_row(params, h_top.row(tr.row));
        double best = static_cast<double>(logits[0]);
        for (int v = 1; v < V; ++v) best = std::max(best, static_cast<double>(logits[static_cast<size_t>(v)]));
        double z = 0;
        for (int v = 0; v < V; ++v) z += std::exp(static_cast<double>(logits[static_cast<size_t>(v)]) - best);
        const double log_z = std::log(z) + best;

        const double eps = label_smoothing;
        double loss = 0;
        if (eps == 0.0) {
            loss = log_z - static_cast<double>(logits[static_cast<size_t>(tr.target)]);
        } else {
            // q = (1-eps) one-hot + eps/V; loss = -sum_c q_c log p_c
            double dot = 0;
            for (int v = 0; v < V; ++v) {
                const double q = (v == tr.target ? 1.0 - eps : 0.0) + eps / V;
                dot += q * (static_cast<double>(logits[static_cast<size_t>(v)]) - log_z);
            }
            loss = -dot;
        }
        stat.sum += loss;
        stat.count += 1;

        if (dh != nullptr && grads != nullptr) {
            std::vector<S> dlogits(static_cast<size_t>(V));
            for (int v = 0; v < V; ++v) {
                const double p = std::exp(static_cast<double>(logits[static_cast<size_t>(v)]) - log_z);
                const double q = (v == tr.target ? 1.0 - eps : 0.0) + eps / V;
                dlogits[static_cast<size_t>(v)] = static_cast<S>((p - q) * grad_scale);
            }
            logits_backward_row(params, h_top.row(tr.row), dlogits, dh->row(tr.row), *grads);
        }
    }
    return stat;
}

// Eq.-style objective evaluations over a single forward output.
template <class S>
LossStat loss_ae(const Matrix<S>& h_top, const Parameters<S>& params, const PmlmInstance& inst) {
    return cross_entropy_rows(h_top, params, inst.ae_targets);
}

template <class S>
LossStat loss_par(const Matrix<S>& h_top, const Parameters<S>& params, const PmlmInstance& inst) {
    return cross_entropy_rows(h_top, params, inst.par_targets);
}

struct JointLoss {
    LossStat ae, par;
    double sum() const { return ae.sum + par.sum; }                 // L_AE + L_PAR
    double objective() const { return ae.mean() + par.mean(); }     // optimized scalar
};

template <class S>
JointLoss loss_joint(const Matrix<S>& h_top, const Parameters<S>& params, const PmlmInstance& inst) {
    JointLoss j;
    j.ae = loss_ae(h_top, params, inst);
    j.par = loss_par(h_top, params, inst);
    return j;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct TrainConfig {
    int batch_size = 8;
    double peak_lr = 6e-4;
    int warmup_steps = -1;        // <0: resolve from warmup_ratio
    double warmup_ratio = 0.048;
    int64_t total_steps = 1000;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.98;
    double adam_eps = 1e-6;
    double weight_decay = 0.01;
    double grad_clip = 0.0;  // 0 = disabled
    uint64_t seed = 42;

    int64_t resolved_warmup() const {
        if (warmup_steps >= 0) return warmup_steps;
        return static_cast<int64_t>(warmup_ratio * static_cast<double>(total_steps));
    }

    void validate() const {
        require(batch_size >= 1 && total_steps >= 1, "batch size and total steps must be positive");
        require(peak_lr > 0, "peak learning rate must be positive");
        require(resolved_warmup() <= total_steps, "warmup must not exceed total steps");
        require(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1, "Adam betas in [0,1)");
        require(adam_eps > 0 && weight_decay >= 0 && grad_clip >= 0, "optimizer scalars must be non-negative");
    }
};

// Linear warmup to the peak, then linear decay to 0 at total_steps. Steps are
// 1-based; lr(warmup) = peak exactly, lr(total) = 0 exactly.
inline double lr_at(const TrainConfig& cfg, int64_t step) {
    const int64_t w = cfg.resolved_warmup();
    if (w > 0 && step <= w) return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(w);
    if (cfg.total_steps == w) return cfg.peak_lr;
    return cfg.peak_lr * static_cast<double>(cfg.total_steps - step) /
           static_cast<double>(cfg.total_steps - w);
}

template <class S>
struct AdamState {
    Parameters<S> m, v;
    int64_t step = 0;

    static AdamState init(const Parameters<S>& params) {
        AdamState st;
        st.m = Parameters<S>::zeros_like(params);
        st.v = Parameters<S>::zeros_like(params);
        return st;
    }
};

// One tensor's Adam(W) update with precomputed bias corrections.
template <class S>
void adam_update_tensor(Matrix<S>& p, const Matrix<S>& g, Matrix<S>& m, Matrix<S>& v,
                        const TrainConfig& cfg, double lr, double bias1, double bias2,
                        double weight_decay) {
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    for (size_t i = 0; i < p.d.size(); ++i) {
        const double gi = static_cast<double>(g.d[i]);
        const double mi = b1 * static_cast<double>(m.d[i]) + (1.0 - b1) * gi;
        const double vi = b2 * static_cast<double>(v.d[i]) + (1.0 - b2) * gi * gi;
        m.d[i] = static_cast<S>(mi);
        v.d[i] = static_cast<S>(vi);
        double upd = lr * (mi / bias1) / (std::sqrt(vi / bias2) + cfg.adam_eps);
        if (weight_decay > 0) upd += lr * weight_decay * static_cast<double>(p.d[i]);
        p.d[i] = static_cast<S>(static_cast<double>(p.d[i]) - upd);
    }
}

template <class S>
double global_grad_norm(Parameters<S>& grads) {
    double sq = 0;
    grads.visit([&sq](const std::string&, Matrix<S>& g, bool) {
        for (const S& x : g.d) sq += static_cast<double>(x) * static_cast<double>(x);
    });
    return std::sqrt(sq);
}

// One Adam update with decoupled weight decay. Advances state.step and uses
// lr_at(cfg, state.step). Aborts (throws) on non-finite gradients, naming the
// offending tensor.
template <class S>
double adam_step(Parameters<S>& params, Parameters<S>& grads, AdamState<S>& state, const TrainConfig& cfg) {
    grads.visit([](const std::string& name, Matrix<S>& g, bool) {
        for (const S& x : g.d)
            if (!std::isfinite(static_cast<double>(x))) fail("non-finite gradient in " + name);
    });

    if (cfg.grad_clip > 0) {
        const double norm = global_grad_norm(grads);
        if (norm > cfg.grad_clip) {
            const S scale = static_cast<S>(cfg.grad_clip / norm);
            grads.visit([scale](const std::string&, Matrix<S>& g, bool) {
                for (S& x : g.d) x *= scale;
            });
        }
    }

    state.step += 1;
    const double lr = lr_at(cfg, state.step);
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double bias1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bias2 = 1.0 - std::pow(b2, static_cast<double>(state.step));

    // walk the three containers in lockstep (visit order is fixed)
    std::vector<Matrix<S>*> pm, gm, mm, vm;
    std::vector<bool> decay;
    params.visit([&](const std::string&, Matrix<S>& t, bool d) {
        pm.push_back(&t);
        decay.push_back(d);
    });
    grads.visit([&](const std::string&, Matrix<S>& t, bool) { gm.push_back(&t); });
    state.m.visit([&](const std::string&, Matrix<S>& t, bool) { mm.push_back(&t); });
    state.v.visit([&](const std::string&, Matrix<S>& t, bool) { vm.push_back(&t); });
    require(pm.size() == gm.size() && pm.size() == mm.size() && pm.size() == vm.size(),
            "parameter/gradient/optimizer shape mismatch");

    for (size_t k = 0; k < pm.size(); ++k) {
        adam_update_tensor(*pm[k], *gm[k], *mm[k], *vm[k], cfg, lr, bias1, bias2,
                           decay[k] ? cfg.weight_decay : 0.0);
    }
    return lr;
}

// ---------------------------------------------------------------------------
// Pre-training loop
// ---------------------------------------------------------------------------

struct StepMetrics {
    int64_t step = 0;
    LossStat ae, par;
    double objective = 0;
    double lr = 0;
    int empty_target_instances = 0;
};

struct PretrainSettings {
    ObjectiveKind objective = ObjectiveKind::ae_par;
    MaskSamplerOptions sampler;
    CorruptionPolicy corruption;
    double init_std = 0.02;
};

// Owns parameters + optimizer state and exposes a deterministic, functionally
// seeded step: example order, masking, corruption and dropout at step k are
// pure functions of (seed, k), so a resumed run replays identically.
template <class S = float>
class Pretrainer {
public:
    Pretrainer(std::vector<PackedInput> pairs, Vocab vocab, ModelConfig model_cfg,
               TrainConfig train_cfg, PretrainSettings settings)
        : pairs_(std::move(pairs)),
          vocab_(std::move(vocab)),
          model_cfg_(model_cfg),
          train_cfg_(train_cfg),
          settings_(settings) {
        require(!pairs_.empty(), "no training pairs");
        require(model_cfg_.vocab_size == vocab_.size(), "model vocab size != vocab size");
        model_cfg_.validate();
        train_cfg_.validate();
        Rng rng(Rng::derive(train_cfg_.seed, 0x1417ULL));
        params_ = Parameters<S>::init(model_cfg_, rng, settings_.init_std);
        opt_ = AdamState<S>::init(params_);
    }

    Parameters<S>& params() { return params_; }
    const Vocab& vocab() const { return vocab_; }
    const ModelConfig& model_config() const { return model_cfg_; }
    const TrainConfig& train_config() const { return train_cfg_; }
    AdamState<S>& optimizer() { return opt_; }
    int64_t step() const { return opt_.step; }

    // Resume support: sampling is functional in (seed, step), so restoring
    // parameters + optimizer state replays the run bit-identically.
    void restore(Parameters<S> params, AdamState<S> opt) {
        params_ = std::move(params);
        opt_ = std::move(opt);
    }

    // Builds the instances for one step's batch (also used by audits).
    struct BatchItem {
        PmlmInstance instance;
        FactorizationOrder order;
    };
    std::vector<BatchItem> make_batch(int64_t step_index) const {
        std::vector<BatchItem> batch;
        const ObjectiveKind obj = settings_.objective;
        MaskSamplerOptions sampler = settings_.sampler;
        if (singleton_steps(obj)) sampler.block_prob = 0.0;
        for (int b = 0; b < train_cfg_.batch_size; ++b) {
            const int64_t counter =
                (step_index - 1) * train_cfg_.batch_size + b;  // global example counter
            const size_t idx = epoch_index(counter);
            Rng rng(Rng::derive(train_cfg_.seed, 0x5a5a5a5aULL, static_cast<uint64_t>(counter)));
            const PackedInput& x = pairs_[idx];
            BatchItem item;
            item.order = sample_blockwise_mask(x, rng, sampler);
            const CorruptionPlan plan = plan_corruption(item.order, vocab_, rng, settings_.corruption);
            item.instance = appends_pseudo(obj)
                                ? assemble_pmlm_input(x, item.order, plan, vocab_)
                                : build_cloze_instance(x, item.order, plan);
            batch.push_back(std::move(item));
        }
        return batch;
    }

    StepMetrics run_step() {
        const int64_t step_index = opt_.step + 1;
        std::vector<BatchItem> batch = make_batch(step_index);
        const ObjectiveKind obj = settings_.objective;

        // forward all instances once, collecting target counts for the
        // per-batch mean normalization
        std::vector<ForwardCache<S>> caches(batch.size());
        std::vector<Matrix<S>> tops(batch.size());
        Rng drop_rng(Rng::derive(train_cfg_.seed, 0xd20dULL, static_cast<uint64_t>(step_index)));
        ForwardOptions fwd{true, &drop_rng};
        StepMetrics metrics;
        metrics.step = step_index;
        int ae_count = 0, par_count = 0;
        for (size_t i = 0; i < batch.size(); ++i) {
            tops[i] = forward(batch[i].instance, params_, model_cfg_, fwd, &caches[i]);
            if (uses_ae_loss(obj)) ae_count += static_cast<int>(batch[i].instance.ae_targets.size());
            if (uses_par_loss(obj)) par_count += static_cast<int>(batch[i].instance.par_targets.size());
            if (batch[i].instance.ae_targets.empty() && batch[i].instance.par_targets.empty())
                ++metrics.empty_target_instances;
        }

        Parameters<S> grads = Parameters<S>::zeros_like(params_);
        for (size_t i = 0; i < batch.size(); ++i) {
            const PmlmInstance& inst = batch[i].instance;
            Matrix<S> dh(inst.rows(), model_cfg_.hidden);
            if (uses_ae_loss(obj) && ae_count > 0)
                metrics.ae += cross_entropy_rows(tops[i], params_, inst.ae_targets, 0.0, &dh, &grads,
                                                 1.0 / ae_count);
            if (uses_par_loss(obj) && par_count > 0)
                metrics.par += cross_entropy_rows(tops[i], params_, inst.par_targets, 0.0, &dh, &grads,
                                                  1.0 / par_count);
            backward(inst, params_, model_cfg_, caches[i], dh, grads);
        }

        metrics.objective = metrics.ae.mean() + metrics.par.mean();
        metrics.lr = adam_step(params_, grads, opt_, train_cfg_);
        return metrics;
    }

private:
    // Example order: a fresh seeded shuffle every epoch (one pass over pairs);
    // masking is re-sampled every pass via the per-example counter seed.
    size_t epoch_index(int64_t counter) const {
        const int64_t n = static_cast<int64_t>(pairs_.size());
        const int64_t epoch = counter / n;
        const int64_t offset = counter % n;
        if (epoch != cached_epoch_) {
            cached_perm_.resize(static_cast<size_t>(n));
            std::iota(cached_perm_.begin(), cached_perm_.end(), 0);
            Rng rng(Rng::derive(train_cfg_.seed, 0x0e0cULL, static_cast<uint64_t>(epoch)));
            for (int64_t i = n - 1; i > 0; --i) {
                const int j = rng.rand_int(0, static_cast<int>(i));
                std::swap(cached_perm_[static_cast<size_t>(i)], cached_perm_[static_cast<size_t>(j)]);
            }
            cached_epoch_ = epoch;
        }
        return cached_perm_[static_cast<size_t>(offset)];
    }

    std::vector<PackedInput> pairs_;
    Vocab vocab_;
    ModelConfig model_cfg_;
    TrainConfig train_cfg_;
    PretrainSettings settings_;
    Parameters<S> params_;
    AdamState<S> opt_;
    mutable int64_t cached_epoch_ = -1;
    mutable std::vector<size_t> cached_perm_;
};

}  // namespace pmlm
