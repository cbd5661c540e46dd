#pragma once

// Fine-tuning of a pre-trained checkpoint: classification over the [SOS]
// encoding, sequence-to-sequence training over pseudo-mask rows with label
// smoothing, and beam-search decoding with GNMT length penalty
// lp(len) = ((5+len)/6)^alpha and [EOS] termination.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pmlm/assembly.hpp"
#include "pmlm/common.hpp"
#include "pmlm/model.hpp"
#include "pmlm/objectives.hpp"
#include "pmlm/rng.hpp"
#include "pmlm/vocab.hpp"

namespace pmlm {

// "[SOS] TEXT [EOS]", one segment, full bidirectional attention.
inline PmlmInstance build_classification_input(const std::vector<int>& text_ids, int max_len) {
    require(static_cast<int>(text_ids.size()) + 2 <= max_len,
            "sequence too long: classification input needs " +
                std::to_string(text_ids.size() + 2) + " > max_len " + std::to_string(max_len));
    PmlmInstance inst;
    int pos = 0;
    const auto push = [&](int tok) {
        inst.token_ids.push_back(tok);
        inst.position_ids.push_back(pos++);
        inst.segment_ids.push_back(0);
        inst.categories.push_back({TokenCategory::context, 0});
    };
    push(kSosId);
    for (int id : text_ids) push(id);
    push(kEosId);
    inst.attention_mask = build_attention_mask(inst.categories);
    return inst;
}

template <class S>
struct ClassifierHead {
    Matrix<S> w;  // hidden x labels
    Matrix<S> b;  // 1 x labels

    int labels() const { return w.cols; }

    // zero-mean init, variance 2 / (fan_in + fan_out)
    static ClassifierHead init(int hidden, int labels, Rng& rng) {
        ClassifierHead h;
        h.w = Matrix<S>(hidden, labels);
        h.b = Matrix<S>(1, labels);
        const double std = std::sqrt(2.0 / (hidden + labels));
        for (auto& x : h.w.d) x = static_cast<S>(rng.gaussian(0.0, std));
        return h;
    }
};

struct ClsExample {
    std::vector<int> text_ids;
    int label = 0;
};

struct Seq2SeqExample {
    std::vector<int> src, tgt;
};

struct FinetuneMetrics {
    int64_t step = 0;
    double loss = 0;
    double accuracy = 0;  // batch accuracy (classification only)
    double lr = 0;
};

// Classification logits from the [SOS] top hidden state.
template <class S>
std::vector<double> classifier_logits(const Matrix<S>& h_top, const ClassifierHead<S>& head) {
    std::vector<double> logits(static_cast<size_t>(head.labels()));
    for (int l = 0; l < head.labels(); ++l) {
        double acc = static_cast<double>(head.b.d[static_cast<size_t>(l)]);
        for (int i = 0; i < head.w.rows; ++i)
            acc += static_cast<double>(h_top.at(0, i)) * static_cast<double>(head.w.at(i, l));
        logits[static_cast<size_t>(l)] = acc;
    }
    return logits;
}

// Cross-entropy over labels; fills dh0 (d(loss)/d(h[SOS])) and head grads.
template <class S>
double classifier_loss_row(const Matrix<S>& h_top, const ClassifierHead<S>& head, int label,
                           double grad_scale, Matrix<S>* dh, ClassifierHead<S>* head_grads,
                           bool* correct = nullptr) {
    require(label >= 0 && label < head.labels(), "label out of range: " + std::to_string(label));
    std::vector<double> logits = classifier_logits(h_top, head);
    const double best = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (double v : logits) z += std::exp(v - best);
    const double log_z = std::log(z) + best;
    if (correct) {
        const auto arg = std::max_element(logits.begin(), logits.end()) - logits.begin();
        *correct = static_cast<int>(arg) == label;
    }
    const double loss = log_z - logits[static_cast<size_t>(label)];
    if (dh != nullptr && head_grads != nullptr) {
        for (int l = 0; l < head.labels(); ++l) {
            const double p = std::exp(logits[static_cast<size_t>(l)] - log_z);
            const double dl = (p - (l == label ? 1.0 : 0.0)) * grad_scale;
            head_grads->b.d[static_cast<size_t>(l)] += static_cast<S>(dl);
            for (int i = 0; i < head.w.rows; ++i) {
                head_grads->w.at(i, l) += static_cast<S>(dl * static_cast<double>(h_top.at(0, i)));
                dh->at(0, i) += static_cast<S>(dl * static_cast<double>(head.w.at(i, l)));
            }
        }
    }
    return loss;
}

// Fine-tunes body + head (or head only) with Adam; one epoch pass order per
// shuffle seed, batches of train.batch_size.
template <class S>
class ClassifierTrainer {
public:
    ClassifierTrainer(Parameters<S>* params, const ModelConfig& model_cfg, TrainConfig train_cfg,
                      int num_labels, int max_len, bool freeze_body = false)
        : params_(params),
          model_cfg_(model_cfg),
          train_cfg_(train_cfg),
          max_len_(max_len),
          freeze_body_(freeze_body) {
        train_cfg_.validate();
        Rng rng(Rng::derive(train_cfg_.seed, 0xc1a55ULL));
        head_ = ClassifierHead<S>::init(model_cfg_.hidden, num_labels, rng);
        opt_ = AdamState<S>::init(*params_);
        head_m_ = ClassifierHead<S>{Matrix<S>(model_cfg_.hidden, num_labels), Matrix<S>(1, num_labels)};
        head_v_ = ClassifierHead<S>{Matrix<S>(model_cfg_.hidden, num_labels), Matrix<S>(1, num_labels)};
    }

    ClassifierHead<S>& head() { return head_; }

    FinetuneMetrics run_step(const std::vector<ClsExample>& data) {
        require(!data.empty(), "no classification examples");
        const int64_t step_index = opt_.step + 1;
        Parameters<S> grads = Parameters<S>::zeros_like(*params_);
        ClassifierHead<S> hg{Matrix<S>(head_.w.rows, head_.w.cols), Matrix<S>(1, head_.b.cols)};

        FinetuneMetrics metrics;
        metrics.step = step_index;
        int correct_count = 0;
        Rng drop_rng(Rng::derive(train_cfg_.seed, 0xd401ULL, static_cast<uint64_t>(step_index)));
        const int B = train_cfg_.batch_size;
        for (int b = 0; b < B; ++b) {
            const int64_t counter = (step_index - 1) * B + b;
            const auto& ex = data[static_cast<size_t>(counter % static_cast<int64_t>(data.size()))];
            const PmlmInstance inst = build_classification_input(ex.text_ids, max_len_);
            ForwardCache<S> cache;
            ForwardOptions fwd{true, &drop_rng};
            const Matrix<S> top = forward(inst, *params_, model_cfg_, fwd, &cache);
            Matrix<S> dh(inst.rows(), model_cfg_.hidden);
            bool correct = false;
            metrics.loss +=
                classifier_loss_row(top, head_, ex.label, 1.0 / B, &dh, &hg, &correct) / B;
            correct_count += correct ? 1 : 0;
            if (!freeze_body_) backward(inst, *params_, model_cfg_, cache, dh, grads);
        }
        metrics.accuracy = static_cast<double>(correct_count) / B;

        opt_.step += 1;
        const double lr = lr_at(train_cfg_, opt_.step);
        const double bias1 = 1.0 - std::pow(train_cfg_.adam_beta1, static_cast<double>(opt_.step));
        const double bias2 = 1.0 - std::pow(train_cfg_.adam_beta2, static_cast<double>(opt_.step));
        if (!freeze_body_) {
            opt_.step -= 1;  // adam_step advances it
            metrics.lr = adam_step(*params_, grads, opt_, train_cfg_);
        } else {
            metrics.lr = lr;
        }
        adam_update_tensor(head_.w, hg.w, head_m_.w, head_v_.w, train_cfg_, lr, bias1, bias2,
                           train_cfg_.weight_decay);
        adam_update_tensor(head_.b, hg.b, head_m_.b, head_v_.b, train_cfg_, lr, bias1, bias2, 0.0);
        return metrics;
    }

    // accuracy over a dataset, eval mode
    double evaluate(const std::vector<ClsExample>& data) {
        int correct = 0;
        for (const auto& ex : data) {
            const PmlmInstance inst = build_classification_input(ex.text_ids, max_len_);
            const Matrix<S> top = forward(inst, *params_, model_cfg_);
            const std::vector<double> logits = classifier_logits(top, head_);
            const auto arg = std::max_element(logits.begin(), logits.end()) - logits.begin();
            correct += static_cast<int>(arg) == ex.label ? 1 : 0;
        }
        return static_cast<double>(correct) / static_cast<double>(data.size());
    }

private:
    Parameters<S>* params_;
    ModelConfig model_cfg_;
    TrainConfig train_cfg_;
    int max_len_;
    bool freeze_body_;
    ClassifierHead<S> head_, head_m_, head_v_;
    AdamState<S> opt_;
};

// Seq2seq fine-tuning: label-smoothed cross-entropy at every pseudo row
// (each target token and the terminal [EOS]).
template <class S>
class Seq2SeqTrainer {
public:
    Seq2SeqTrainer(Parameters<S>* params, const ModelConfig& model_cfg, TrainConfig train_cfg,
                   int max_len, double label_smoothing = 0.1)
        : params_(params),
          model_cfg_(model_cfg),
          train_cfg_(train_cfg),
          max_len_(max_len),
          smoothing_(label_smoothing) {
        train_cfg_.validate();
        opt_ = AdamState<S>::init(*params_);
    }

    // drops pairs that do not fit the length budget; returns the dropped count
    int filter_pairs(std::vector<Seq2SeqExample>& pairs) const {
        const auto fits = [this](const Seq2SeqExample& e) {
            return static_cast<int>(e.src.size() + 2 * e.tgt.size()) + 5 <= max_len_;
        };
        const auto n0 = pairs.size();
        pairs.erase(std::remove_if(pairs.begin(), pairs.end(),
                                   [&](const Seq2SeqExample& e) { return !fits(e); }),
                    pairs.end());
        return static_cast<int>(n0 - pairs.size());
    }

    FinetuneMetrics run_step(const std::vector<Seq2SeqExample>& pairs) {
        require(!pairs.empty(), "no seq2seq pairs");
        const int64_t step_index = opt_.step + 1;
        Parameters<S> grads = Parameters<S>::zeros_like(*params_);
        FinetuneMetrics metrics;
        metrics.step = step_index;

        Rng drop_rng(Rng::derive(train_cfg_.seed, 0xd402ULL, static_cast<uint64_t>(step_index)));
        const int B = train_cfg_.batch_size;
        std::vector<PmlmInstance> insts;
        std::vector<ForwardCache<S>> caches(static_cast<size_t>(B));
        std::vector<Matrix<S>> tops(static_cast<size_t>(B));
        int total_targets = 0;
        for (int b = 0; b < B; ++b) {
            const int64_t counter = (step_index - 1) * B + b;
            const auto& ex = pairs[static_cast<size_t>(counter % static_cast<int64_t>(pairs.size()))];
            insts.push_back(build_seq2seq_input(ex.src, ex.tgt, max_len_));
            total_targets += static_cast<int>(insts.back().par_targets.size());
        }
        for (int b = 0; b < B; ++b) {
            ForwardOptions fwd{true, &drop_rng};
            tops[static_cast<size_t>(b)] =
                forward(insts[static_cast<size_t>(b)], *params_, model_cfg_, fwd,
                        &caches[static_cast<size_t>(b)]);
        }
        LossStat stat;
        for (int b = 0; b < B; ++b) {
            const PmlmInstance& inst = insts[static_cast<size_t>(b)];
            Matrix<S> dh(inst.rows(), model_cfg_.hidden);
            stat += cross_entropy_rows(tops[static_cast<size_t>(b)], *params_, inst.par_targets,
                                       smoothing_, &dh, &grads, 1.0 / total_targets);
            backward(inst, *params_, model_cfg_, caches[static_cast<size_t>(b)], dh, grads);
        }
        metrics.loss = stat.mean();
        metrics.lr = adam_step(*params_, grads, opt_, train_cfg_);
        return metrics;
    }

private:
    Parameters<S>* params_;
    ModelConfig model_cfg_;
    TrainConfig train_cfg_;
    int max_len_;
    double smoothing_;
    AdamState<S> opt_;
};

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

struct BeamParams {
    int beam_size = 5;
    double alpha = 0.7;   // length-penalty exponent
    int max_out = 48;     // output budget, [EOS] included
};

inline double length_penalty(int len, double alpha) {
    return std::pow((5.0 + len) / 6.0, alpha);
}

// Next-token log-probabilities for src + generated prefix (one [P] row).
template <class S>
std::vector<double> decode_step_logprobs(const Parameters<S>& params, const ModelConfig& cfg,
                                         const std::vector<int>& src, const std::vector<int>& prefix) {
    const PmlmInstance inst = build_decode_instance(src, prefix, cfg.max_positions);
    const Matrix<S> top = forward(inst, params, cfg);
    const std::vector<S> logits = logits_row(params, top.row(inst.rows() - 1));
    double best = static_cast<double>(logits[0]);
    for (const S& v : logits) best = std::max(best, static_cast<double>(v));
    double z = 0;
    for (const S& v : logits) z += std::exp(static_cast<double>(v) - best);
    const double log_z = std::log(z) + best;
    std::vector<double> lp(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) lp[i] = static_cast<double>(logits[i]) - log_z;
    return lp;
}

struct BeamHypothesis {
    std::vector<int> tokens;  // generated tokens, [EOS] excluded
    double log_prob = 0.0;
    bool finished = false;

    double score(double alpha) const {
        return log_prob / length_penalty(static_cast<int>(tokens.size()) + (finished ? 1 : 0), alpha);
    }
};

struct DecodeResult {
    std::vector<int> tokens;  // generated tokens, [EOS] excluded
    double score = 0;         // penalized score of the returned hypothesis
    bool finished = false;    // whether it emitted [EOS]
};

// Beam search generating target tokens one by one; each step appends the
// chosen token as an ordinary target token and places a fresh [P] at the next
// position. A hypothesis is frozen once it emits [EOS]. Returns the generated
// tokens (without [EOS]) of the best penalized hypothesis.
template <class S>
DecodeResult decode_beam_scored(const Parameters<S>& params, const ModelConfig& cfg,
                                const std::vector<int>& src, const BeamParams& bp) {
    require(bp.beam_size >= 1, "beam size must be >= 1");
    require(bp.max_out >= 1, "max_out must be >= 1");
    std::vector<BeamHypothesis> live{BeamHypothesis{}};
    std::vector<BeamHypothesis> finished;

    for (int step = 0; step < bp.max_out && !live.empty(); ++step) {
        struct Candidate {
            int hyp;
            int token;
            double log_prob;
            double score;
        };
        std::vector<Candidate> cands;
        for (size_t h = 0; h < live.size(); ++h) {
            const std::vector<double> lp = decode_step_logprobs(params, cfg, src, live[h].tokens);
            for (int tok = 0; tok < static_cast<int>(lp.size()); ++tok) {
                if (tok == kPadId || tok == kSosId || tok == kMaskId || tok == kPseudoId) continue;
                const double total = live[h].log_prob + lp[static_cast<size_t>(tok)];
                const double score = total / length_penalty(step + 1, bp.alpha);
                cands.push_back({static_cast<int>(h), tok, total, score});
            }
        }
        std::stable_sort(cands.begin(), cands.end(),
                         [](const Candidate& a, const Candidate& b) { return a.score > b.score; });

        std::vector<BeamHypothesis> next;
        int taken = 0;
        for (const Candidate& c : cands) {
            if (taken >= bp.beam_size) break;
            BeamHypothesis h = live[static_cast<size_t>(c.hyp)];
            h.log_prob = c.log_prob;
            if (c.token == kEosId) {
                h.finished = true;  // frozen: no tokens appended past [EOS]
                finished.push_back(h);
            } else {
                h.tokens.push_back(c.token);
                next.push_back(h);
            }
            ++taken;
        }
        live = std::move(next);
    }

    const BeamHypothesis* best = nullptr;
    for (const auto& h : finished)
        if (!best || h.score(bp.alpha) > best->score(bp.alpha)) best = &h;
    if (!best)
        for (const auto& h : live)
            if (!best || h.score(bp.alpha) > best->score(bp.alpha)) best = &h;
    require(best != nullptr, "beam search produced no hypotheses");
    return {best->tokens, best->score(bp.alpha), best->finished};
}

template <class S>
std::vector<int> decode_beam(const Parameters<S>& params, const ModelConfig& cfg,
                             const std::vector<int>& src, const BeamParams& bp) {
    return decode_beam_scored(params, cfg, src, bp).tokens;
}

// Greedy argmax chain; reference path for the beam=1 contract.
template <class S>
std::vector<int> decode_greedy(const Parameters<S>& params, const ModelConfig& cfg,
                               const std::vector<int>& src, int max_out) {
    std::vector<int> out;
    for (int step = 0; step < max_out; ++step) {
        const std::vector<double> lp = decode_step_logprobs(params, cfg, src, out);
        int best_tok = -1;
        double best = 0;
        for (int tok = 0; tok < static_cast<int>(lp.size()); ++tok) {
            if (tok == kPadId || tok == kSosId || tok == kMaskId || tok == kPseudoId) continue;
            if (best_tok < 0 || lp[static_cast<size_t>(tok)] > best) {
                best_tok = tok;
                best = lp[static_cast<size_t>(tok)];
            }
        }
        if (best_tok == kEosId) break;
        out.push_back(best_tok);
    }
    return out;
}

}  // namespace pmlm
