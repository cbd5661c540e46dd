#pragma once

// Resolved run configuration: model + training + sampling + paths, written
// next to every run's outputs so the run can be replayed bit-identically in
// deterministic mode. Flat "key=value" text, '#' comments.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "pmlm/common.hpp"
#include "pmlm/masking.hpp"
#include "pmlm/model.hpp"
#include "pmlm/objectives.hpp"

namespace pmlm {

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    MaskSamplerOptions sampler;
    CorruptionPolicy corruption;
    ObjectiveKind objective = ObjectiveKind::ae_par;
    int max_len = 128;
    bool lowercase = true;
    TokenMode token_mode = TokenMode::word;
    bool deterministic = true;
    double init_std = 0.02;
    double label_smoothing = 0.1;  // seq2seq fine-tuning
    // decoding defaults
    int beam_size = 5;
    double length_penalty = 0.7;
    int max_output_length = 48;

    std::map<std::string, std::string> to_map() const {
        std::map<std::string, std::string> m;
        const auto put = [&m](const std::string& k, auto v) {
            std::ostringstream os;
            os << v;
            m[k] = os.str();
        };
        put("layers", model.layers);
        put("hidden_size", model.hidden);
        put("attention_heads", model.heads);
        put("ffn_inner_hidden_size", model.ffn_hidden);
        put("vocab_size", model.vocab_size);
        put("max_positions", model.max_positions);
        put("relative_bias", model.use_relative_bias ? 1 : 0);
        put("relative_buckets", model.rel_buckets);
        put("max_relative_position", model.max_relative_distance);
        put("dropout", model.dropout);
        put("batch_size", train.batch_size);
        put("learning_rate", train.peak_lr);
        put("warmup_steps", train.resolved_warmup());
        put("warmup_ratio", train.warmup_ratio);
        put("training_steps", train.total_steps);
        put("adam_beta1", train.adam_beta1);
        put("adam_beta2", train.adam_beta2);
        put("adam_epsilon", train.adam_eps);
        put("weight_decay", train.weight_decay);
        put("gradient_clipping", train.grad_clip);
        put("seed", train.seed);
        put("mask_ratio", sampler.mask_ratio);
        put("block_prob", sampler.block_prob);
        put("block_min", sampler.block_min);
        put("block_max", sampler.block_max);
        put("corrupt_mask_prob", corruption.p_mask);
        put("corrupt_random_prob", corruption.p_random);
        put("objective", to_string(objective));
        put("max_len", max_len);
        put("lowercase", lowercase ? 1 : 0);
        put("token_mode", token_mode == TokenMode::word ? "word" : "char");
        put("deterministic", deterministic ? 1 : 0);
        put("init_std", init_std);
        put("label_smoothing", label_smoothing);
        put("beam_size", beam_size);
        put("length_penalty", length_penalty);
        put("max_output_length", max_output_length);
        return m;
    }

    void apply(const std::map<std::string, std::string>& m) {
        const auto geti = [&m](const std::string& k, int& out) {
            auto it = m.find(k);
            if (it != m.end()) out = std::stoi(it->second);
        };
        const auto geti64 = [&m](const std::string& k, int64_t& out) {
            auto it = m.find(k);
            if (it != m.end()) out = std::stoll(it->second);
        };
        const auto getu64 = [&m](const std::string& k, uint64_t& out) {
            auto it = m.find(k);
            if (it != m.end()) out = std::stoull(it->second);
        };
        const auto getd = [&m](const std::string& k, double& out) {
            auto it = m.find(k);
            if (it != m.end()) out = std::stod(it->second);
        };
        const auto getb = [&m](const std::string& k, bool& out) {
            auto it = m.find(k);
            if (it != m.end()) out = it->second == "1" || it->second == "true";
        };
        geti("layers", model.layers);
        geti("hidden_size", model.hidden);
        geti("attention_heads", model.heads);
        geti("ffn_inner_hidden_size", model.ffn_hidden);
        geti("vocab_size", model.vocab_size);
        geti("max_positions", model.max_positions);
        getb("relative_bias", model.use_relative_bias);
        geti("relative_buckets", model.rel_buckets);
        geti("max_relative_position", model.max_relative_distance);
        getd("dropout", model.dropout);
        geti("batch_size", train.batch_size);
        getd("learning_rate", train.peak_lr);
        if (m.count("warmup_steps")) {
            int w = -1;
            geti("warmup_steps", w);
            train.warmup_steps = w;
        }
        getd("warmup_ratio", train.warmup_ratio);
        geti64("training_steps", train.total_steps);
        getd("adam_beta1", train.adam_beta1);
        getd("adam_beta2", train.adam_beta2);
        getd("adam_epsilon", train.adam_eps);
        getd("weight_decay", train.weight_decay);
        getd("gradient_clipping", train.grad_clip);
        getu64("seed", train.seed);
        getd("mask_ratio", sampler.mask_ratio);
        getd("block_prob", sampler.block_prob);
        geti("block_min", sampler.block_min);
        geti("block_max", sampler.block_max);
        getd("corrupt_mask_prob", corruption.p_mask);
        getd("corrupt_random_prob", corruption.p_random);
        if (m.count("objective")) objective = parse_objective(m.at("objective"));
        geti("max_len", max_len);
        getb("lowercase", lowercase);
        if (m.count("token_mode")) {
            const std::string& v = m.at("token_mode");
            require(v == "word" || v == "char", "token_mode must be word or char");
            token_mode = v == "word" ? TokenMode::word : TokenMode::chars;
        }
        getb("deterministic", deterministic);
        getd("init_std", init_std);
        getd("label_smoothing", label_smoothing);
        geti("beam_size", beam_size);
        getd("length_penalty", length_penalty);
        geti("max_output_length", max_output_length);
    }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        require(os.good(), "cannot write run config: " + path);
        for (const auto& [k, v] : to_map()) os << k << '=' << v << '\n';
    }

    static std::map<std::string, std::string> parse_file(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        require(is.good(), "cannot open config file: " + path);
        std::map<std::string, std::string> m;
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            const auto first = line.find_first_not_of(" \t");
            if (first == std::string::npos) continue;
            const auto eq = line.find('=');
            require(eq != std::string::npos,
                    "config " + path + ":" + std::to_string(lineno) + ": expected key=value");
            const auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t");
                const auto e = s.find_last_not_of(" \t");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            m[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
        }
        return m;
    }

    static RunConfig load(const std::string& path) {
        RunConfig cfg;
        cfg.apply(parse_file(path));
        return cfg;
    }
};

}  // namespace pmlm
