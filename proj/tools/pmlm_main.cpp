// pmlm command-line tool: vocabulary building, mask inspection, pre-training,
// fine-tuning, generation, and the verification suites.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pmlm/assembly.hpp"
#include "pmlm/checkpoint.hpp"
#include "pmlm/common.hpp"
#include "pmlm/corpus.hpp"
#include "pmlm/finetune.hpp"
#include "pmlm/masking.hpp"
#include "pmlm/model.hpp"
#include "pmlm/objectives.hpp"
#include "pmlm/rng.hpp"
#include "pmlm/run_config.hpp"
#include "pmlm/verification.hpp"
#include "pmlm/vocab.hpp"

namespace fs = std::filesystem;
using namespace pmlm;

namespace {

uint64_t default_seed() {
    if (const char* env = std::getenv("PMLM_SEED")) return std::strtoull(env, nullptr, 10);
    return 42;
}

std::vector<std::string> corpus_files(const std::string& path) {
    std::vector<std::string> files;
    if (fs::is_directory(path)) {
        for (const auto& e : fs::directory_iterator(path))
            if (e.is_regular_file()) files.push_back(e.path().string());
        std::sort(files.begin(), files.end());
        require(!files.empty(), "corpus directory is empty: " + path);
    } else {
        require(fs::exists(path), "corpus path does not exist: " + path);
        files.push_back(path);
    }
    return files;
}

std::vector<PackedInput> load_pairs(const std::string& corpus_path, const Vocab& vocab,
                                    const TokenizerOptions& topts, int max_len,
                                    PairingStats* stats) {
    std::vector<PackedInput> pairs;
    for (const auto& file : corpus_files(corpus_path)) {
        DocumentStream docs(file);
        std::string text;
        while (docs.next(text)) {
            auto batch = make_training_pairs(text, vocab, topts, max_len, stats);
            pairs.insert(pairs.end(), batch.begin(), batch.end());
        }
    }
    require(!pairs.empty(), "corpus produced no training pairs");
    return pairs;
}

Vocab build_vocab_from_corpus(const std::string& corpus_path, int max_size,
                              const TokenizerOptions& topts) {
    std::ostringstream all;
    for (const auto& file : corpus_files(corpus_path)) {
        std::ifstream in(file, std::ios::binary);
        require(in.good(), "cannot open corpus file: " + file);
        all << in.rdbuf() << '\n';
    }
    std::istringstream stream(all.str());
    return Vocab::build(stream, max_size, topts);
}

void write_checkpoint(const std::string& path, const RunConfig& rc, const Parameters<float>& params,
                      const AdamState<float>* opt, const ClassifierHead<float>* head = nullptr,
                      const std::vector<std::string>& labels = {}) {
    Checkpoint ck;
    ck.header = rc.to_map();
    ck.header["optimizer_step"] = std::to_string(opt ? opt->step : 0);
    ck.add_parameters("", params);
    if (opt) {
        ck.add_parameters("adam.m.", opt->m);
        ck.add_parameters("adam.v.", opt->v);
    }
    if (head) {
        ck.add("cls.w", head->w);
        ck.add("cls.b", head->b);
        std::string joined;
        for (const auto& l : labels) joined += (joined.empty() ? "" : ",") + l;
        ck.header["cls_labels"] = joined;
    }
    ck.save(path);
}

struct LoadedModel {
    RunConfig rc;
    Parameters<float> params;
    int64_t optimizer_step = 0;
};

LoadedModel load_model(const std::string& path) {
    const Checkpoint ck = Checkpoint::load(path);
    LoadedModel lm;
    lm.rc.apply(ck.header);
    lm.params = Parameters<float>::shaped(lm.rc.model);
    ck.load_parameters("", lm.params);
    if (ck.header.count("optimizer_step"))
        lm.optimizer_step = std::stoll(ck.header.at("optimizer_step"));
    return lm;
}

Vocab load_vocab_for(const std::string& checkpoint_path, const std::string& vocab_flag) {
    if (!vocab_flag.empty()) return Vocab::load(vocab_flag);
    const fs::path sibling = fs::path(checkpoint_path).parent_path() / "vocab.txt";
    require(fs::exists(sibling),
            "no vocab file found next to the checkpoint; pass --vocab explicitly");
    return Vocab::load(sibling.string());
}

// Shared input packing for sample-mask / audit-mask.
struct MaskInspectArgs {
    std::string vocab_path;
    std::string text, text2;
    uint64_t seed = 42;
    int max_len = 512;
    double mask_ratio = 0.15;
    double block_prob = 0.4;
    bool keep_case = false;
    bool char_mode = false;
};

struct MaskInspectCase {
    Vocab vocab;
    PackedInput x;
    FactorizationOrder order;
    CorruptionPlan plan;
};

MaskInspectCase build_mask_case(const MaskInspectArgs& a) {
    MaskInspectCase c{Vocab::load(a.vocab_path), {}, {}, {}};
    TokenizerOptions topts{a.char_mode ? TokenMode::chars : TokenMode::word, !a.keep_case};
    // packed segments must not contain special ids; drop OOV like the
    // pre-training pipeline does
    const auto encode_content = [&](const std::string& text) {
        std::vector<int> ids;
        int dropped = 0;
        for (int id : c.vocab.encode(text, topts)) {
            if (Vocab::is_special(id)) ++dropped;
            else ids.push_back(id);
        }
        if (dropped > 0) std::cerr << "note: dropped " << dropped << " OOV tokens\n";
        return ids;
    };
    const std::vector<int> s1 = encode_content(a.text);
    const std::vector<int> s2 = encode_content(a.text2);
    c.x = pack_pair(s1, s2, a.max_len);
    Rng rng(a.seed);
    MaskSamplerOptions mopts;
    mopts.mask_ratio = a.mask_ratio;
    mopts.block_prob = a.block_prob;
    c.order = sample_blockwise_mask(c.x, rng, mopts);
    c.plan = plan_corruption(c.order, c.vocab, rng);
    return c;
}

void add_mask_inspect_flags(CLI::App* cmd, MaskInspectArgs& a) {
    cmd->add_option("--vocab", a.vocab_path, "vocab file")->required();
    cmd->add_option("--text", a.text, "segment S1 text")->required();
    cmd->add_option("--text2", a.text2, "segment S2 text (optional)");
    cmd->add_option("--seed", a.seed, "rng seed");
    cmd->add_option("--max-len", a.max_len, "max packed length");
    cmd->add_option("--mask-ratio", a.mask_ratio, "masking budget");
    cmd->add_option("--block-prob", a.block_prob, "block-step probability");
    cmd->add_flag("--keep-case", a.keep_case, "disable lowercasing");
    cmd->add_flag("--char-mode", a.char_mode, "character tokenizer");
}

int cmd_build_vocab(const std::string& corpus, const std::string& out, int max_size,
                    bool char_mode, bool keep_case) {
    TokenizerOptions topts{char_mode ? TokenMode::chars : TokenMode::word, !keep_case};
    const Vocab v = build_vocab_from_corpus(corpus, max_size, topts);
    v.save(out);
    std::cerr << "vocab: " << v.size() << " entries -> " << out << "\n";
    return 0;
}

int cmd_sample_mask(const MaskInspectArgs& a) {
    const MaskInspectCase c = build_mask_case(a);
    std::cout << "length=" << c.x.length() << " usable=" << c.x.usable_length()
              << " masked=" << c.order.masked_count() << " steps=" << c.order.num_steps() << "\n";
    size_t flat = 0;
    for (int i = 0; i < c.order.num_steps(); ++i) {
        const MaskStep& s = c.order.steps[static_cast<size_t>(i)];
        std::cout << "step " << (i + 1) << ": positions " << s.begin << ".." << (s.end() - 1)
                  << " actions:";
        for (int p = s.begin; p < s.end(); ++p, ++flat) {
            std::cout << " " << to_string(c.plan.actions[flat]);
            if (c.plan.actions[flat] == CorruptAction::random_token)
                std::cout << "(" << c.vocab.token(c.plan.replacements[flat]) << ")";
        }
        std::cout << "\n";
    }
    return 0;
}

int cmd_audit_mask(const MaskInspectArgs& a) {
    const MaskInspectCase c = build_mask_case(a);
    const PmlmInstance inst = assemble_pmlm_input(c.x, c.order, c.plan, c.vocab);
    std::cout << format_mask_grid(inst, c.vocab);
    const AuditReport report = audit_leakage(inst);
    std::cout << report.to_string(inst);
    return report.pass ? 0 : 1;
}

struct PretrainArgs {
    std::string corpus, out_dir, config_path, vocab_path;
    std::string objective = "ae+par";
    int64_t steps = -1;
    int batch = -1;
    double lr = -1;
    int max_len = -1;
    int vocab_max = 2048;
    uint64_t seed = 0;
    bool seed_set = false;
    int layers = -1, hidden = -1, heads = -1, ffn = -1;
    double dropout = -1;
    int log_every = 20;
    int checkpoint_every = 0;
    bool paper_size = false;
    bool deterministic = false;
    bool char_mode = false;
    bool keep_case = false;
};

int cmd_pretrain(const PretrainArgs& a) {
    RunConfig rc;
    rc.train.seed = default_seed();
    if (!a.config_path.empty()) rc.apply(RunConfig::parse_file(a.config_path));
    // CLI flags override the config file
    rc.objective = parse_objective(a.objective);
    if (a.steps > 0) rc.train.total_steps = a.steps;
    if (a.batch > 0) rc.train.batch_size = a.batch;
    if (a.lr > 0) rc.train.peak_lr = a.lr;
    if (a.max_len > 0) rc.max_len = a.max_len;
    if (a.seed_set) rc.train.seed = a.seed;
    if (a.layers >= 0) rc.model.layers = a.layers;
    if (a.hidden > 0) rc.model.hidden = a.hidden;
    if (a.heads > 0) rc.model.heads = a.heads;
    if (a.ffn > 0) rc.model.ffn_hidden = a.ffn;
    if (a.dropout >= 0) rc.model.dropout = a.dropout;
    if (a.char_mode) rc.token_mode = TokenMode::chars;
    if (a.keep_case) rc.lowercase = false;
    if (a.deterministic) rc.deterministic = true;
    if (a.paper_size) {
        rc.model.layers = 12;
        rc.model.hidden = 768;
        rc.model.heads = 12;
        rc.model.ffn_hidden = 3072;
        rc.model.max_positions = 512;
        std::cerr << "note: paper-size model selected; expect long CPU runs\n";
    }

    fs::create_directories(a.out_dir);
    TokenizerOptions topts{rc.token_mode, rc.lowercase};
    Vocab vocab = a.vocab_path.empty() ? build_vocab_from_corpus(a.corpus, a.vocab_max, topts)
                                       : Vocab::load(a.vocab_path);
    rc.model.vocab_size = vocab.size();
    if (rc.model.max_positions < rc.max_len) rc.model.max_positions = rc.max_len;

    PairingStats pstats;
    std::vector<PackedInput> pairs = load_pairs(a.corpus, vocab, topts, rc.max_len, &pstats);
    std::cerr << "corpus: " << pairs.size() << " packed pairs";
    if (pstats.dropped_oov_tokens > 0) std::cerr << ", " << pstats.dropped_oov_tokens << " OOV tokens dropped";
    if (pstats.truncated_segments > 0) std::cerr << ", " << pstats.truncated_segments << " segments truncated";
    std::cerr << "\n";

    vocab.save((fs::path(a.out_dir) / "vocab.txt").string());
    rc.save((fs::path(a.out_dir) / "run_config.txt").string());

    PretrainSettings settings;
    settings.objective = rc.objective;
    settings.sampler = rc.sampler;
    settings.corruption = rc.corruption;
    settings.init_std = rc.init_std;
    Pretrainer<float> trainer(std::move(pairs), vocab, rc.model, rc.train, settings);

    std::ofstream metrics((fs::path(a.out_dir) / "metrics.log").string());
    const auto emit = [&](const StepMetrics& m) {
        std::ostringstream os;
        os << "step=" << m.step << " loss_ae=" << m.ae.sum << " loss_par=" << m.par.sum
           << " ae_mean=" << m.ae.mean() << " par_mean=" << m.par.mean()
           << " objective=" << m.objective << " lr=" << m.lr;
        if (m.empty_target_instances > 0) os << " empty_target_instances=" << m.empty_target_instances;
        metrics << os.str() << "\n";
        std::cout << os.str() << "\n";
    };

    for (int64_t s = 1; s <= rc.train.total_steps; ++s) {
        const StepMetrics m = trainer.run_step();
        if (s == 1 || s == rc.train.total_steps || (a.log_every > 0 && s % a.log_every == 0)) emit(m);
        if (a.checkpoint_every > 0 && s % a.checkpoint_every == 0) {
            const auto path =
                (fs::path(a.out_dir) / ("checkpoint_" + std::to_string(s) + ".pmlm")).string();
            write_checkpoint(path, rc, trainer.params(), &trainer.optimizer());
            std::cerr << "checkpoint: " << path << "\n";
        }
    }
    const auto final_path = (fs::path(a.out_dir) / "checkpoint_final.pmlm").string();
    write_checkpoint(final_path, rc, trainer.params(), &trainer.optimizer());
    std::cerr << "checkpoint: " << final_path << "\n";
    return 0;
}

std::vector<std::pair<std::string, std::string>> read_tsv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "cannot open data file: " + path);
    std::vector<std::pair<std::string, std::string>> rows;
    std::string line;
    size_t offset = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        validate_utf8(line, offset);
        offset += line.size() + 1;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        require(tab != std::string::npos, "data line missing tab separator: " + line);
        rows.emplace_back(line.substr(0, tab), line.substr(tab + 1));
    }
    require(!rows.empty(), "data file is empty: " + path);
    return rows;
}

int cmd_finetune_cls(const std::string& checkpoint, const std::string& data_path,
                     const std::string& out_dir, const std::string& vocab_flag, int64_t steps,
                     double lr, int batch, bool freeze_body, uint64_t seed, bool seed_set) {
    LoadedModel lm = load_model(checkpoint);
    const Vocab vocab = load_vocab_for(checkpoint, vocab_flag);
    TokenizerOptions topts{lm.rc.token_mode, lm.rc.lowercase};

    std::vector<std::string> label_names;
    std::vector<ClsExample> examples;
    {
        std::map<std::string, int> label_ids;
        for (const auto& [text, label] : read_tsv(data_path)) label_ids.emplace(label, 0);
        for (auto& [name, id] : label_ids) {
            id = static_cast<int>(label_names.size());
            label_names.push_back(name);
        }
        for (const auto& [text, label] : read_tsv(data_path))
            examples.push_back({vocab.encode(text, topts), label_ids.at(label)});
    }
    std::cerr << "classification: " << examples.size() << " examples, " << label_names.size()
              << " labels\n";

    RunConfig rc = lm.rc;
    rc.train.total_steps = steps;
    rc.train.peak_lr = lr;
    rc.train.batch_size = batch;
    rc.train.warmup_steps = -1;
    rc.train.warmup_ratio = 0.1;  // NLU fine-tuning default
    if (seed_set) rc.train.seed = seed;

    ClassifierTrainer<float> trainer(&lm.params, rc.model, rc.train,
                                     static_cast<int>(label_names.size()), rc.max_len, freeze_body);
    for (int64_t s = 1; s <= rc.train.total_steps; ++s) {
        const FinetuneMetrics m = trainer.run_step(examples);
        if (s == 1 || s % 10 == 0 || s == rc.train.total_steps)
            std::cout << "step=" << m.step << " loss=" << m.loss << " batch_acc=" << m.accuracy
                      << " lr=" << m.lr << "\n";
    }
    std::cout << "train_accuracy=" << trainer.evaluate(examples) << "\n";

    fs::create_directories(out_dir);
    vocab.save((fs::path(out_dir) / "vocab.txt").string());
    rc.save((fs::path(out_dir) / "run_config.txt").string());
    write_checkpoint((fs::path(out_dir) / "checkpoint_final.pmlm").string(), rc, lm.params, nullptr,
                     &trainer.head(), label_names);
    return 0;
}

int cmd_finetune_gen(const std::string& checkpoint, const std::string& data_path,
                     const std::string& out_dir, const std::string& vocab_flag, int64_t steps,
                     double lr, int batch, double smoothing, uint64_t seed, bool seed_set) {
    LoadedModel lm = load_model(checkpoint);
    const Vocab vocab = load_vocab_for(checkpoint, vocab_flag);
    TokenizerOptions topts{lm.rc.token_mode, lm.rc.lowercase};

    std::vector<Seq2SeqExample> pairs;
    for (const auto& [src, tgt] : read_tsv(data_path))
        pairs.push_back({vocab.encode(src, topts), vocab.encode(tgt, topts)});

    RunConfig rc = lm.rc;
    rc.train.total_steps = steps;
    rc.train.peak_lr = lr;
    rc.train.batch_size = batch;
    rc.train.warmup_steps = -1;
    rc.train.warmup_ratio = 0.1;
    rc.label_smoothing = smoothing;
    if (seed_set) rc.train.seed = seed;

    Seq2SeqTrainer<float> trainer(&lm.params, rc.model, rc.train, rc.model.max_positions, smoothing);
    const int dropped = trainer.filter_pairs(pairs);
    if (dropped > 0) std::cerr << "skipped " << dropped << " over-length pairs\n";
    require(!pairs.empty(), "no seq2seq pairs fit the length budget");
    std::cerr << "seq2seq: " << pairs.size() << " pairs\n";

    for (int64_t s = 1; s <= rc.train.total_steps; ++s) {
        const FinetuneMetrics m = trainer.run_step(pairs);
        if (s == 1 || s % 10 == 0 || s == rc.train.total_steps)
            std::cout << "step=" << m.step << " loss=" << m.loss << " lr=" << m.lr << "\n";
    }

    fs::create_directories(out_dir);
    vocab.save((fs::path(out_dir) / "vocab.txt").string());
    rc.save((fs::path(out_dir) / "run_config.txt").string());
    write_checkpoint((fs::path(out_dir) / "checkpoint_final.pmlm").string(), rc, lm.params, nullptr);
    return 0;
}

int cmd_generate(const std::string& checkpoint, const std::string& vocab_flag,
                 const std::string& input_path, const std::string& text, int beam, double alpha,
                 int max_out) {
    LoadedModel lm = load_model(checkpoint);
    const Vocab vocab = load_vocab_for(checkpoint, vocab_flag);
    TokenizerOptions topts{lm.rc.token_mode, lm.rc.lowercase};

    std::vector<std::string> sources;
    if (!text.empty()) {
        sources.push_back(text);
    } else {
        require(!input_path.empty(), "generate needs --input or --text");
        std::ifstream in(input_path, std::ios::binary);
        require(in.good(), "cannot open input file: " + input_path);
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (!line.empty()) sources.push_back(line);
        }
    }

    BeamParams bp{beam, alpha, max_out};
    for (const auto& src_text : sources) {
        const std::vector<int> src = vocab.encode(src_text, topts);
        const std::vector<int> out = decode_beam(lm.params, lm.rc.model, src, bp);
        std::cout << vocab.decode(out, lm.rc.token_mode) << "\n";
    }
    return 0;
}

int cmd_verify(const std::string& suite, uint64_t seed) {
    bool all_pass = true;
    const auto note = [&all_pass](bool pass) { all_pass = all_pass && pass; };

    if (suite == "ae" || suite == "all") {
        double worst = 0;
        bool pass = true;
        for (int i = 0; i < 100; ++i) {
            const RandomCase rc = make_random_case(Rng::derive(seed, 0xaeULL, static_cast<uint64_t>(i)));
            Rng prng(Rng::derive(seed, 0xae9aULL, static_cast<uint64_t>(i)));
            const Parameters<float> params = Parameters<float>::init(rc.cfg, prng, 0.05);
            const EquivalenceReport r =
                check_ae_equivalence(params, rc.cfg, rc.x, rc.order, rc.plan, rc.vocab, i);
            worst = std::max(worst, r.max_rel_dev);
            if (!r.pass) {
                std::cout << "ae " << r.to_string() << "\n";
                pass = false;
            }
        }
        std::cout << (pass ? "PASS" : "FAIL")
                  << " suite=ae instances=100 max_rel_dev=" << worst << " threshold=1e-05\n";
        note(pass);
    }
    if (suite == "par" || suite == "all") {
        double worst = 0;
        bool pass = true;
        int steps_checked = 0;
        for (int i = 0; i < 100; ++i) {
            const RandomCase rc = make_random_case(Rng::derive(seed, 0x9a7ULL, static_cast<uint64_t>(i)));
            Rng prng(Rng::derive(seed, 0x9a79ULL, static_cast<uint64_t>(i)));
            const Parameters<float> params = Parameters<float>::init(rc.cfg, prng, 0.05);
            const EquivalenceReport r =
                check_par_equivalence(params, rc.cfg, rc.x, rc.order, rc.plan, rc.vocab, i);
            worst = std::max(worst, r.max_rel_dev);
            steps_checked += rc.order.num_steps();
            if (!r.pass) {
                std::cout << "par " << r.to_string() << "\n";
                pass = false;
            }
        }
        std::cout << (pass ? "PASS" : "FAIL") << " suite=par instances=100 steps=" << steps_checked
                  << " max_rel_dev=" << worst << " threshold=1e-05\n";
        note(pass);
    }
    if (suite == "grad" || suite == "all") {
        GradCheckConfig gc;
        gc.seed = seed;
        const GradCheckReport r = check_gradients(gc);
        std::cout << "suite=grad " << r.to_string() << "\n";
        note(r.pass);
    }
    if (suite == "sampler" || suite == "all") {
        const SamplerStatsReport r = check_sampler_stats(10000, 512, seed);
        std::cout << "suite=sampler " << r.to_string() << "\n";
        note(r.pass);
    }
    if (suite == "passes" || suite == "all") {
        const PassCountReport r = count_forward_passes<float>(4, 10, seed);
        std::cout << "suite=passes " << r.to_string() << "\n";
        note(r.pass);
    }
    return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pseudo-masked language model pre-training and verification"};
    app.require_subcommand(1);

    // build-vocab
    auto* sv = app.add_subcommand("build-vocab", "build a vocabulary from a text corpus");
    std::string bv_corpus, bv_out;
    int bv_max = 2048;
    bool bv_char = false, bv_keepcase = false;
    sv->add_option("--corpus", bv_corpus, "corpus file or directory")->required();
    sv->add_option("--out", bv_out, "output vocab file")->required();
    sv->add_option("--max-size", bv_max, "max vocab size incl. specials");
    sv->add_flag("--char-mode", bv_char, "character tokenizer");
    sv->add_flag("--keep-case", bv_keepcase, "disable lowercasing");

    // sample-mask / audit-mask
    MaskInspectArgs mi;
    auto* sm = app.add_subcommand("sample-mask", "print a factorization order + corruption plan");
    add_mask_inspect_flags(sm, mi);
    MaskInspectArgs ai;
    auto* am = app.add_subcommand("audit-mask", "print the attention-mask grid and leakage verdict");
    add_mask_inspect_flags(am, ai);

    // pretrain
    PretrainArgs pa;
    auto* pt = app.add_subcommand("pretrain", "pre-train on a plain-text corpus");
    pt->add_option("--corpus", pa.corpus, "corpus file or directory")->required();
    pt->add_option("--out", pa.out_dir, "output directory")->required();
    pt->add_option("--config", pa.config_path, "key=value config file");
    pt->add_option("--vocab", pa.vocab_path, "existing vocab file (else built from corpus)");
    pt->add_option("--objective", pa.objective, "ae | ar | par | ae+ar | ae+par");
    pt->add_option("--steps", pa.steps, "training steps");
    pt->add_option("--batch", pa.batch, "batch size");
    pt->add_option("--lr", pa.lr, "peak learning rate");
    pt->add_option("--max-len", pa.max_len, "max packed length");
    pt->add_option("--vocab-max", pa.vocab_max, "max vocab size when building");
    auto* pt_seed = pt->add_option("--seed", pa.seed, "rng seed (default env PMLM_SEED or 42)");
    pt->add_option("--layers", pa.layers, "transformer layers");
    pt->add_option("--hidden", pa.hidden, "hidden size");
    pt->add_option("--heads", pa.heads, "attention heads");
    pt->add_option("--ffn", pa.ffn, "FFN inner size");
    pt->add_option("--dropout", pa.dropout, "dropout rate");
    pt->add_option("--log-every", pa.log_every, "metrics cadence");
    pt->add_option("--checkpoint-every", pa.checkpoint_every, "periodic checkpoint cadence");
    pt->add_flag("--paper-size", pa.paper_size, "use the full-size model dimensions");
    pt->add_flag("--deterministic", pa.deterministic, "fixed reduction order");
    pt->add_flag("--char-mode", pa.char_mode, "character tokenizer");
    pt->add_flag("--keep-case", pa.keep_case, "disable lowercasing");

    // finetune-cls
    std::string fc_ckpt, fc_data, fc_out, fc_vocab;
    int64_t fc_steps = 100;
    double fc_lr = 2e-5;
    int fc_batch = 16;
    bool fc_freeze = false;
    uint64_t fc_seed = 0;
    auto* fc = app.add_subcommand("finetune-cls", "fine-tune a classifier head");
    fc->add_option("--checkpoint", fc_ckpt, "pre-trained checkpoint")->required();
    fc->add_option("--data", fc_data, "TSV (text<TAB>label)")->required();
    fc->add_option("--out", fc_out, "output directory")->required();
    fc->add_option("--vocab", fc_vocab, "vocab file (default: sibling of checkpoint)");
    fc->add_option("--steps", fc_steps, "fine-tuning steps");
    fc->add_option("--lr", fc_lr, "peak learning rate");
    fc->add_option("--batch", fc_batch, "batch size");
    fc->add_flag("--freeze-body", fc_freeze, "train the head only");
    auto* fc_seed_opt = fc->add_option("--seed", fc_seed, "rng seed");

    // finetune-gen
    std::string fg_ckpt, fg_data, fg_out, fg_vocab;
    int64_t fg_steps = 200;
    double fg_lr = 7e-5;
    int fg_batch = 8;
    double fg_smooth = 0.1;
    uint64_t fg_seed = 0;
    auto* fg = app.add_subcommand("finetune-gen", "fine-tune for sequence-to-sequence generation");
    fg->add_option("--checkpoint", fg_ckpt, "pre-trained checkpoint")->required();
    fg->add_option("--data", fg_data, "TSV (source<TAB>target)")->required();
    fg->add_option("--out", fg_out, "output directory")->required();
    fg->add_option("--vocab", fg_vocab, "vocab file (default: sibling of checkpoint)");
    fg->add_option("--steps", fg_steps, "fine-tuning steps");
    fg->add_option("--lr", fg_lr, "peak learning rate");
    fg->add_option("--batch", fg_batch, "batch size");
    fg->add_option("--smoothing", fg_smooth, "label smoothing rate");
    auto* fg_seed_opt = fg->add_option("--seed", fg_seed, "rng seed");

    // generate
    std::string gn_ckpt, gn_vocab, gn_input, gn_text;
    int gn_beam = 5, gn_maxout = 48;
    double gn_alpha = 0.7;
    auto* gn = app.add_subcommand("generate", "beam-search generation from a fine-tuned model");
    gn->add_option("--checkpoint", gn_ckpt, "fine-tuned checkpoint")->required();
    gn->add_option("--vocab", gn_vocab, "vocab file (default: sibling of checkpoint)");
    gn->add_option("--input", gn_input, "file with one source per line");
    gn->add_option("--text", gn_text, "single source text");
    gn->add_option("--beam", gn_beam, "beam size");
    gn->add_option("--alpha", gn_alpha, "length-penalty exponent");
    gn->add_option("--max-out", gn_maxout, "max output tokens");

    // verify
    std::string vf_suite = "all";
    uint64_t vf_seed = default_seed();
    auto* vf = app.add_subcommand("verify", "run the verification suites");
    vf->add_option("--suite", vf_suite, "ae | par | grad | sampler | passes | all")
        ->check(CLI::IsMember({"ae", "par", "grad", "sampler", "passes", "all"}));
    vf->add_option("--seed", vf_seed, "rng seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (sv->parsed()) return cmd_build_vocab(bv_corpus, bv_out, bv_max, bv_char, bv_keepcase);
        if (sm->parsed()) return cmd_sample_mask(mi);
        if (am->parsed()) return cmd_audit_mask(ai);
        if (pt->parsed()) {
            pa.seed_set = pt_seed->count() > 0;
            return cmd_pretrain(pa);
        }
        if (fc->parsed())
            return cmd_finetune_cls(fc_ckpt, fc_data, fc_out, fc_vocab, fc_steps, fc_lr, fc_batch,
                                    fc_freeze, fc_seed, fc_seed_opt->count() > 0);
        if (fg->parsed())
            return cmd_finetune_gen(fg_ckpt, fg_data, fg_out, fg_vocab, fg_steps, fg_lr, fg_batch,
                                    fg_smooth, fg_seed, fg_seed_opt->count() > 0);
        if (gn->parsed()) return cmd_generate(gn_ckpt, gn_vocab, gn_input, gn_text, gn_beam, gn_alpha, gn_maxout);
        if (vf->parsed()) return cmd_verify(vf_suite, vf_seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cerr << app.help() << "\n";
    return 2;
}
