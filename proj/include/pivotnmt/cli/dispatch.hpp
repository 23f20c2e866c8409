#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "pivotnmt/analysis/bench.hpp"
#include "pivotnmt/analysis/correlation.hpp"
#include "pivotnmt/cli/options.hpp"
#include "pivotnmt/data/bpe.hpp"
#include "pivotnmt/data/corpus.hpp"
#include "pivotnmt/data/synthetic.hpp"
#include "pivotnmt/model/checkpoint.hpp"
#include "pivotnmt/model/training.hpp"
#include "pivotnmt/pivot/cascade.hpp"
#include "pivotnmt/pivot/reinforce.hpp"

namespace pivotnmt::cli {

namespace detail {

inline std::string fixed(double v, int digits = 4) {
    if (!std::isfinite(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

inline ParamSpec text(std::string name, std::string help, json fallback = nullptr, bool required = false) {
    return {std::move(name), ParamType::Text, std::move(fallback), std::move(help), required};
}
inline ParamSpec required_text(std::string name, std::string help) {
    return text(std::move(name), std::move(help), nullptr, true);
}
inline ParamSpec integer(std::string name, std::string help, std::uint64_t fallback) {
    return {std::move(name), ParamType::Int, json(fallback), std::move(help), false};
}
inline ParamSpec real(std::string name, std::string help, double fallback) {
    return {std::move(name), ParamType::Real, json(fallback), std::move(help), false};
}
inline ParamSpec flag(std::string name, std::string help) {
    return {std::move(name), ParamType::Flag, json(false), std::move(help), false};
}

inline std::vector<ParamSpec> operator+(std::vector<ParamSpec> a, const std::vector<ParamSpec>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

inline std::vector<ParamSpec> global_params() {
    return {
        {"seed", ParamType::Int, nullptr, "RNG seed (required by stochastic subcommands)", false},
        integer("threads", "worker threads for batched decoding", 1),
        required_text("out", "output directory"),
    };
}

inline std::vector<ParamSpec> tokenizer_params() {
    return {required_text("bpe", "BPE merges file"), required_text("vocab", "vocabulary file")};
}

inline std::vector<ParamSpec> model_params() {
    return {
        integer("layers", "encoder and decoder layers", 2),
        integer("dim", "model width", 64),
        integer("heads", "attention heads", 4),
        integer("ff-dim", "feed-forward width", 128),
        integer("max-positions", "longest sequence in tokens", 64),
        real("dropout", "dropout rate", 0.1),
        text("activation", "relu or gelu", "relu"),
        real("label-smoothing", "label smoothing epsilon", 0.0),
    };
}

inline std::vector<ParamSpec> train_params() {
    return {
        text("train", "training corpus prefix"),
        text("dev", "dev corpus prefix (selects the best epoch)"),
        text("source-side", "source file suffix", "src"),
        text("target-side", "target file suffix", "piv"),
        integer("epochs", "training epochs", 10),
        integer("max-tokens", "padded tokens per batch", 1024),
        real("lr", "peak learning rate", 1e-3),
        integer("warmup", "linear warmup steps", 400),
    };
}

inline std::vector<ParamSpec> decode_params() {
    return {
        integer("pivot-beam", "beam size of an AR first stage (1 = greedy)", 1),
        integer("target-beam", "beam size of the second stage (1 = greedy)", 1),
        integer("iterations", "mask-predict iterations of a CMLM first stage", 5),
        integer("max-len", "AR output cap in tokens incl. EOS (0 = position limit)", 0),
        real("length-penalty", "beam length normalization exponent", 1.0),
        integer("batch-size", "sentences per decoding batch", 64),
    };
}

inline data::Tokenizer load_tokenizer(const RunContext& ctx) {
    return data::Tokenizer(data::BpeModel::load(ctx.text("bpe")), data::Vocabulary::load(ctx.text("vocab")));
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

inline model::TransformerConfig model_config(const RunContext& ctx, std::size_t vocab_size) {
    model::TransformerConfig c;
    c.vocab_size = vocab_size;
    c.layers = ctx.count("layers");
    c.dim = ctx.count("dim");
    c.heads = ctx.count("heads");
    c.ff_dim = ctx.count("ff_dim");
    c.max_positions = ctx.count("max_positions");
    c.dropout = ctx.real("dropout");
    c.activation = ctx.text("activation");
    c.label_smoothing = ctx.real("label_smoothing");
    return c;
}

inline model::TrainConfig train_config(const RunContext& ctx) {
    model::TrainConfig t;
    t.epochs = ctx.count("epochs");
    t.max_tokens = ctx.count("max_tokens");
    t.peak_lr = ctx.real("lr");
    t.warmup_steps = ctx.u64("warmup");
    t.seed = ctx.u64("seed");
    return t;
}

inline pivot::DecodeConfig decode_config(const RunContext& ctx) {
    pivot::DecodeConfig d;
    d.pivot_beam = ctx.count("pivot_beam");
    d.target_beam = ctx.count("target_beam");
    d.iterations = ctx.count("iterations");
    d.max_len = ctx.count("max_len");
    d.length_penalty = ctx.real("length_penalty");
    d.batch_size = ctx.count("batch_size");
    d.threads = ctx.count("threads");
    return d;
}

inline std::vector<data::EncodedPair> read_pairs(const data::Tokenizer& tok, const std::string& prefix,
                                                 const std::string& src_side, const std::string& trg_side) {
    const auto sides = data::read_aligned(prefix, {src_side, trg_side});
    return data::encode_pairs(tok, sides[0], sides[1]);
}

inline void write_jsonl(std::ofstream& f, const json& j) {
    f << j.dump() << '\n';
    f.flush();
}

// Calls `fn` with the src->piv model stored at `path`, whichever kind it is.
template <typename Fn>
void with_s2p_model(const std::string& path, const std::string& fingerprint, Fn&& fn) {
    const std::string kind = model::read_checkpoint_meta(path).kind;
    if (kind == model::CmlmModel::kKind) {
        fn(model::load_model<model::CmlmModel>(path, fingerprint));
    } else if (kind == model::ArModel::kKind) {
        fn(model::load_model<model::ArModel>(path, fingerprint));
    } else {
        throw ConfigError("checkpoint " + path + " holds an unknown model kind '" + kind + "'");
    }
}

template <typename Model>
int run_training(RunContext& ctx, bool cmlm) {
    const auto tok = load_tokenizer(ctx);
    const std::string src = ctx.text("source_side"), trg = ctx.text("target_side");
    const bool distilled = ctx.has("distilled");
    if (!distilled && !ctx.has("train")) throw UsageError("missing required option --train");
    const std::string train_prefix = distilled ? ctx.text("distilled") : ctx.text("train");
    const auto train = read_pairs(tok, train_prefix, src, trg);
    const auto dev = ctx.has("dev") ? read_pairs(tok, ctx.text("dev"), src, trg) : std::vector<data::EncodedPair>{};
    auto mcfg = model_config(ctx, tok.vocab().size());
    if (cmlm) {
        mcfg.max_target_length = ctx.count("max_target_len");
        mcfg.length_loss_weight = ctx.real("length_loss_weight");
    }
    Model m(mcfg, ctx.u64("seed"));
    std::ofstream log(ctx.output("train_log.jsonl"), std::ios::binary);
    const auto on_epoch = [&](const model::TrainEpoch& e) {
        write_jsonl(log, model::to_json(e, true));
        ctx.log() << "epoch " << e.epoch << " train_loss " << fixed(e.train_loss) << " dev_loss " << fixed(e.dev_loss)
                  << " (" << fixed(e.wall_seconds, 1) << " s)\n";
    };
    const auto tcfg = train_config(ctx);
    model::TrainReport rep;
    if constexpr (std::is_same_v<Model, model::CmlmModel>) {
        rep = model::train_cmlm(m, train, dev, tcfg, on_epoch);
    } else {
        rep = model::train_ar(m, train, dev, tcfg, on_epoch);
    }
    const std::string ckpt = ctx.output("model.ckpt");
    const json extra{{"best_epoch", rep.best_epoch}, {"best_dev_loss", rep.best_dev_loss}, {"distilled", distilled}};
    model::save_model(ckpt, m, tok.vocab().fingerprint(), rep.epochs[rep.best_epoch - 1].steps, extra);
    std::ofstream summary(ctx.output("summary.json"), std::ios::binary);
    summary << json{{"best_epoch", rep.best_epoch}, {"best_dev_loss", rep.best_dev_loss},
                    {"train_pairs", train.size()}, {"dev_pairs", dev.size()}}
                   .dump(2)
            << '\n';
    ctx.out() << "best_epoch=" << rep.best_epoch << "\n"
              << "best_dev_loss=" << fixed(rep.best_dev_loss) << "\n"
              << "best_checkpoint=" << ckpt << "\n";
    return 0;
}

// ---------------------------------------------------------------- commands

inline int cmd_gen_data(RunContext& ctx) {
    data::SyntheticTaskSpec spec;
    const std::uint64_t seed = ctx.u64("seed");
    if (ctx.has("spec")) {
        std::ifstream in(ctx.text("spec"));
        if (!in) throw IoError("cannot read task spec " + ctx.text("spec"));
        json j;
        in >> j;
        from_json(j, spec);
        spec.seed = seed;
    } else {
        spec = data::make_task_spec(ctx.count("alphabet"), ctx.count("min_length"), ctx.count("max_length"),
                                    ctx.count("reorder_window"), ctx.real("noise"), seed);
    }
    data::CorpusSizes sizes;
    sizes.src_piv = ctx.count("src_piv");
    sizes.piv_trg = ctx.count("piv_trg");
    sizes.src_trg = ctx.count("src_trg");
    sizes.three_way_test = ctx.count("test");
    sizes.three_way_dev = ctx.count("dev");
    for (const auto& p : data::gen_synthetic_corpus(spec, sizes, ctx.dir().string())) ctx.record_written(p);
    json sj;
    to_json(sj, spec);
    std::ofstream(ctx.output("task_spec.json"), std::ios::binary) << sj.dump(2) << '\n';
    ctx.out() << "src_piv=" << sizes.src_piv << "\npiv_trg=" << sizes.piv_trg << "\nsrc_trg=" << sizes.src_trg
              << "\ntest=" << sizes.three_way_test << "\ndev=" << sizes.three_way_dev << "\ndir=" << ctx.dir().string()
              << "\n";
    return 0;
}

inline int cmd_train_bpe(RunContext& ctx) {
    std::vector<std::vector<std::string>> corpora;
    for (const auto& path : split_list(ctx.text("corpora"))) corpora.push_back(data::read_lines(path));
    if (corpora.empty()) throw UsageError("--corpora lists no files");
    const auto bpe = data::train_bpe(corpora, ctx.count("merges"));
    const auto vocab = data::build_vocabulary(bpe, corpora);
    bpe.save(ctx.output("bpe.codes"));
    vocab.save(ctx.output("vocab.tsv"));
    ctx.out() << "merges=" << bpe.merges.size() << "\nvocab_size=" << vocab.size()
              << "\nfingerprint=" << vocab.fingerprint() << "\n";
    return 0;
}

inline int cmd_train_ar(RunContext& ctx) { return run_training<model::ArModel>(ctx, false); }
inline int cmd_train_cmlm(RunContext& ctx) { return run_training<model::CmlmModel>(ctx, true); }

inline int cmd_distill(RunContext& ctx) {
    const auto tok = load_tokenizer(ctx);
    const auto teacher = model::load_model<model::ArModel>(ctx.text("teacher"), tok.vocab().fingerprint());
    const std::string src = ctx.text("source_side"), trg = ctx.text("target_side");
    data::TextCorpus corpus;
    corpus.source = data::read_aligned(ctx.text("input"), {src})[0];
    const auto out = pivot::distill_corpus(teacher, tok, corpus, ctx.count("beam"), decode_config(ctx));
    data::write_lines(ctx.output("distilled." + src), out.source);
    data::write_lines(ctx.output("distilled." + trg), out.target);
    ctx.out() << "lines=" << out.size() << "\nprefix=" << (ctx.dir() / "distilled").string() << "\n";
    return 0;
}

inline pivot::RlConfig rl_config(const RunContext& ctx) {
    pivot::RlConfig r;
    r.reward = pivot::parse_reward(ctx.text("reward"));
    r.learning_rate = ctx.real("lr");
    const std::string opt = ctx.text("optimizer");
    if (opt == "adam") {
        r.optimizer = nn::UpdateRule::Adam;
    } else if (opt == "sgd") {
        r.optimizer = nn::UpdateRule::PlainDescent;
    } else {
        throw UsageError("--optimizer must be adam or sgd");
    }
    r.batch_size = ctx.count("batch_size");
    r.target_beam = ctx.count("target_beam");
    r.negce_divisor = ctx.real("negce_divisor");
    const std::string sign = ctx.text("negce_sign");
    if (sign == "likelihood") {
        r.negce_sign = pivot::NegCeSign::Likelihood;
    } else if (sign == "paper") {
        r.negce_sign = pivot::NegCeSign::Paper;
    } else {
        throw UsageError("--negce-sign must be likelihood or paper");
    }
    r.seed = ctx.u64("seed");
    r.epochs = ctx.count("epochs");
    r.baseline = ctx.flag("baseline");
    r.baseline_decay = ctx.real("baseline_decay");
    r.sample_length = ctx.flag("sample_length");
    r.dev_iterations = ctx.count("dev_iterations");
    r.max_target_len = ctx.count("max_target_len");
    return r;
}

inline int cmd_rl_finetune(RunContext& ctx) {
    const auto tok = load_tokenizer(ctx);
    const std::string fp = tok.vocab().fingerprint();
    auto cmlm = model::load_model<model::CmlmModel>(ctx.text("cmlm"), fp);
    const auto p2t = model::load_model<model::ArModel>(ctx.text("p2t"), fp);
    const std::string src = ctx.text("source_side"), trg = ctx.text("target_side");
    const auto train = read_pairs(tok, ctx.text("train"), src, trg);
    const auto dev_sides = data::read_aligned(ctx.text("dev"), {src, trg});
    data::TextCorpus dev;
    dev.source = dev_sides[0];
    dev.target = dev_sides[1];
    const auto cfg = rl_config(ctx);
    std::ofstream log(ctx.output("rl_log.jsonl"), std::ios::binary);
    const auto rep = pivot::rl_finetune(cmlm, p2t, tok, train, dev, cfg, [&](const pivot::EpochRecord& e) {
        write_jsonl(log, {{"epoch", e.epoch},
                          {"mean_reward", e.mean_reward},
                          {"dev_bleu", e.dev_bleu},
                          {"skipped_steps", e.skipped_steps},
                          {"wall_seconds", e.wall_seconds}});
        ctx.log() << "epoch " << e.epoch << " mean_reward " << fixed(e.mean_reward, 6) << " dev_bleu "
                  << fixed(e.dev_bleu, 2) << " (" << fixed(e.wall_seconds, 1) << " s)\n";
    });
    const std::string ckpt = ctx.output("model.ckpt");
    model::save_model(ckpt, cmlm, fp, rep.best_epoch,
                      {{"reward", pivot::reward_name(cfg.reward)}, {"best_epoch", rep.best_epoch}});
    json epochs = json::array();
    for (const auto& e : rep.epochs) {
        epochs.push_back({{"epoch", e.epoch},
                          {"mean_reward", e.mean_reward},
                          {"dev_bleu", e.dev_bleu},
                          {"skipped_steps", e.skipped_steps}});
    }
    std::ofstream(ctx.output("report.json"), std::ios::binary)
        << json{{"reward", pivot::reward_name(cfg.reward)},
                {"initial_dev_bleu", rep.initial_dev_bleu},
                {"best_epoch", rep.best_epoch},
                {"best_dev_bleu", rep.best_dev_bleu},
                {"epochs", epochs}}
               .dump(2)
        << '\n';
    ctx.out() << "initial_dev_bleu=" << fixed(rep.initial_dev_bleu, 2) << "\nbest_dev_bleu="
              << fixed(rep.best_dev_bleu, 2) << "\nbest_epoch=" << rep.best_epoch << "\nbest_checkpoint=" << ckpt
              << "\n";
    return 0;
}

inline int cmd_decode_pivot(RunContext& ctx) {
    const auto tok = load_tokenizer(ctx);
    const std::string fp = tok.vocab().fingerprint();
    const auto p2t = model::load_model<model::ArModel>(ctx.text("p2t"), fp);
    const auto lines = data::read_lines(ctx.text("input"));
    std::vector<data::TokenIds> sources;
    for (const auto& l : lines) sources.push_back(tok.encode(l));
    const auto dcfg = decode_config(ctx);
    std::vector<std::string> pivots, targets;
    std::size_t pivot_passes = 0, target_passes = 0;
    with_s2p_model(ctx.text("s2p"), fp, [&](const auto& s2p) {
        for (const auto& r : pivot::cascade_all(s2p, p2t, sources, dcfg)) {
            pivots.push_back(tok.decode(r.pivot.tokens));
            targets.push_back(tok.decode(r.target.tokens));
            pivot_passes += r.pivot.decoder_passes;
            target_passes += r.target.decoder_passes;
        }
    });
    data::write_lines(ctx.output("pivot.txt"), pivots);
    data::write_lines(ctx.output("target.txt"), targets);
    ctx.out() << "sentences=" << lines.size() << "\npivot_decoder_passes=" << pivot_passes
              << "\ntarget_decoder_passes=" << target_passes << "\npivots=" << (ctx.dir() / "pivot.txt").string()
              << "\ntargets=" << (ctx.dir() / "target.txt").string() << "\n";
    return 0;
}

inline int cmd_evaluate(RunContext& ctx) {
    const auto tok = load_tokenizer(ctx);
    const std::string fp = tok.vocab().fingerprint();
    const std::string prefix = ctx.text("test");
    const std::string src = ctx.text("source_side"), trg = ctx.text("target_side");
    const auto dcfg = decode_config(ctx);
    json report;
    if (ctx.has("p2t")) {
        const auto p2t = model::load_model<model::ArModel>(ctx.text("p2t"), fp);
        data::TextCorpus corpus;
        const std::string piv = ctx.text("pivot_side");
        const bool with_pivot = fs::exists(prefix + "." + piv);
        const auto sides = with_pivot ? data::read_aligned(prefix, {src, piv, trg}) : data::read_aligned(prefix, {src, trg});
        corpus.source = sides[0];
        corpus.target = sides.back();
        if (with_pivot) corpus.pivot = sides[1];
        with_s2p_model(ctx.text("model"), fp, [&](const auto& s2p) {
            const auto ev = pivot::evaluate_cascade(s2p, p2t, tok, corpus, dcfg);
            data::write_lines(ctx.output("hypotheses.txt"), ev.target_lines);
            data::write_lines(ctx.output("pivots.txt"), ev.pivot_lines);
            report = {{"mode", "cascade"}, {"bleu", ev.bleu.value}, {"sentences", corpus.size()}};
            if (with_pivot) report["pivot_bleu"] = metrics::corpus_bleu(ev.pivot_lines, corpus.pivot).value;
        });
    } else {
        const auto m = model::load_model<model::ArModel>(ctx.text("model"), fp);
        const auto sides = data::read_aligned(prefix, {src, trg});
        const auto ev = pivot::evaluate_direct(m, tok, sides[0], sides[1], dcfg);
        data::write_lines(ctx.output("hypotheses.txt"), ev.lines);
        report = {{"mode", "direct"}, {"bleu", ev.bleu.value}, {"sentences", sides[0].size()}};
    }
    std::ofstream(ctx.output("metrics.json"), std::ios::binary) << report.dump(2) << '\n';
    ctx.out() << "mode=" << report["mode"].get<std::string>() << "\nbleu=" << fixed(report["bleu"].get<double>(), 2)
              << "\n";
    if (report.contains("pivot_bleu")) ctx.out() << "pivot_bleu=" << fixed(report["pivot_bleu"].get<double>(), 2) << "\n";
    return 0;
}

inline int cmd_bench_sampling(RunContext& ctx) {
    const auto tok = load_tokenizer(ctx);
    const std::string fp = tok.vocab().fingerprint();
    const auto ar = model::load_model<model::ArModel>(ctx.text("ar"), fp);
    const auto cmlm = model::load_model<model::CmlmModel>(ctx.text("cmlm"), fp);
    std::vector<data::TokenIds> corpus;
    for (const auto& l : data::read_lines(ctx.text("input"))) corpus.push_back(tok.encode(l));
    analysis::BenchConfig cfg;
    cfg.batch_size = ctx.count("batch_size");
    cfg.repetitions = ctx.count("repetitions");
    cfg.k_hat_max = ctx.count("k_hat_max");
    cfg.seed = ctx.u64("seed");
    const auto rep = analysis::bench_sampling(ar, cmlm, corpus, cfg);
    std::ofstream(ctx.output("bench.json"), std::ios::binary) << analysis::to_json(rep, true).dump(2) << '\n';
    for (const auto& r : rep.records) {
        ctx.out() << r.model_kind << "_mean_ms=" << fixed(r.decoder.mean_ms, 3) << "\n"
                  << r.model_kind << "_stddev_ms=" << fixed(r.decoder.stddev_ms, 3) << "\n"
                  << r.model_kind << "_decoder_passes=" << r.total_decoder_passes << "\n"
                  << r.model_kind << "_pass_counts_exact=" << (r.pass_counts_exact ? "true" : "false") << "\n";
    }
    ctx.out() << "speedup=" << fixed(rep.speedup, 2) << "\nna_faster=" << (rep.na_faster ? "true" : "false") << "\n";
    if (!rep.warning.empty()) ctx.out() << "warning=" << rep.warning << "\n";
    return 0;
}

inline int cmd_analyze_correlation(RunContext& ctx) {
    const auto tok = load_tokenizer(ctx);
    const std::string fp = tok.vocab().fingerprint();
    const auto p2t = model::load_model<model::ArModel>(ctx.text("p2t"), fp);
    const auto sides = data::read_aligned(ctx.text("test"), {ctx.text("source_side"), ctx.text("pivot_side"),
                                                              ctx.text("target_side")});
    data::TextCorpus corpus;
    corpus.source = sides[0];
    corpus.pivot = sides[1];
    corpus.target = sides[2];
    analysis::CorrelationAnalysis a;
    with_s2p_model(ctx.text("s2p"), fp, [&](const auto& s2p) {
        a = analysis::pivot_target_correlation(pivot::evaluate_cascade(s2p, p2t, tok, corpus, decode_config(ctx)).results);
    });
    analysis::emit_scatter(a.records, ctx.output("scatter.svg"));
    ctx.output("scatter.tsv");
    const auto as_json = [](const std::optional<double>& v) { return v ? json(*v) : json(analysis::kUndefined); };
    std::ofstream(ctx.output("summary.json"), std::ios::binary)
        << json{{"count", a.summary.count}, {"pearson", as_json(a.summary.pearson)},
                {"spearman", as_json(a.summary.spearman)}}
               .dump(2)
        << '\n';
    ctx.out() << "count=" << a.summary.count << "\npearson=" << analysis::format_correlation(a.summary.pearson)
              << "\nspearman=" << analysis::format_correlation(a.summary.spearman) << "\n";
    return 0;
}

struct Command {
    std::string name;
    std::string help;
    bool stochastic;
    std::vector<ParamSpec> params;
    int (*run)(RunContext&);
};

inline std::vector<Command> commands() {
    const auto g = global_params();
    const auto tk = tokenizer_params();
    return {
        {"gen-data", "generate the synthetic three-language corpora", true,
         g + std::vector<ParamSpec>{
                 text("spec", "task spec JSON (substitution tables); --seed replaces its seed"),
                 integer("alphabet", "words per language", 40),
                 integer("min-length", "shortest source sentence", 4),
                 integer("max-length", "longest source sentence", 16),
                 integer("reorder-window", "src->piv block reversal width", 3),
                 real("noise", "per-word corruption rate", 0.1),
                 integer("src-piv", "src-piv pairs", 20000),
                 integer("piv-trg", "piv-trg pairs", 20000),
                 integer("src-trg", "src-trg pairs", 2000),
                 integer("test", "three-way test triples", 1000),
                 integer("dev", "three-way dev triples", 500),
             },
         cmd_gen_data},
        {"train-bpe", "learn joint BPE merges and the vocabulary", false,
         g + std::vector<ParamSpec>{required_text("corpora", "comma-separated text files"),
                                    integer("merges", "number of merges", 500)},
         cmd_train_bpe},
        {"train-ar", "pre-train an autoregressive transformer (direct, src->piv or piv->trg)", true,
         g + tk + model_params() + train_params(), cmd_train_ar},
        {"train-cmlm", "pre-train the non-autoregressive src->piv CMLM", true,
         g + tk + model_params() + train_params() +
             std::vector<ParamSpec>{integer("max-target-len", "length classes K_max", 48),
                                    real("length-loss-weight", "weight of the length CE", 0.1),
                                    text("distilled", "distilled corpus prefix used instead of --train")},
         cmd_train_cmlm},
        {"distill", "sequence-level distillation of src->piv data with an AR teacher", false,
         g + tk + decode_params() +
             std::vector<ParamSpec>{required_text("teacher", "AR src->piv checkpoint"),
                                    required_text("input", "corpus prefix to distill"),
                                    text("source-side", "source suffix", "src"),
                                    text("target-side", "pivot suffix to write", "piv"),
                                    integer("beam", "teacher beam size", 4)},
         cmd_distill},
        {"rl-finetune", "REINFORCE fine-tuning of the CMLM with rewards from the frozen piv->trg model", true,
         g + tk +
             std::vector<ParamSpec>{
                 required_text("cmlm", "pre-trained CMLM checkpoint"),
                 required_text("p2t", "frozen piv->trg AR checkpoint"),
                 required_text("train", "src-trg corpus prefix"),
                 required_text("dev", "dev corpus prefix"),
                 text("source-side", "source suffix", "src"),
                 text("target-side", "target suffix", "trg"),
                 text("reward", "negce, bleu or chrf", "negce"),
                 text("negce-sign", "likelihood or paper", "likelihood"),
                 real("negce-divisor", "NegCE scale divisor", 10.0),
                 real("lr", "learning rate", 5e-6),
                 text("optimizer", "adam or sgd", "adam"),
                 integer("batch-size", "sentences per update", 16),
                 integer("epochs", "epochs", 10),
                 integer("target-beam", "target decoding beam for BLEU/chrF rewards", 1),
                 flag("baseline", "subtract a moving-average reward baseline"),
                 real("baseline-decay", "moving-average decay", 0.9),
                 flag("sample-length", "sample the pivot length instead of the argmax"),
                 integer("dev-iterations", "mask-predict iterations for dev decoding", 5),
                 integer("max-target-len", "target decoding cap (0 = position limit)", 0),
             },
         cmd_rl_finetune},
        {"decode-pivot", "two-step decoding: src -> pivot -> target", false,
         g + tk + decode_params() +
             std::vector<ParamSpec>{required_text("s2p", "src->piv checkpoint (AR or CMLM)"),
                                    required_text("p2t", "piv->trg checkpoint"),
                                    required_text("input", "source sentences, one per line")},
         cmd_decode_pivot},
        {"evaluate", "corpus BLEU of a direct model or of a pivot cascade", false,
         g + tk + decode_params() +
             std::vector<ParamSpec>{required_text("model", "direct src->trg or src->piv checkpoint"),
                                    text("p2t", "piv->trg checkpoint; enables cascade evaluation"),
                                    required_text("test", "test corpus prefix"),
                                    text("source-side", "source suffix", "src"),
                                    text("pivot-side", "pivot suffix", "piv"),
                                    text("target-side", "target suffix", "trg")},
         cmd_evaluate},
        {"bench-sampling", "time parallel CMLM sampling against AR sampling", true,
         g + tk +
             std::vector<ParamSpec>{required_text("ar", "AR src->piv checkpoint"),
                                    required_text("cmlm", "CMLM checkpoint"),
                                    required_text("input", "source sentences, one per line"),
                                    integer("batch-size", "sentences per batch", 64),
                                    integer("repetitions", "timed repetitions (>= 3)", 5),
                                    integer("k-hat-max", "longest sampled pivot for both models (0 = model limits)", 32)},
         cmd_bench_sampling},
        {"analyze-correlation", "sentence BLEU of pivot vs target hypotheses on a three-way test set", false,
         g + tk + decode_params() +
             std::vector<ParamSpec>{required_text("s2p", "src->piv checkpoint (AR or CMLM)"),
                                    required_text("p2t", "piv->trg checkpoint"),
                                    required_text("test", "three-way test corpus prefix"),
                                    text("source-side", "source suffix", "src"),
                                    text("pivot-side", "pivot suffix", "piv"),
                                    text("target-side", "target suffix", "trg")},
         cmd_analyze_correlation},
    };
}

}  // namespace detail

// Runs one subcommand. Exit codes: 0 success, 1 usage error, 2 runtime error.
inline int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
    CLI::App app{"Pivot-based neural machine translation with a non-autoregressive src->piv model", "pivotnmt"};
    app.require_subcommand(1);
    const auto cmds = detail::commands();
    std::vector<std::unique_ptr<ParamBinder>> binders;
    std::vector<std::string> config_paths(cmds.size());
    std::vector<bool> overwrite(cmds.size(), false);
    std::vector<CLI::App*> subs;
    for (std::size_t i = 0; i < cmds.size(); ++i) {
        CLI::App* sub = app.add_subcommand(cmds[i].name, cmds[i].help);
        sub->add_option("--config", config_paths[i], "JSON config file; CLI flags take precedence");
        sub->add_flag("--overwrite", [&overwrite, i](std::int64_t) { overwrite[i] = true; },
                      "allow writing into a non-empty output directory");
        binders.push_back(std::make_unique<ParamBinder>());
        binders.back()->bind(*sub, cmds[i].params);
        subs.push_back(sub);
    }

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        const auto selected = app.get_subcommands();
        out << (selected.empty() ? app.help() : selected.back()->help());
        return 0;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return 0;
        }
        err << "error: " << e.what() << "\n" << "run 'pivotnmt --help' for usage\n";
        return 1;
    }

    for (std::size_t i = 0; i < cmds.size(); ++i) {
        if (!subs[i]->parsed()) continue;
        std::unique_ptr<RunContext> ctx;
        try {
            const json config = load_config_file(config_paths[i]);
            json resolved = binders[i]->resolve(config, cmds[i].name);
            if (cmds[i].stochastic && resolved["seed"].is_null()) {
                throw UsageError(cmds[i].name + " is stochastic and needs an explicit --seed");
            }
            if (!(resolved["threads"].get<std::uint64_t>() >= 1)) throw UsageError("--threads must be >= 1");
            ctx = std::make_unique<RunContext>(cmds[i].name, std::move(resolved), out, err);
        } catch (const UsageError& e) {
            err << "error: " << e.what() << "\n";
            return 1;
        }
        try {
            ctx->open_output_dir(ctx->text("out"), overwrite[i]);
            const int code = cmds[i].run(*ctx);
            ctx->finish();
            return code;
        } catch (const UsageError& e) {
            err << "error: " << e.what() << "\n";
            return 1;
        } catch (const std::exception& e) {
            err << "error: " << e.what() << "\n";
            return 2;
        }
    }
    return 1;
}

inline int dispatch(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return dispatch(args);
}

}  // namespace pivotnmt::cli
