#include "sora/errors.hpp"
#include "sora/stages.hpp"

#include <CLI11.hpp>

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <list>
#include <string>

namespace {

struct Common {
    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    CLI::Option* seed_opt = nullptr;
};

Common& add_common(CLI::App* cmd, std::list<Common>& store) {
    Common& c = store.emplace_back();
    cmd->add_option("--config", c.config_path, "JSON run configuration file");
    cmd->add_option("--out", c.out_dir, "artifact directory (default artifacts)");
    c.seed_opt = cmd->add_option("--seed", c.seed, "override every stage seed");
    return c;
}

// Precedence: --seed flag, then SORA_SEED, then the config file, then defaults.
sora::RunConfig build_config(const Common& c) {
    sora::RunConfig cfg;
    if (!c.config_path.empty()) cfg = sora::load_run_config(c.config_path);
    if (const char* env = std::getenv("SORA_SEED")) {
        errno = 0;
        char* end = nullptr;
        const unsigned long long v = std::strtoull(env, &end, 10);
        if (errno != 0 || end == env || *end != '\0') {
            throw sora::ConfigError(std::string("SORA_SEED is not an unsigned integer: ") +
                                    env);
        }
        sora::apply_seed(cfg, v);
    }
    if (c.seed_opt->count() > 0) sora::apply_seed(cfg, c.seed);
    if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"symptom-to-organ retrieval pipeline"};
    app.require_subcommand(1);
    std::list<Common> commons;

    CLI::App* gen_corpus = app.add_subcommand("gen-corpus", "synthesize the symptom corpus");
    Common& cc_corpus = add_common(gen_corpus, commons);

    CLI::App* gen_volumes = app.add_subcommand("gen-volumes", "synthesize organ volumes");
    Common& cc_volumes = add_common(gen_volumes, commons);

    CLI::App* train_anchors =
        app.add_subcommand("train-anchors", "fit organ anchor pairs on the train split");
    Common& cc_anchors = add_common(train_anchors, commons);
    bool anchors_allow = false;
    train_anchors->add_flag("--allow-hash-mismatch", anchors_allow,
                            "accept inputs built under a different config");

    CLI::App* label = app.add_subcommand("label", "write the soft label matrix");
    Common& cc_label = add_common(label, commons);
    sora::LabelOptions label_opts;
    label->add_flag("--hard", label_opts.hard, "one-hot labels instead of anchor scores");
    label->add_option("--heatmap-csv", label_opts.heatmap_csv,
                      "write the organ correlation matrix as CSV");
    label->add_option("--heatmap-pgm", label_opts.heatmap_pgm,
                      "write the organ correlation matrix as a PGM image");
    label->add_flag("--allow-hash-mismatch", label_opts.allow_hash_mismatch,
                    "accept inputs built under a different config");

    CLI::App* train =
        app.add_subcommand("train", "train the text head and the fused image pipeline");
    Common& cc_train = add_common(train, commons);
    bool train_allow = false;
    train->add_flag("--allow-hash-mismatch", train_allow,
                    "accept inputs built under a different config");

    CLI::App* eval = app.add_subcommand("eval", "retrieval metrics on the test split");
    Common& cc_eval = add_common(eval, commons);
    sora::EvalOptions eval_opts;
    std::string ablation = "fused";
    eval->add_option("--ablation", ablation, "gallery mode: fused, concat, 2d-only, 3d-only");
    eval->add_flag("--query-wise-map", eval_opts.query_wise_map,
                   "average precision per query instead of per organ");
    eval->add_flag("--allow-hash-mismatch", eval_opts.allow_hash_mismatch,
                   "accept inputs built under a different config");

    CLI::App* infer = app.add_subcommand("infer", "score one query against the organ gallery");
    Common& cc_infer = add_common(infer, commons);
    sora::InferOptions infer_opts;
    infer->add_option("--record", infer_opts.record_id, "query by corpus record id");
    infer->add_option("--embedding-file", infer_opts.embedding_file,
                      "query from a JSON array of numbers");
    infer->add_option("--text", infer_opts.text, "query from free text");
    infer->add_flag("--anchor-variant", infer_opts.anchor_variant,
                    "score the trained anchors instead of a query");
    infer->add_option("--overlay", infer_opts.overlay_path,
                      "write a probability overlay volume here");
    infer->add_flag("--allow-hash-mismatch", infer_opts.allow_hash_mismatch,
                    "accept inputs built under a different config");

    CLI::App* inspect = app.add_subcommand("inspect", "describe a saved checkpoint");
    std::string inspect_dir;
    inspect->add_option("dir", inspect_dir, "checkpoint or text head directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return static_cast<int>(sora::ExitCode::config);
    }

    try {
        if (app.got_subcommand(gen_corpus)) {
            sora::run_gen_corpus(build_config(cc_corpus));
        } else if (app.got_subcommand(gen_volumes)) {
            sora::run_gen_volumes(build_config(cc_volumes));
        } else if (app.got_subcommand(train_anchors)) {
            sora::run_train_anchors(build_config(cc_anchors), anchors_allow);
        } else if (app.got_subcommand(label)) {
            sora::run_label(build_config(cc_label), label_opts);
        } else if (app.got_subcommand(train)) {
            sora::run_train(build_config(cc_train), train_allow);
        } else if (app.got_subcommand(eval)) {
            eval_opts.mode = sora::gallery_mode_from_string(ablation);
            const sora::MetricsReport report = run_eval(build_config(cc_eval), eval_opts);
            std::printf("rank1 %.6f\nrank2 %.6f\nrank3 %.6f\nmap %.6f\nn_queries %d\n",
                        report.rank1, report.rank2, report.rank3, report.map,
                        report.n_queries);
        } else if (app.got_subcommand(infer)) {
            const sora::InferResult result = run_infer(build_config(cc_infer), infer_opts);
            std::printf("rank organ score\n");
            for (std::size_t r = 0; r < result.ranking.size(); ++r) {
                const int organ = result.ranking[r];
                std::printf("%zu %d %.6f\n", r + 1, organ,
                            result.scores[static_cast<std::size_t>(organ)]);
            }
        } else if (app.got_subcommand(inspect)) {
            std::fputs(sora::run_inspect(inspect_dir).c_str(), stdout);
        }
    } catch (const sora::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return static_cast<int>(e.code());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return static_cast<int>(sora::ExitCode::config);
    }
    return 0;
}
