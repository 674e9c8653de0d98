#include "sora/stages.hpp"

#include "sora/checkpoint.hpp"
#include "sora/errors.hpp"
#include "sora/kernels.hpp"
#include "sora/tensor_io.hpp"

#include <json.hpp>

#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

namespace fs = std::filesystem;

namespace sora {

std::string corpus_train_path(const RunConfig& cfg) {
    return (fs::path(cfg.out_dir) / "corpus_train.jsonl").string();
}
std::string corpus_test_path(const RunConfig& cfg) {
    return (fs::path(cfg.out_dir) / "corpus_test.jsonl").string();
}
std::string volumes_dir(const RunConfig& cfg) {
    return (fs::path(cfg.out_dir) / "volumes").string();
}
std::string anchors_path(const RunConfig& cfg) {
    return (fs::path(cfg.out_dir) / "anchors.json").string();
}
std::string labels_path(const RunConfig& cfg) {
    return (fs::path(cfg.out_dir) / "labels.ten").string();
}
std::string text_head_dir(const RunConfig& cfg) {
    return (fs::path(cfg.out_dir) / "text_head").string();
}
std::string model_dir(const RunConfig& cfg) {
    return (fs::path(cfg.out_dir) / "model").string();
}
std::string align_trace_path(const RunConfig& cfg) {
    return (fs::path(cfg.out_dir) / "align_trace.csv").string();
}
std::string metrics_path(const RunConfig& cfg) {
    return (fs::path(cfg.out_dir) / "metrics.json").string();
}

namespace {

std::string corpus_manifest_path(const RunConfig& cfg) {
    return (fs::path(cfg.out_dir) / "corpus_manifest.json").string();
}
std::string volumes_manifest_path(const RunConfig& cfg) {
    return (fs::path(volumes_dir(cfg)) / "manifest.json").string();
}
std::string labels_manifest_path(const RunConfig& cfg) {
    return (fs::path(cfg.out_dir) / "labels_manifest.json").string();
}

void need_file(const std::string& path, const std::string& producing_stage) {
    if (!fs::exists(path)) {
        throw StageOrderError("missing " + path + "; run " + producing_stage + " first");
    }
}

void check_hash(const std::string& artifact, const std::string& found,
                const std::string& want, bool allow) {
    if (found == want || allow) return;
    throw ConfigError(artifact + " carries config hash " + found +
                      " but the current config hashes to " + want +
                      "; rerun the earlier stages or pass --allow-hash-mismatch");
}

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    try {
        nlohmann::json j;
        in >> j;
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed JSON in " + path + ": " + e.what());
    }
}

std::string manifest_hash(const std::string& path) {
    try {
        return read_json_file(path).at("config_hash").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError("manifest " + path + " lacks a config hash: " + e.what());
    }
}

void write_log(const RunConfig& cfg, const std::string& stage, const std::string& body) {
    write_file_atomic((fs::path(cfg.out_dir) / (stage + ".log")).string(), body);
}

std::string case_name(int c) { return "case" + std::to_string(c); }

std::vector<OrganVolume> read_all_volumes(const RunConfig& cfg) {
    std::vector<OrganVolume> volumes;
    volumes.reserve(static_cast<std::size_t>(cfg.n_cases) *
                    static_cast<std::size_t>(cfg.corpus.n_organs));
    for (int c = 0; c < cfg.n_cases; ++c) {
        for (int organ = 0; organ < cfg.corpus.n_organs; ++organ) {
            volumes.push_back(read_volume(volumes_dir(cfg), case_name(c), organ));
        }
    }
    return volumes;
}

std::pair<std::vector<SymptomRecord>, std::vector<SymptomRecord>> read_split_corpus(
    const RunConfig& cfg, bool allow_hash_mismatch) {
    need_file(corpus_manifest_path(cfg), "gen-corpus");
    need_file(corpus_train_path(cfg), "gen-corpus");
    need_file(corpus_test_path(cfg), "gen-corpus");
    check_hash("corpus", manifest_hash(corpus_manifest_path(cfg)), config_hash(cfg),
               allow_hash_mismatch);
    return {read_corpus_jsonl(corpus_train_path(cfg)),
            read_corpus_jsonl(corpus_test_path(cfg))};
}

}  // namespace

void run_gen_corpus(const RunConfig& cfg) {
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    const std::string hash = config_hash(cfg);

    const SyntheticCorpus corpus = generate_synthetic_corpus(cfg.corpus);
    const auto [train, test] =
        split_corpus(corpus.records, SplitSpec{cfg.split_fraction, cfg.corpus.seed});
    write_corpus_jsonl(corpus_train_path(cfg), train);
    write_corpus_jsonl(corpus_test_path(cfg), test);

    nlohmann::json manifest;
    manifest["config_hash"] = hash;
    manifest["n_records"] = corpus.records.size();
    manifest["n_train"] = train.size();
    manifest["n_test"] = test.size();
    manifest["n_organs"] = cfg.corpus.n_organs;
    manifest["d_txt"] = cfg.corpus.d_txt;
    write_file_atomic(corpus_manifest_path(cfg), manifest.dump(2) + "\n");

    write_log(cfg, "gen_corpus",
              "gen-corpus: " + std::to_string(corpus.records.size()) + " records (" +
                  std::to_string(train.size()) + " train / " + std::to_string(test.size()) +
                  " test), hash " + hash + "\n");
}

void run_gen_volumes(const RunConfig& cfg) {
    cfg.validate();
    fs::create_directories(volumes_dir(cfg));
    const std::string hash = config_hash(cfg);

    for (int c = 0; c < cfg.n_cases; ++c) {
        for (OrganVolume& vol : generate_case(cfg.volumes, static_cast<std::uint64_t>(c))) {
            write_volume(volumes_dir(cfg), case_name(c), vol);
        }
    }

    nlohmann::json manifest;
    manifest["config_hash"] = hash;
    manifest["n_cases"] = cfg.n_cases;
    manifest["n_organs"] = cfg.volumes.n_organs;
    manifest["extents"] = {cfg.volumes.depth, cfg.volumes.height, cfg.volumes.width};
    write_file_atomic(volumes_manifest_path(cfg), manifest.dump(2) + "\n");

    write_log(cfg, "gen_volumes",
              "gen-volumes: " + std::to_string(cfg.n_cases) + " cases x " +
                  std::to_string(cfg.volumes.n_organs) + " organs, hash " + hash + "\n");
}

void run_train_anchors(const RunConfig& cfg, bool allow_hash_mismatch) {
    cfg.validate();
    const std::string hash = config_hash(cfg);
    const auto [train, test] = read_split_corpus(cfg, allow_hash_mismatch);
    (void)test;

    const AnchorTrainResult result = train_anchors(train, cfg.anchors);
    write_anchors_json(anchors_path(cfg), result.anchors, hash);

    char tail[64];
    std::snprintf(tail, sizeof(tail), "%.17g", result.epoch_loss.back());
    write_log(cfg, "train_anchors",
              "train-anchors: " + std::to_string(cfg.anchors.epochs) +
                  " epochs, final loss " + tail + ", hash " + hash + "\n");
}

void run_label(const RunConfig& cfg, const LabelOptions& opts) {
    cfg.validate();
    const std::string hash = config_hash(cfg);
    const auto [train, test] = read_split_corpus(cfg, opts.allow_hash_mismatch);
    (void)test;

    Tensor labels;
    if (opts.hard) {
        labels = Tensor({train.size(), static_cast<std::size_t>(cfg.corpus.n_organs)});
        for (std::size_t i = 0; i < train.size(); ++i) {
            labels(i, static_cast<std::size_t>(train[i].organ_id)) = 1.0;
        }
    } else {
        need_file(anchors_path(cfg), "train-anchors");
        const AnchorFile anchors = read_anchors_json(anchors_path(cfg));
        check_hash("anchors", anchors.config_hash, hash, opts.allow_hash_mismatch);
        labels = soft_label_matrix(anchors.anchors, train);
    }
    write_tensor(labels_path(cfg), labels);

    nlohmann::json manifest;
    manifest["config_hash"] = hash;
    manifest["mode"] = opts.hard ? "hard" : "soft";
    manifest["n_records"] = labels.extent(0);
    manifest["n_organs"] = labels.extent(1);
    write_file_atomic(labels_manifest_path(cfg), manifest.dump(2) + "\n");

    std::string log = "label: " + std::string(opts.hard ? "hard" : "soft") + " labels for " +
                      std::to_string(labels.extent(0)) + " records, hash " + hash + "\n";
    if (!opts.heatmap_csv.empty() || !opts.heatmap_pgm.empty()) {
        std::vector<std::string> warnings;
        const Tensor corr = organ_correlation_matrix(labels, &warnings);
        if (!opts.heatmap_csv.empty()) write_heatmap_csv(opts.heatmap_csv, corr);
        if (!opts.heatmap_pgm.empty()) write_heatmap_pgm(opts.heatmap_pgm, corr);
        for (const std::string& w : warnings) log += w + "\n";
    }
    write_log(cfg, "label", log);
}

void run_train(const RunConfig& cfg, bool allow_hash_mismatch) {
    cfg.validate();
    const std::string hash = config_hash(cfg);
    const auto [train, test] = read_split_corpus(cfg, allow_hash_mismatch);
    (void)test;

    need_file(labels_path(cfg), "label");
    check_hash("labels", manifest_hash(labels_manifest_path(cfg)), hash,
               allow_hash_mismatch);
    const Tensor labels = read_tensor(labels_path(cfg));

    need_file(volumes_manifest_path(cfg), "gen-volumes");
    check_hash("volumes", manifest_hash(volumes_manifest_path(cfg)), hash,
               allow_hash_mismatch);
    const std::vector<OrganVolume> volumes = read_all_volumes(cfg);

    const TextHeadTrainResult head_result = train_text_head(train, labels, cfg.text_head);
    save_text_head(text_head_dir(cfg), head_result.head, hash);

    PipelineModel model = init_pipeline_model(cfg.encoder, cfg.corpus.n_organs,
                                              head_result.head.d_feat, cfg.seed);
    const AlignTrainResult align_result =
        train_alignment(model, train, head_result.head, volumes, cfg.align);
    save_pipeline_model(model_dir(cfg), model, hash);
    write_alignment_trace_csv(align_trace_path(cfg), align_result.trace);

    const AlignEpoch& last = align_result.trace.back();
    char tail[160];
    std::snprintf(tail, sizeof(tail), "l_image %.6f, l_align %.6f, l_total %.6f",
                  last.l2d + last.l3d + last.lfusion, last.lalign, last.ltotal);
    write_log(cfg, "train",
              "train: text head " + std::to_string(cfg.text_head.epochs) +
                  " epochs, alignment " + std::to_string(cfg.align.epochs) +
                  " epochs, final " + tail + ", hash " + hash + "\n");
}

namespace {

struct LoadedModel {
    PipelineModel model;
    TextHead head;
};

LoadedModel load_trained(const RunConfig& cfg, bool allow_hash_mismatch) {
    const std::string hash = config_hash(cfg);
    need_file((fs::path(model_dir(cfg)) / "manifest.json").string(), "train");
    need_file((fs::path(text_head_dir(cfg)) / "text_head.json").string(), "train");
    PipelineModelFile model_file = load_pipeline_model(model_dir(cfg));
    check_hash("model", model_file.config_hash, hash, allow_hash_mismatch);
    TextHeadFile head_file = load_text_head(text_head_dir(cfg));
    check_hash("text head", head_file.config_hash, hash, allow_hash_mismatch);
    return {std::move(model_file.model), std::move(head_file.head)};
}

}  // namespace

MetricsReport run_eval(const RunConfig& cfg, const EvalOptions& opts) {
    cfg.validate();
    const std::string hash = config_hash(cfg);
    const auto [train, test] = read_split_corpus(cfg, opts.allow_hash_mismatch);
    (void)train;
    if (test.empty()) throw InputError("eval: the test split is empty");

    LoadedModel loaded = load_trained(cfg, opts.allow_hash_mismatch);
    need_file(volumes_manifest_path(cfg), "gen-volumes");
    check_hash("volumes", manifest_hash(volumes_manifest_path(cfg)), hash,
               opts.allow_hash_mismatch);
    const std::vector<FusedFeatureSet> gallery =
        build_organ_gallery(loaded.model, read_all_volumes(cfg));

    std::vector<RetrievalResult> results;
    results.reserve(test.size());
    for (const SymptomRecord& rec : test) {
        std::vector<double> scores = infer_organ_scores(
            rec.embedding, loaded.head, loaded.model.proj, gallery, opts.mode);
        results.push_back(
            make_retrieval_result(std::move(scores), rec.organ_id, truth_set(rec)));
    }

    const int n = cfg.corpus.n_organs;
    std::vector<std::string> warnings;
    MetricsReport report;
    report.rank1 = rank_k_accuracy(results, 1);
    report.rank2 = rank_k_accuracy(results, std::min(2, n));
    report.rank3 = rank_k_accuracy(results, std::min(3, n));
    report.map = mean_average_precision(results, opts.query_wise_map, &warnings);
    report.n_queries = static_cast<int>(results.size());
    report.config_hash = hash;
    for (const std::string& w : warnings) std::fprintf(stderr, "%s\n", w.c_str());

    write_metrics_json(metrics_path(cfg), report);
    char line[160];
    std::snprintf(line, sizeof(line),
                  "eval: rank1 %.4f, rank2 %.4f, rank3 %.4f, map %.4f over %d queries\n",
                  report.rank1, report.rank2, report.rank3, report.map, report.n_queries);
    write_log(cfg, "eval", std::string(line));
    return report;
}

std::vector<double> embed_query_text(const std::string& text, int d_txt) {
    if (d_txt < 1) throw ConfigError("query text: d_txt must be >= 1");
    std::vector<double> v(static_cast<std::size_t>(d_txt), 0.0);
    std::string token;
    bool any = false;
    const auto flush = [&]() {
        if (token.empty()) return;
        const std::uint64_t h = fnv1a64(token);
        const std::size_t idx = h % v.size();
        v[idx] += ((h >> 32) & 1u) ? -1.0 : 1.0;
        token.clear();
        any = true;
    };
    for (const char c : text) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            token += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        } else {
            flush();
        }
    }
    flush();
    if (!any) throw InputError("query text: no tokens in '" + text + "'");
    const double norm = std::sqrt(kernels::dot(v.data(), v.data(), v.size()));
    if (norm < 1e-12) {
        throw DegenerateVectorError("query text: token signs cancelled to a zero vector");
    }
    for (double& x : v) x /= norm;
    return v;
}

InferResult run_infer(const RunConfig& cfg, const InferOptions& opts) {
    cfg.validate();
    const std::string hash = config_hash(cfg);

    int sources = 0;
    sources += !opts.record_id.empty();
    sources += !opts.embedding_file.empty();
    sources += !opts.text.empty();
    if (opts.anchor_variant ? sources != 0 : sources != 1) {
        throw InputError(opts.anchor_variant
                             ? "infer: the anchor variant takes no query source"
                             : "infer: give exactly one of --record, --embedding-file, "
                               "or --text");
    }

    LoadedModel loaded = load_trained(cfg, opts.allow_hash_mismatch);
    need_file(volumes_manifest_path(cfg), "gen-volumes");
    check_hash("volumes", manifest_hash(volumes_manifest_path(cfg)), hash,
               opts.allow_hash_mismatch);
    const std::vector<OrganVolume> volumes = read_all_volumes(cfg);
    const std::vector<FusedFeatureSet> gallery = build_organ_gallery(loaded.model, volumes);

    std::vector<double> scores;
    if (opts.anchor_variant) {
        need_file(anchors_path(cfg), "train-anchors");
        const AnchorFile anchors = read_anchors_json(anchors_path(cfg));
        check_hash("anchors", anchors.config_hash, hash, opts.allow_hash_mismatch);
        scores = infer_organ_scores_anchor(anchors.anchors, loaded.head,
                                           loaded.model.proj, gallery);
    } else {
        std::vector<double> embedding;
        if (!opts.record_id.empty()) {
            const auto [train, test] = read_split_corpus(cfg, opts.allow_hash_mismatch);
            const SymptomRecord* found = nullptr;
            for (const SymptomRecord& rec : test) {
                if (rec.id == opts.record_id) found = &rec;
            }
            for (const SymptomRecord& rec : train) {
                if (!found && rec.id == opts.record_id) found = &rec;
            }
            if (!found) {
                throw InputError("infer: no record with id '" + opts.record_id + "'");
            }
            embedding = found->embedding;
        } else if (!opts.embedding_file.empty()) {
            const nlohmann::json j = read_json_file(opts.embedding_file);
            if (!j.is_array()) {
                throw InputError("infer: " + opts.embedding_file +
                                 " must hold a JSON array of numbers");
            }
            embedding = j.get<std::vector<double>>();
        } else {
            embedding = embed_query_text(opts.text, cfg.corpus.d_txt);
        }
        const double norm =
            std::sqrt(kernels::dot(embedding.data(), embedding.data(), embedding.size()));
        if (embedding.empty() || norm < 1e-12) {
            throw DegenerateVectorError("infer: query embedding is all zeros");
        }
        scores = infer_organ_scores(embedding, loaded.head, loaded.model.proj, gallery);
    }

    if (!opts.overlay_path.empty()) {
        // Masks from the first case, one volume per organ.
        std::vector<OrganVolume> case0(volumes.begin(),
                                       volumes.begin() + cfg.corpus.n_organs);
        export_probability_overlay(case0, scores, opts.overlay_path, hash);
    }

    InferResult result;
    result.ranking = rank_from_scores(scores);
    result.scores = std::move(scores);
    return result;
}

std::string run_inspect(const std::string& dir) {
    const fs::path manifest = fs::path(dir) / "manifest.json";
    const fs::path head_manifest = fs::path(dir) / "text_head.json";
    std::string out;
    if (fs::exists(manifest)) {
        const Checkpoint ckpt = load_checkpoint(dir);
        out += "checkpoint " + dir + "\n";
        out += "config_hash " + ckpt.config_hash + "\n";
        if (!ckpt.meta.empty()) out += "meta " + ckpt.meta.dump() + "\n";
        std::size_t total = 0;
        for (const auto& [name, tensor] : ckpt.tensors) {
            out += "  " + name + " " + tensor.shape_str() + "\n";
            total += tensor.size();
        }
        out += std::to_string(ckpt.tensors.size()) + " tensors, " + std::to_string(total) +
               " parameters\n";
        return out;
    }
    if (fs::exists(head_manifest)) {
        const TextHeadFile file = load_text_head(dir);
        out += "text head " + dir + "\n";
        out += "config_hash " + file.config_hash + "\n";
        out += "d_txt " + std::to_string(file.head.d_txt) + ", d_hidden " +
               std::to_string(file.head.d_hidden) + ", d_feat " +
               std::to_string(file.head.d_feat) + ", n_organs " +
               std::to_string(file.head.n_organs) + "\n";
        return out;
    }
    throw IoError("inspect: no manifest.json or text_head.json in " + dir);
}

}  // namespace sora
