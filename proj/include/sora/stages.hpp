#pragma once

#include "sora/inference.hpp"
#include "sora/run_config.hpp"

#include <string>
#include <vector>

namespace sora {

// Pipeline stages shared by the CLI and the test harnesses. Every stage
// writes its artifacts under cfg.out_dir, embeds the config hash, and
// refuses artifacts whose hash disagrees unless allow_hash_mismatch is set.

void run_gen_corpus(const RunConfig& cfg);
void run_gen_volumes(const RunConfig& cfg);
void run_train_anchors(const RunConfig& cfg, bool allow_hash_mismatch = false);

struct LabelOptions {
    bool hard = false;
    std::string heatmap_csv;  // optional correlation heatmap exports
    std::string heatmap_pgm;
    bool allow_hash_mismatch = false;
};
void run_label(const RunConfig& cfg, const LabelOptions& opts = {});

void run_train(const RunConfig& cfg, bool allow_hash_mismatch = false);

struct EvalOptions {
    GalleryMode mode = GalleryMode::fused;
    bool query_wise_map = false;
    bool allow_hash_mismatch = false;
};
MetricsReport run_eval(const RunConfig& cfg, const EvalOptions& opts = {});

struct InferOptions {
    std::string record_id;        // exactly one query source unless
    std::string embedding_file;   // anchor_variant is set
    std::string text;
    bool anchor_variant = false;
    std::string overlay_path;     // optional probability overlay export
    bool allow_hash_mismatch = false;
};
struct InferResult {
    std::vector<double> scores;
    std::vector<int> ranking;
};
InferResult run_infer(const RunConfig& cfg, const InferOptions& opts);

// Human-readable summary of a checkpoint directory (model or text head).
std::string run_inspect(const std::string& dir);

// Deterministic stand-in embedding for free-form query text: hashed
// bag-of-tokens on the unit sphere.
std::vector<double> embed_query_text(const std::string& text, int d_txt);

// Artifact locations under an output directory.
std::string corpus_train_path(const RunConfig& cfg);
std::string corpus_test_path(const RunConfig& cfg);
std::string volumes_dir(const RunConfig& cfg);
std::string anchors_path(const RunConfig& cfg);
std::string labels_path(const RunConfig& cfg);
std::string text_head_dir(const RunConfig& cfg);
std::string model_dir(const RunConfig& cfg);
std::string align_trace_path(const RunConfig& cfg);
std::string metrics_path(const RunConfig& cfg);

}  // namespace sora
