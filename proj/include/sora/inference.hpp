#pragma once

#include "sora/alignment.hpp"
#include "sora/anchors.hpp"
#include "sora/corpus.hpp"
#include "sora/fusion.hpp"
#include "sora/tensor.hpp"
#include "sora/text_head.hpp"
#include "sora/volumes.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace sora {

// One scored query: scores indexed by organ id, the ranking they induce
// (descending score, ties by ascending organ id), and the ground truth.
struct RetrievalResult {
    std::vector<double> scores;
    std::vector<int> ranking;
    int primary = 0;
    std::vector<int> truth;  // sorted ascending, always contains primary
};

std::vector<int> rank_from_scores(const std::vector<double>& scores);
RetrievalResult make_retrieval_result(std::vector<double> scores, int primary,
                                      std::vector<int> truth);

// Ground-truth organ set of a synthetic record: every organ whose planted
// weight reaches the threshold, plus the primary organ always.
std::vector<int> truth_set(const SymptomRecord& rec, double threshold = 0.5);

// How gallery features are presented to the query during scoring. fused is
// the trained path; the others exist for the fusion ablation.
enum class GalleryMode { fused, concat, only_2d, only_3d };
GalleryMode gallery_mode_from_string(const std::string& name);

std::vector<FusedFeatureSet> build_organ_gallery(const PipelineModel& model,
                                                 const std::vector<OrganVolume>& volumes);

// Scores a projected query vector against every organ: (avgSim + 1) / 2.
std::vector<double> score_query(const std::vector<double>& f_hat,
                                const std::vector<FusedFeatureSet>& gallery,
                                GalleryMode mode = GalleryMode::fused);

// Full text path: query embedding -> frozen text head -> projection -> scores.
std::vector<double> infer_organ_scores(const std::vector<double>& query_embedding,
                                       const TextHead& head,
                                       const AlignmentProjection& proj,
                                       const std::vector<FusedFeatureSet>& gallery,
                                       GalleryMode mode = GalleryMode::fused);

// Anchor variant: each organ's positive anchor rides through the same text
// path and meets the mean fused feature of its organ.
std::vector<double> infer_organ_scores_anchor(const std::vector<OrganAnchorPair>& anchors,
                                              const TextHead& head,
                                              const AlignmentProjection& proj,
                                              const std::vector<FusedFeatureSet>& gallery);

double rank_k_accuracy(const std::vector<RetrievalResult>& results, int k);

// Macro class-wise mean average precision: per organ class, queries are
// ranked by that organ's score and AP is taken over the class's positives;
// classes without positives are excluded with a warning. The query-wise
// variant averages AP over each query's own organ ranking instead.
double mean_average_precision(const std::vector<RetrievalResult>& results,
                              bool query_wise = false,
                              std::vector<std::string>* warnings = nullptr);

struct NeighborEntry {
    double distance = 0.0;
    const SymptomRecord* record = nullptr;
};
struct NeighborLists {
    std::vector<NeighborEntry> nearest;   // ascending distance, ties by id
    std::vector<NeighborEntry> farthest;  // descending distance, ties by id
};
NeighborLists closest_farthest(const std::vector<double>& anchor,
                               const std::vector<SymptomRecord>& corpus, std::size_t n,
                               std::vector<std::string>* warnings = nullptr);

// Pearson correlation between per-organ soft-label columns. Zero-variance
// columns get 0 off-diagonal entries and a warning; the diagonal stays 1.
Tensor organ_correlation_matrix(const Tensor& soft_labels,
                                std::vector<std::string>* warnings = nullptr);

// Writes a D x H x W volume where voxels inside organ i's mask hold
// scores[i] (overlaps resolved by max), background 0, plus a JSON sidecar
// at path + ".json" with the per-organ scores.
void export_probability_overlay(const std::vector<OrganVolume>& volumes,
                                const std::vector<double>& scores,
                                const std::string& path,
                                const std::string& config_hash);

void write_heatmap_csv(const std::string& path, const Tensor& m);
// 8-bit P5 render mapping [-1, 1] to [0, 255].
void write_heatmap_pgm(const std::string& path, const Tensor& m);

struct MetricsReport {
    double rank1 = 0.0, rank2 = 0.0, rank3 = 0.0, map = 0.0;
    int n_queries = 0;
    std::string config_hash;
};
void write_metrics_json(const std::string& path, const MetricsReport& report);
MetricsReport read_metrics_json(const std::string& path);

// Probe embeddings orthogonal to every corpus prototype row, for the
// out-of-domain analysis.
std::vector<std::vector<double>> make_ood_embeddings(const Tensor& prototypes, int n,
                                                     std::uint64_t seed);

}  // namespace sora
