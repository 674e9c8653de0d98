#include "sora/inference.hpp"

#include "sora/errors.hpp"
#include "sora/kernels.hpp"
#include "sora/rng.hpp"
#include "sora/stats.hpp"
#include "sora/tensor_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>

namespace sora {

namespace {

void warn(std::vector<std::string>* warnings, std::string msg) {
    if (warnings) warnings->push_back(std::move(msg));
}

}  // namespace

std::vector<int> rank_from_scores(const std::vector<double>& scores) {
    if (scores.empty()) throw InputError("ranking: empty score vector");
    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)]) {
            return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
        }
        return a < b;
    });
    return order;
}

RetrievalResult make_retrieval_result(std::vector<double> scores, int primary,
                                      std::vector<int> truth) {
    const int n = static_cast<int>(scores.size());
    if (primary < 0 || primary >= n) {
        throw InputError("retrieval result: primary organ " + std::to_string(primary) +
                         " outside [0," + std::to_string(n) + ")");
    }
    for (int t : truth) {
        if (t < 0 || t >= n) {
            throw InputError("retrieval result: truth organ " + std::to_string(t) +
                             " outside [0," + std::to_string(n) + ")");
        }
    }
    if (std::find(truth.begin(), truth.end(), primary) == truth.end()) {
        truth.push_back(primary);
    }
    std::sort(truth.begin(), truth.end());
    truth.erase(std::unique(truth.begin(), truth.end()), truth.end());

    RetrievalResult r;
    r.ranking = rank_from_scores(scores);
    r.scores = std::move(scores);
    r.primary = primary;
    r.truth = std::move(truth);
    return r;
}

std::vector<int> truth_set(const SymptomRecord& rec, double threshold) {
    std::vector<int> truth = {rec.organ_id};
    if (rec.planted_weights) {
        for (std::size_t i = 0; i < rec.planted_weights->size(); ++i) {
            const int organ = static_cast<int>(i);
            if (organ != rec.organ_id && (*rec.planted_weights)[i] >= threshold) {
                truth.push_back(organ);
            }
        }
    }
    std::sort(truth.begin(), truth.end());
    return truth;
}

GalleryMode gallery_mode_from_string(const std::string& name) {
    if (name == "fused" || name == "cross") return GalleryMode::fused;
    if (name == "concat") return GalleryMode::concat;
    if (name == "2d-only") return GalleryMode::only_2d;
    if (name == "3d-only") return GalleryMode::only_3d;
    throw ConfigError("unknown gallery mode '" + name +
                      "' (expected fused, concat, 2d-only, or 3d-only)");
}

std::vector<FusedFeatureSet> build_organ_gallery(const PipelineModel& model,
                                                 const std::vector<OrganVolume>& volumes) {
    const int n = model.n_organs;
    std::vector<FusedFeatureSet> gallery(static_cast<std::size_t>(n));
    std::vector<int> counts(static_cast<std::size_t>(n), 0);
    for (const OrganVolume& vol : volumes) {
        if (vol.organ_id < 0 || vol.organ_id >= n) {
            throw InputError("gallery: volume organ " + std::to_string(vol.organ_id) +
                             " outside the model range");
        }
        const Tensor f2d = encode_volume_2d(vol, model.enc2d, model.cfg);
        const Tensor f3d = encode_volume_3d(vol, model.enc3d, model.cfg);
        const FusedFeatureSet set =
            fuse_features(f2d, f3d, model.xattn, model.cfg.n_heads);
        const std::size_t i = static_cast<std::size_t>(vol.organ_id);
        if (counts[i] == 0) {
            gallery[i] = set;
        } else {
            for (std::size_t j = 0; j < set.f2d.size(); ++j) gallery[i].f2d[j] += set.f2d[j];
            for (std::size_t j = 0; j < set.f3d.size(); ++j) gallery[i].f3d[j] += set.f3d[j];
            for (std::size_t j = 0; j < set.fout.size(); ++j) gallery[i].fout[j] += set.fout[j];
            for (std::size_t j = 0; j < set.fused.size(); ++j) {
                gallery[i].fused[j] += set.fused[j];
            }
        }
        ++counts[i];
    }
    for (int i = 0; i < n; ++i) {
        const std::size_t ui = static_cast<std::size_t>(i);
        if (counts[ui] == 0) {
            throw InputError("gallery: no volume for organ " + std::to_string(i));
        }
        const double inv = 1.0 / static_cast<double>(counts[ui]);
        for (std::size_t j = 0; j < gallery[ui].f2d.size(); ++j) gallery[ui].f2d[j] *= inv;
        for (std::size_t j = 0; j < gallery[ui].f3d.size(); ++j) gallery[ui].f3d[j] *= inv;
        for (std::size_t j = 0; j < gallery[ui].fout.size(); ++j) gallery[ui].fout[j] *= inv;
        for (std::size_t j = 0; j < gallery[ui].fused.size(); ++j) {
            gallery[ui].fused[j] *= inv;
        }
    }
    return gallery;
}

namespace {

// Rows compared against the query under a gallery mode. concat doubles the
// feature width, so the query vector is doubled to match.
Tensor scoring_rows(const FusedFeatureSet& set, GalleryMode mode) {
    switch (mode) {
        case GalleryMode::fused:
            return set.fused;
        case GalleryMode::only_2d:
            return set.f2d;
        case GalleryMode::only_3d: {
            Tensor rows({1, set.f3d.size()});
            for (std::size_t j = 0; j < set.f3d.size(); ++j) rows[j] = set.f3d[j];
            return rows;
        }
        case GalleryMode::concat: {
            const std::size_t rows_n = set.f2d.extent(0), d = set.f2d.extent(1);
            Tensor rows({rows_n, 2 * d});
            for (std::size_t l = 0; l < rows_n; ++l) {
                for (std::size_t j = 0; j < d; ++j) {
                    rows(l, j) = set.f2d(l, j);
                    rows(l, d + j) = set.f3d[j];
                }
            }
            return rows;
        }
    }
    throw InputError("gallery: unknown mode");
}

std::vector<double> scoring_query(const std::vector<double>& f_hat, GalleryMode mode) {
    if (mode != GalleryMode::concat) return f_hat;
    std::vector<double> doubled(2 * f_hat.size());
    for (std::size_t j = 0; j < f_hat.size(); ++j) {
        doubled[j] = f_hat[j];
        doubled[f_hat.size() + j] = f_hat[j];
    }
    return doubled;
}

}  // namespace

std::vector<double> score_query(const std::vector<double>& f_hat,
                                const std::vector<FusedFeatureSet>& gallery,
                                GalleryMode mode) {
    if (gallery.empty()) throw InputError("gallery: no organs");
    const std::vector<double> q = scoring_query(f_hat, mode);
    std::vector<double> scores;
    scores.reserve(gallery.size());
    for (std::size_t i = 0; i < gallery.size(); ++i) {
        const FusedFeatureSet& set = gallery[i];
        if (set.fused.rank() != 2 || set.fused.size() == 0) {
            throw InputError("gallery: missing organ " + std::to_string(i));
        }
        const Tensor rows = scoring_rows(set, mode);
        scores.push_back((avg_sim(rows, {q}) + 1.0) / 2.0);
    }
    return scores;
}

std::vector<double> infer_organ_scores(const std::vector<double>& query_embedding,
                                       const TextHead& head,
                                       const AlignmentProjection& proj,
                                       const std::vector<FusedFeatureSet>& gallery,
                                       GalleryMode mode) {
    const std::vector<double> f_bar = embed_text(head, query_embedding);
    return score_query(project_text(proj, f_bar), gallery, mode);
}

std::vector<double> infer_organ_scores_anchor(const std::vector<OrganAnchorPair>& anchors,
                                              const TextHead& head,
                                              const AlignmentProjection& proj,
                                              const std::vector<FusedFeatureSet>& gallery) {
    if (anchors.size() != gallery.size()) {
        throw InputError("anchor scoring: " + std::to_string(anchors.size()) +
                         " anchors vs " + std::to_string(gallery.size()) + " gallery organs");
    }
    std::vector<double> scores;
    scores.reserve(gallery.size());
    for (std::size_t i = 0; i < gallery.size(); ++i) {
        const std::vector<double> f_hat =
            project_text(proj, embed_text(head, anchors[i].v_plus));
        const Tensor& fused = gallery[i].fused;
        if (fused.rank() != 2 || fused.size() == 0) {
            throw InputError("gallery: missing organ " + std::to_string(i));
        }
        const std::size_t rows = fused.extent(0), d = fused.extent(1);
        std::vector<double> mean(d, 0.0);
        for (std::size_t l = 0; l < rows; ++l) {
            for (std::size_t j = 0; j < d; ++j) mean[j] += fused(l, j);
        }
        for (double& x : mean) x /= static_cast<double>(rows);
        scores.push_back((cosine(f_hat.data(), mean.data(), d) + 1.0) / 2.0);
    }
    return scores;
}

double rank_k_accuracy(const std::vector<RetrievalResult>& results, int k) {
    if (results.empty()) throw InputError("rank_k: no queries");
    const int n = static_cast<int>(results.front().scores.size());
    if (k < 1 || k > n) {
        throw InputError("rank_k: k = " + std::to_string(k) + " outside [1," +
                         std::to_string(n) + "]");
    }
    std::size_t hits = 0;
    for (const RetrievalResult& r : results) {
        const auto end = r.ranking.begin() + k;
        if (std::find(r.ranking.begin(), end, r.primary) != end) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(results.size());
}

namespace {

// Average precision over a ranked 0/1 relevance list.
double average_precision(const std::vector<int>& relevance) {
    double positives = 0.0, ap = 0.0;
    for (std::size_t r = 0; r < relevance.size(); ++r) {
        if (relevance[r]) {
            positives += 1.0;
            ap += positives / static_cast<double>(r + 1);
        }
    }
    if (positives == 0.0) return -1.0;
    return ap / positives;
}

}  // namespace

double mean_average_precision(const std::vector<RetrievalResult>& results,
                              bool query_wise, std::vector<std::string>* warnings) {
    if (results.empty()) throw InputError("mAP: no queries");
    const std::size_t n = results.front().scores.size();
    for (const RetrievalResult& r : results) {
        if (r.scores.size() != n) {
            throw DimensionError("mAP: inconsistent score vector lengths");
        }
    }

    if (query_wise) {
        double total = 0.0;
        for (const RetrievalResult& r : results) {
            std::vector<int> relevance(n, 0);
            for (std::size_t pos = 0; pos < n; ++pos) {
                const int organ = r.ranking[pos];
                relevance[pos] = std::binary_search(r.truth.begin(), r.truth.end(), organ);
            }
            const double ap = average_precision(relevance);
            if (ap < 0.0) throw InputError("mAP: query with no positive organs");
            total += ap;
        }
        return total / static_cast<double>(results.size());
    }

    double total = 0.0;
    std::size_t classes = 0;
    for (std::size_t organ = 0; organ < n; ++organ) {
        // Queries ranked by this organ's score; ties by ascending query index.
        std::vector<std::size_t> order(results.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return results[a].scores[organ] > results[b].scores[organ];
        });
        std::vector<int> relevance;
        relevance.reserve(results.size());
        for (const std::size_t q : order) {
            relevance.push_back(std::binary_search(results[q].truth.begin(),
                                                   results[q].truth.end(),
                                                   static_cast<int>(organ)));
        }
        const double ap = average_precision(relevance);
        if (ap < 0.0) {
            warn(warnings, "mAP: organ " + std::to_string(organ) +
                               " has no positive queries; excluded");
            continue;
        }
        total += ap;
        ++classes;
    }
    if (classes == 0) throw InputError("mAP: every organ class lacks positives");
    return total / static_cast<double>(classes);
}

NeighborLists closest_farthest(const std::vector<double>& anchor,
                               const std::vector<SymptomRecord>& corpus, std::size_t n,
                               std::vector<std::string>* warnings) {
    if (corpus.empty()) throw InputError("closest_farthest: empty corpus");
    if (n > corpus.size()) {
        warn(warnings, "closest_farthest: n = " + std::to_string(n) + " clamped to " +
                           std::to_string(corpus.size()) + " records");
        n = corpus.size();
    }
    std::vector<NeighborEntry> entries;
    entries.reserve(corpus.size());
    for (const SymptomRecord& rec : corpus) {
        if (rec.embedding.size() != anchor.size()) {
            throw DimensionError("closest_farthest: record " + rec.id + " embedding size " +
                                 std::to_string(rec.embedding.size()) + " vs anchor " +
                                 std::to_string(anchor.size()));
        }
        double d2 = 0.0;
        for (std::size_t j = 0; j < anchor.size(); ++j) {
            const double diff = rec.embedding[j] - anchor[j];
            d2 += diff * diff;
        }
        entries.push_back({std::sqrt(d2), &rec});
    }
    NeighborLists lists;
    lists.nearest = entries;
    std::sort(lists.nearest.begin(), lists.nearest.end(),
              [](const NeighborEntry& a, const NeighborEntry& b) {
                  if (a.distance != b.distance) return a.distance < b.distance;
                  return a.record->id < b.record->id;
              });
    lists.farthest = entries;
    std::sort(lists.farthest.begin(), lists.farthest.end(),
              [](const NeighborEntry& a, const NeighborEntry& b) {
                  if (a.distance != b.distance) return a.distance > b.distance;
                  return a.record->id < b.record->id;
              });
    lists.nearest.resize(n);
    lists.farthest.resize(n);
    return lists;
}

Tensor organ_correlation_matrix(const Tensor& soft_labels,
                                std::vector<std::string>* warnings) {
    if (soft_labels.rank() != 2 || soft_labels.extent(0) < 2) {
        throw InputError("correlation: need a [n >= 2, N] soft-label matrix");
    }
    const std::size_t rows = soft_labels.extent(0), n = soft_labels.extent(1);
    std::vector<double> mean(n, 0.0), var(n, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < n; ++c) mean[c] += soft_labels(r, c);
    }
    for (double& m : mean) m /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
            const double d = soft_labels(r, c) - mean[c];
            var[c] += d * d;
        }
    }
    std::vector<bool> degenerate(n, false);
    for (std::size_t c = 0; c < n; ++c) {
        if (var[c] <= 0.0) {
            degenerate[c] = true;
            warn(warnings, "correlation: organ " + std::to_string(c) +
                               " has zero variance; entries set to 0");
        }
    }
    Tensor corr({n, n});
    for (std::size_t a = 0; a < n; ++a) {
        corr(a, a) = 1.0;
        for (std::size_t b = a + 1; b < n; ++b) {
            double cov = 0.0;
            for (std::size_t r = 0; r < rows; ++r) {
                cov += (soft_labels(r, a) - mean[a]) * (soft_labels(r, b) - mean[b]);
            }
            const double value = (degenerate[a] || degenerate[b])
                                     ? 0.0
                                     : cov / std::sqrt(var[a] * var[b]);
            corr(a, b) = value;
            corr(b, a) = value;
        }
    }
    return corr;
}

void export_probability_overlay(const std::vector<OrganVolume>& volumes,
                                const std::vector<double>& scores,
                                const std::string& path,
                                const std::string& config_hash) {
    if (volumes.empty()) throw InputError("overlay: no volumes");
    if (volumes.size() != scores.size()) {
        throw InputError("overlay: " + std::to_string(volumes.size()) + " volumes vs " +
                         std::to_string(scores.size()) + " scores");
    }
    const auto& shape = volumes.front().mask.shape();
    Tensor overlay(shape);
    for (std::size_t i = 0; i < volumes.size(); ++i) {
        const Tensor& mask = volumes[i].mask;
        if (mask.shape() != shape) {
            throw DimensionError("overlay: volume " + std::to_string(i) + " shape " +
                                 mask.shape_str() + " disagrees with the first volume");
        }
        for (std::size_t v = 0; v < mask.size(); ++v) {
            if (mask[v] != 0.0) overlay[v] = std::max(overlay[v], scores[i]);
        }
    }
    write_tensor(path, overlay);

    nlohmann::json sidecar;
    sidecar["config_hash"] = config_hash;
    nlohmann::json per_organ = nlohmann::json::array();
    for (std::size_t i = 0; i < volumes.size(); ++i) {
        per_organ.push_back({{"organ_id", volumes[i].organ_id}, {"score", scores[i]}});
    }
    sidecar["scores"] = per_organ;
    write_file_atomic(path + ".json", sidecar.dump(2) + "\n");
}

void write_heatmap_csv(const std::string& path, const Tensor& m) {
    if (m.rank() != 2) throw InputError("heatmap: need a rank-2 tensor");
    std::string csv;
    char cell[40];
    for (std::size_t r = 0; r < m.extent(0); ++r) {
        for (std::size_t c = 0; c < m.extent(1); ++c) {
            std::snprintf(cell, sizeof(cell), "%.17g", m(r, c));
            if (c) csv += ',';
            csv += cell;
        }
        csv += '\n';
    }
    write_file_atomic(path, csv);
}

void write_heatmap_pgm(const std::string& path, const Tensor& m) {
    if (m.rank() != 2) throw InputError("heatmap: need a rank-2 tensor");
    std::string pgm = "P5\n" + std::to_string(m.extent(1)) + " " +
                      std::to_string(m.extent(0)) + "\n255\n";
    for (std::size_t i = 0; i < m.size(); ++i) {
        const double unit = std::clamp((m[i] + 1.0) / 2.0, 0.0, 1.0);
        pgm += static_cast<char>(static_cast<unsigned char>(std::lround(unit * 255.0)));
    }
    write_file_atomic(path, pgm);
}

void write_metrics_json(const std::string& path, const MetricsReport& report) {
    nlohmann::json j;
    j["rank1"] = report.rank1;
    j["rank2"] = report.rank2;
    j["rank3"] = report.rank3;
    j["map"] = report.map;
    j["n_queries"] = report.n_queries;
    j["config_hash"] = report.config_hash;
    write_file_atomic(path, j.dump(2) + "\n");
}

MetricsReport read_metrics_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("metrics: cannot open " + path);
    MetricsReport report;
    try {
        nlohmann::json j;
        in >> j;
        report.rank1 = j.at("rank1").get<double>();
        report.rank2 = j.at("rank2").get<double>();
        report.rank3 = j.at("rank3").get<double>();
        report.map = j.at("map").get<double>();
        report.n_queries = j.at("n_queries").get<int>();
        report.config_hash = j.at("config_hash").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError("metrics: malformed " + path + ": " + e.what());
    }
    return report;
}

std::vector<std::vector<double>> make_ood_embeddings(const Tensor& prototypes, int n,
                                                     std::uint64_t seed) {
    if (prototypes.rank() != 2) throw InputError("ood: prototypes must be [N, d]");
    if (n < 1) throw InputError("ood: need n >= 1");
    const std::size_t protos = prototypes.extent(0), d = prototypes.extent(1);
    if (d <= protos) {
        throw InputError("ood: embedding dimension " + std::to_string(d) +
                         " leaves no orthogonal complement for " + std::to_string(protos) +
                         " prototypes");
    }
    Rng rng(seed, 77);
    std::vector<std::vector<double>> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        std::vector<double> v(d);
        for (double& x : v) x = rng.normal();
        // Two Gram-Schmidt passes against the prototype rows.
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t p = 0; p < protos; ++p) {
                const double* row = prototypes.data() + p * d;
                const double proj = kernels::dot(v.data(), row, d);
                kernels::axpy(v.data(), row, -proj, d);
            }
        }
        const double norm = std::sqrt(kernels::dot(v.data(), v.data(), d));
        if (norm < 1e-9) {
            throw NumericError("ood: degenerate probe after orthogonalization");
        }
        for (double& x : v) x /= norm;
        out.push_back(std::move(v));
    }
    return out;
}

}  // namespace sora
