#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sora/encoders.hpp"
#include "sora/errors.hpp"
#include "sora/inference.hpp"
#include "sora/rng.hpp"
#include "sora/stats.hpp"
#include "sora/tensor_io.hpp"
#include "sora/volumes.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

using namespace sora;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("sora_inf_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

std::vector<double> random_scores(Rng& rng, int n) {
    std::vector<double> s(static_cast<std::size_t>(n));
    for (double& x : s) x = rng.uniform();
    return s;
}

// Random result set where each query's truth holds the primary plus any
// other organ drawn with probability 1/3.
std::vector<RetrievalResult> random_results(std::uint64_t seed, int n_organs,
                                            int n_queries) {
    Rng rng(seed, 3);
    std::vector<RetrievalResult> results;
    results.reserve(static_cast<std::size_t>(n_queries));
    for (int q = 0; q < n_queries; ++q) {
        const int primary = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_organs)));
        std::vector<int> truth{primary};
        for (int o = 0; o < n_organs; ++o) {
            if (o != primary && rng.below(3) == 0) truth.push_back(o);
        }
        results.push_back(
            make_retrieval_result(random_scores(rng, n_organs), primary, truth));
    }
    return results;
}

// Rank of `organ` in a result without sorting: one plus the number of
// organs that beat it on score, or on id at equal score.
int rank_position(const std::vector<double>& scores, int organ) {
    int pos = 1;
    for (int o = 0; o < static_cast<int>(scores.size()); ++o) {
        if (o == organ) continue;
        const double s = scores[static_cast<std::size_t>(o)];
        const double mine = scores[static_cast<std::size_t>(organ)];
        if (s > mine || (s == mine && o < organ)) ++pos;
    }
    return pos;
}

bool is_relevant(const RetrievalResult& r, int organ) {
    return std::binary_search(r.truth.begin(), r.truth.end(), organ);
}

// Counting-based macro mAP, no sort anywhere.
double map_oracle(const std::vector<RetrievalResult>& results, int n_organs) {
    double sum = 0.0;
    int classes = 0;
    for (int o = 0; o < n_organs; ++o) {
        int positives = 0;
        double ap = 0.0;
        for (std::size_t q = 0; q < results.size(); ++q) {
            if (!is_relevant(results[q], o)) continue;
            ++positives;
            const double mine = results[q].scores[static_cast<std::size_t>(o)];
            int rank = 1, hits = 1;
            for (std::size_t p = 0; p < results.size(); ++p) {
                if (p == q) continue;
                const double s = results[p].scores[static_cast<std::size_t>(o)];
                if (s > mine || (s == mine && p < q)) {
                    ++rank;
                    if (is_relevant(results[p], o)) ++hits;
                }
            }
            ap += static_cast<double>(hits) / static_cast<double>(rank);
        }
        if (positives > 0) {
            sum += ap / positives;
            ++classes;
        }
    }
    return sum / classes;
}

FusedFeatureSet manual_set(const Tensor& f2d, const Tensor& f3d, const Tensor& fout) {
    FusedFeatureSet set;
    set.f2d = f2d;
    set.f3d = f3d;
    set.fout = fout;
    set.fused = Tensor(f2d.shape());
    for (std::size_t i = 0; i < set.fused.size(); ++i) set.fused[i] = f2d[i] + fout[i];
    return set;
}

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c) {
    Tensor t({r, c});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
    return t;
}

OrganVolume manual_volume(int organ, std::size_t d, std::size_t h, std::size_t w,
                          const std::vector<double>& mask_bits) {
    OrganVolume vol;
    vol.organ_id = organ;
    vol.mask = Tensor({d, h, w}, mask_bits);
    vol.voxels = Tensor({d, h, w});
    for (std::size_t i = 0; i < vol.mask.size(); ++i) {
        vol.voxels[i] = vol.mask[i] != 0.0 ? 0.5 : 0.0;
    }
    return vol;
}

}  // namespace

TEST_CASE("rank_from_scores sorts descending with ascending-id ties") {
    CHECK(rank_from_scores({0.2, 0.9, 0.5}) == std::vector<int>{1, 2, 0});
    CHECK(rank_from_scores({0.4, 0.4, 0.4}) == std::vector<int>{0, 1, 2});
    CHECK(rank_from_scores({0.1, 0.7, 0.7, 0.3}) == std::vector<int>{1, 2, 3, 0});
    CHECK_THROWS_AS((void)rank_from_scores({}), InputError);
}

TEST_CASE("make_retrieval_result validates and normalizes the truth set") {
    RetrievalResult r = make_retrieval_result({0.1, 0.8, 0.3}, 2, {1, 1});
    CHECK(r.primary == 2);
    CHECK(r.truth == std::vector<int>{1, 2});  // deduped, primary appended, sorted
    CHECK(r.ranking == std::vector<int>{1, 2, 0});

    CHECK_THROWS_AS((void)make_retrieval_result({0.1, 0.8}, 2, {}), InputError);
    CHECK_THROWS_AS((void)make_retrieval_result({0.1, 0.8}, -1, {}), InputError);
    CHECK_THROWS_AS((void)make_retrieval_result({0.1, 0.8}, 0, {3}), InputError);
}

TEST_CASE("truth_set holds the primary and every planted organ at threshold") {
    SymptomRecord rec;
    rec.organ_id = 0;
    rec.planted_weights = std::vector<double>{1.0, 0.6, 0.5, 0.49};
    CHECK(truth_set(rec) == std::vector<int>{0, 1, 2});  // 0.5 makes the cut, 0.49 not

    SymptomRecord bare;
    bare.organ_id = 3;
    CHECK(truth_set(bare) == std::vector<int>{3});

    rec.organ_id = 3;  // primary always present even below threshold
    rec.planted_weights = std::vector<double>{1.0, 0.0, 0.0, 0.2};
    CHECK(truth_set(rec) == std::vector<int>{0, 3});
}

TEST_CASE("rank_k_accuracy matches a counting oracle on random score matrices") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto results = random_results(seed, 7, 40);
        for (int k = 1; k <= 7; ++k) {
            int hits = 0;
            for (const RetrievalResult& r : results) {
                if (rank_position(r.scores, r.primary) <= k) ++hits;
            }
            const double want = static_cast<double>(hits) / 40.0;
            CHECK(rank_k_accuracy(results, k) == doctest::Approx(want).epsilon(1e-12));
        }
    }
}

TEST_CASE("rank_k_accuracy is monotone in k and ends at 1") {
    const auto results = random_results(4, 5, 30);
    double prev = 0.0;
    for (int k = 1; k <= 5; ++k) {
        const double acc = rank_k_accuracy(results, k);
        CHECK(acc >= prev);
        prev = acc;
    }
    CHECK(prev == 1.0);
}

TEST_CASE("rank_k_accuracy rejects bad k and empty input") {
    const auto results = random_results(0, 4, 5);
    CHECK_THROWS_AS((void)rank_k_accuracy(results, 0), InputError);
    CHECK_THROWS_AS((void)rank_k_accuracy(results, 5), InputError);
    CHECK_THROWS_AS((void)rank_k_accuracy({}, 1), InputError);
}

TEST_CASE("mean_average_precision matches the counting oracle") {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        const auto results = random_results(seed + 20, 6, 25);
        const double got = mean_average_precision(results);
        CHECK(std::abs(got - map_oracle(results, 6)) < 1e-12);
    }
}

TEST_CASE("perfect ranking gives mAP 1") {
    // Every query scores its own truth organs strictly above the rest.
    std::vector<RetrievalResult> results;
    for (int q = 0; q < 8; ++q) {
        const int primary = q % 4;
        std::vector<double> scores(4, 0.1);
        scores[static_cast<std::size_t>(primary)] = 0.9;
        results.push_back(make_retrieval_result(std::move(scores), primary, {}));
    }
    CHECK(mean_average_precision(results) == 1.0);
    CHECK(mean_average_precision(results, true) == 1.0);
}

TEST_CASE("query-wise AP with a single positive at rank r is 1/r") {
    // Organ 2 is the only truth; two organs outscore it, so its rank is 3.
    std::vector<double> scores{0.9, 0.8, 0.5, 0.2, 0.1};
    const auto result = make_retrieval_result(std::move(scores), 2, {});
    CHECK(mean_average_precision({result}, true) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("mAP is invariant under strictly monotone score transforms") {
    const auto results = random_results(7, 5, 20);
    std::vector<RetrievalResult> warped;
    for (const RetrievalResult& r : results) {
        std::vector<double> scores = r.scores;
        for (double& s : scores) s = std::exp(3.0 * s) + 1.0;
        std::vector<int> truth = r.truth;
        warped.push_back(make_retrieval_result(std::move(scores), r.primary, std::move(truth)));
        CHECK(warped.back().ranking == r.ranking);
    }
    CHECK(mean_average_precision(warped) == mean_average_precision(results));
    CHECK(mean_average_precision(warped, true) == mean_average_precision(results, true));
}

TEST_CASE("classes without positives are skipped with a warning") {
    // Nobody lists organ 2: three organs, truths only over {0, 1}.
    std::vector<RetrievalResult> results;
    results.push_back(make_retrieval_result({0.9, 0.2, 0.1}, 0, {}));
    results.push_back(make_retrieval_result({0.3, 0.8, 0.2}, 1, {}));
    std::vector<std::string> warnings;
    const double got = mean_average_precision(results, false, &warnings);
    REQUIRE(warnings.size() == 1);
    CHECK(warnings[0].find("2") != std::string::npos);
    CHECK(got == map_oracle(results, 3));
    CHECK(got == 1.0);  // both remaining classes rank their positive first
}

TEST_CASE("gallery_mode_from_string accepts the documented names") {
    CHECK(gallery_mode_from_string("fused") == GalleryMode::fused);
    CHECK(gallery_mode_from_string("cross") == GalleryMode::fused);
    CHECK(gallery_mode_from_string("concat") == GalleryMode::concat);
    CHECK(gallery_mode_from_string("2d-only") == GalleryMode::only_2d);
    CHECK(gallery_mode_from_string("3d-only") == GalleryMode::only_3d);
    CHECK_THROWS_AS((void)gallery_mode_from_string("bilinear"), ConfigError);
}

TEST_CASE("score_query matches a cosine loop oracle in every mode") {
    Rng rng(31, 0);
    const std::size_t d = 6, rows = 3;
    std::vector<FusedFeatureSet> gallery;
    for (int organ = 0; organ < 4; ++organ) {
        gallery.push_back(manual_set(random_matrix(rng, rows, d), random_matrix(rng, 1, d),
                                     random_matrix(rng, rows, d)));
        gallery.back().f3d = Tensor({d}, std::vector<double>(
                                             gallery.back().f3d.data(),
                                             gallery.back().f3d.data() + d));
    }
    std::vector<double> q(d);
    for (double& x : q) x = rng.normal();

    const auto mode_rows = [&](const FusedFeatureSet& set, GalleryMode mode) {
        std::vector<std::vector<double>> out;
        if (mode == GalleryMode::only_3d) {
            out.emplace_back(set.f3d.data(), set.f3d.data() + d);
        } else if (mode == GalleryMode::concat) {
            for (std::size_t r = 0; r < rows; ++r) {
                std::vector<double> row(set.f2d.data() + r * d, set.f2d.data() + (r + 1) * d);
                row.insert(row.end(), set.f3d.data(), set.f3d.data() + d);
                out.push_back(std::move(row));
            }
        } else {
            const Tensor& src = mode == GalleryMode::only_2d ? set.f2d : set.fused;
            for (std::size_t r = 0; r < rows; ++r) {
                out.emplace_back(src.data() + r * d, src.data() + (r + 1) * d);
            }
        }
        return out;
    };

    for (GalleryMode mode : {GalleryMode::fused, GalleryMode::concat, GalleryMode::only_2d,
                             GalleryMode::only_3d}) {
        std::vector<double> query = q;
        if (mode == GalleryMode::concat) query.insert(query.end(), q.begin(), q.end());
        const std::vector<double> got = score_query(q, gallery, mode);
        REQUIRE(got.size() == gallery.size());
        for (std::size_t o = 0; o < gallery.size(); ++o) {
            double acc = 0.0;
            const auto organ_rows = mode_rows(gallery[o], mode);
            for (const auto& row : organ_rows) acc += cosine(row, query);
            const double want = (acc / organ_rows.size() + 1.0) / 2.0;
            CHECK(std::abs(got[o] - want) < 1e-12);
            CHECK(got[o] >= 0.0);
            CHECK(got[o] <= 1.0);
        }
    }
}

TEST_CASE("scores are invariant to positive query rescaling") {
    Rng rng(32, 0);
    std::vector<FusedFeatureSet> gallery;
    for (int organ = 0; organ < 3; ++organ) {
        Tensor f3d({5});
        for (std::size_t i = 0; i < 5; ++i) f3d[i] = rng.normal();
        gallery.push_back(manual_set(random_matrix(rng, 2, 5), f3d, random_matrix(rng, 2, 5)));
    }
    std::vector<double> q(5);
    for (double& x : q) x = rng.normal();

    const std::vector<double> base = score_query(q, gallery);
    std::vector<double> doubled = q, odd = q;
    for (double& x : doubled) x *= 4.0;  // power of two: bit-identical cosines
    for (double& x : odd) x *= 3.25;
    const std::vector<double> got2 = score_query(doubled, gallery);
    const std::vector<double> got3 = score_query(odd, gallery);
    for (std::size_t o = 0; o < base.size(); ++o) {
        CHECK(got2[o] == base[o]);
        CHECK(std::abs(got3[o] - base[o]) < 1e-12);
    }
}

TEST_CASE("build_organ_gallery averages fused features across cases") {
    EncoderConfig cfg;
    cfg.d_img = 16;
    cfg.n_blocks_2d = 1;
    cfg.n_blocks_3d = 1;
    cfg.n_heads = 2;
    cfg.depth = 4;
    cfg.height = 16;
    cfg.width = 16;
    cfg.patch_3d_d = 2;
    const PipelineModel model = init_pipeline_model(cfg, 3, 16, 0);
    VolumeConfig vcfg;
    vcfg.n_organs = 3;
    vcfg.depth = 4;
    vcfg.height = 16;
    vcfg.width = 16;
    vcfg.seed = 5;
    const std::vector<OrganVolume> case0 = generate_case(vcfg, 0);
    const std::vector<OrganVolume> case1 = generate_case(vcfg, 1);

    const auto direct_set = [&](const OrganVolume& vol) {
        return fuse_features(encode_volume_2d(vol, model.enc2d, cfg),
                             encode_volume_3d(vol, model.enc3d, cfg), model.xattn,
                             cfg.n_heads);
    };

    SUBCASE("single case equals the direct feature set") {
        const auto gallery = build_organ_gallery(model, case0);
        REQUIRE(gallery.size() == 3);
        for (int organ = 0; organ < 3; ++organ) {
            const FusedFeatureSet direct = direct_set(case0[static_cast<std::size_t>(organ)]);
            const FusedFeatureSet& got = gallery[static_cast<std::size_t>(organ)];
            CHECK(std::memcmp(got.fused.data(), direct.fused.data(),
                              direct.fused.size() * sizeof(double)) == 0);
            CHECK(std::memcmp(got.f3d.data(), direct.f3d.data(),
                              direct.f3d.size() * sizeof(double)) == 0);
        }
    }

    SUBCASE("two cases give the elementwise mean") {
        std::vector<OrganVolume> both = case0;
        both.insert(both.end(), case1.begin(), case1.end());
        const auto gallery = build_organ_gallery(model, both);
        for (int organ = 0; organ < 3; ++organ) {
            const FusedFeatureSet a = direct_set(case0[static_cast<std::size_t>(organ)]);
            const FusedFeatureSet b = direct_set(case1[static_cast<std::size_t>(organ)]);
            const FusedFeatureSet& got = gallery[static_cast<std::size_t>(organ)];
            for (std::size_t i = 0; i < got.fused.size(); ++i) {
                CHECK(got.fused[i] == (a.fused[i] + b.fused[i]) / 2.0);
            }
            for (std::size_t i = 0; i < got.f3d.size(); ++i) {
                CHECK(got.f3d[i] == (a.f3d[i] + b.f3d[i]) / 2.0);
            }
        }
    }

    SUBCASE("a missing organ is an input error") {
        std::vector<OrganVolume> partial{case0[0], case0[1]};
        CHECK_THROWS_AS((void)build_organ_gallery(model, partial), InputError);
    }
}

TEST_CASE("closest_farthest agrees with a full sort and exact distances") {
    Rng rng(40, 0);
    std::vector<SymptomRecord> corpus(100);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        corpus[i].id = "rec" + std::to_string(i);
        corpus[i].embedding.resize(8);
        for (double& x : corpus[i].embedding) x = rng.normal();
    }
    std::vector<double> anchor(8);
    for (double& x : anchor) x = rng.normal();

    const NeighborLists lists = closest_farthest(anchor, corpus, 10);
    REQUIRE(lists.nearest.size() == 10);
    REQUIRE(lists.farthest.size() == 10);

    std::vector<std::pair<double, std::string>> oracle;
    for (const SymptomRecord& rec : corpus) {
        double d2 = 0.0;
        for (std::size_t j = 0; j < 8; ++j) {
            const double diff = rec.embedding[j] - anchor[j];
            d2 += diff * diff;
        }
        oracle.emplace_back(std::sqrt(d2), rec.id);
    }
    std::sort(oracle.begin(), oracle.end());
    for (std::size_t i = 0; i < 10; ++i) {
        CHECK(lists.nearest[i].record->id == oracle[i].second);
        CHECK(lists.nearest[i].distance == doctest::Approx(oracle[i].first).epsilon(1e-12));
        CHECK(lists.farthest[i].record->id == oracle[oracle.size() - 1 - i].second);
    }
}

TEST_CASE("closest_farthest clamps n with a warning and breaks ties by id") {
    std::vector<SymptomRecord> corpus(4);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        corpus[i].id = "r" + std::to_string(i);
        corpus[i].embedding = {1.0, 0.0};
    }
    corpus[3].embedding = {0.0, 0.0};  // distance 0 from the anchor

    std::vector<std::string> warnings;
    const NeighborLists lists = closest_farthest({0.0, 0.0}, corpus, 9, &warnings);
    REQUIRE(warnings.size() == 1);
    CHECK(lists.nearest.size() == 4);
    CHECK(lists.nearest[0].record->id == "r3");
    CHECK(lists.nearest[0].distance == 0.0);
    CHECK(lists.nearest[1].record->id == "r0");  // tied distances: ascending id
    CHECK(lists.nearest[2].record->id == "r1");
    CHECK(lists.farthest[0].record->id == "r0");
    CHECK(lists.farthest[3].record->id == "r3");

    CHECK_THROWS_AS((void)closest_farthest({1.0}, corpus, 2), DimensionError);
    CHECK_THROWS_AS((void)closest_farthest({1.0, 0.0}, {}, 2), InputError);
}

TEST_CASE("organ correlation matrix matches hand-computed Pearson") {
    Rng rng(50, 0);
    Tensor labels({60, 3});
    for (std::size_t i = 0; i < 60; ++i) {
        const double base = rng.uniform();
        labels(i, 0) = base;
        labels(i, 1) = 1.0 - base + 0.05 * rng.normal();
        labels(i, 2) = rng.uniform();
    }
    const Tensor corr = organ_correlation_matrix(labels);
    REQUIRE(corr.shape() == std::vector<std::size_t>({3, 3}));
    for (std::size_t a = 0; a < 3; ++a) {
        CHECK(corr(a, a) == 1.0);
        for (std::size_t b = 0; b < 3; ++b) {
            CHECK(corr(a, b) == corr(b, a));
            double ma = 0.0, mb = 0.0;
            for (std::size_t i = 0; i < 60; ++i) {
                ma += labels(i, a);
                mb += labels(i, b);
            }
            ma /= 60.0;
            mb /= 60.0;
            double cov = 0.0, va = 0.0, vb = 0.0;
            for (std::size_t i = 0; i < 60; ++i) {
                cov += (labels(i, a) - ma) * (labels(i, b) - mb);
                va += (labels(i, a) - ma) * (labels(i, a) - ma);
                vb += (labels(i, b) - mb) * (labels(i, b) - mb);
            }
            if (a != b) {
                CHECK(std::abs(corr(a, b) - cov / std::sqrt(va * vb)) < 1e-10);
            }
        }
    }
    CHECK(corr(0, 1) < -0.9);  // planted anticorrelation
}

TEST_CASE("duplicated columns correlate to exactly 1") {
    Tensor labels({5, 2}, {0.1, 0.1, 0.4, 0.4, 0.9, 0.9, 0.3, 0.3, 0.6, 0.6});
    const Tensor corr = organ_correlation_matrix(labels);
    CHECK(corr(0, 1) == 1.0);
}

TEST_CASE("zero-variance columns warn and get zero correlation") {
    Tensor labels({4, 3}, {0.5, 0.1, 0.2, 0.5, 0.9, 0.3, 0.5, 0.4, 0.4, 0.5, 0.2, 0.8});
    std::vector<std::string> warnings;
    const Tensor corr = organ_correlation_matrix(labels, &warnings);
    REQUIRE(warnings.size() == 1);
    CHECK(corr(0, 0) == 1.0);
    CHECK(corr(0, 1) == 0.0);
    CHECK(corr(0, 2) == 0.0);
    CHECK(corr(1, 2) != 0.0);

    CHECK_THROWS_AS((void)organ_correlation_matrix(Tensor({1, 3})), InputError);
}

TEST_CASE("probability overlay paints scores inside masks with max overlap") {
    const std::string dir = fresh_dir("overlay");
    // Two 2x2x2 organs overlapping in one voxel.
    const OrganVolume a = manual_volume(0, 2, 2, 2, {1, 1, 0, 0, 0, 0, 0, 0});
    const OrganVolume b = manual_volume(1, 2, 2, 2, {0, 1, 1, 0, 0, 0, 0, 0});
    const std::string path = dir + "/overlay.ten";

    export_probability_overlay({a, b}, {0.25, 0.75}, path, "deadbeef");
    const Tensor overlay = read_tensor(path);
    REQUIRE(overlay.shape() == std::vector<std::size_t>({2, 2, 2}));
    CHECK(overlay[0] == 0.25);
    CHECK(overlay[1] == 0.75);  // overlap keeps the max
    CHECK(overlay[2] == 0.75);
    for (std::size_t i = 3; i < 8; ++i) CHECK(overlay[i] == 0.0);

    std::ifstream side(path + ".json");
    REQUIRE(side.good());
    nlohmann::json j;
    side >> j;
    CHECK(j.at("config_hash") == "deadbeef");
    REQUIRE(j.at("scores").size() == 2);
    CHECK(j.at("scores")[1].at("organ_id") == 1);
    CHECK(j.at("scores")[1].at("score") == 0.75);

    SUBCASE("zero scores give a zero overlay") {
        export_probability_overlay({a, b}, {0.0, 0.0}, path, "deadbeef");
        const Tensor zero = read_tensor(path);
        for (std::size_t i = 0; i < zero.size(); ++i) CHECK(zero[i] == 0.0);
    }
    SUBCASE("score 1 reproduces the mask") {
        export_probability_overlay({a}, {1.0}, path, "deadbeef");
        const Tensor got = read_tensor(path);
        for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == a.mask[i]);
    }
    SUBCASE("mismatched shapes and counts are input errors") {
        const OrganVolume small = manual_volume(1, 1, 2, 2, {1, 0, 0, 0});
        CHECK_THROWS_AS(export_probability_overlay({a, small}, {0.5, 0.5}, path, "h"),
                        InputError);
        CHECK_THROWS_AS(export_probability_overlay({a, b}, {0.5}, path, "h"), InputError);
        CHECK_THROWS_AS(export_probability_overlay({}, {}, path, "h"), InputError);
    }
}

TEST_CASE("heatmap CSV holds every cell at full precision") {
    const std::string dir = fresh_dir("heatmap");
    Tensor m({2, 2}, {1.0, -0.12345678901234567, 0.5, 0.0});
    write_heatmap_csv(dir + "/h.csv", m);

    std::ifstream in(dir + "/h.csv");
    REQUIRE(in.good());
    std::string line;
    std::getline(in, line);
    const std::size_t comma = line.find(',');
    REQUIRE(comma != std::string::npos);
    CHECK(std::stod(line.substr(0, comma)) == m[0]);
    CHECK(std::stod(line.substr(comma + 1)) == m[1]);  // full-precision round trip
    std::getline(in, line);
    CHECK(line == "0.5,0");
}

TEST_CASE("heatmap PGM maps [-1, 1] onto [0, 255]") {
    const std::string dir = fresh_dir("pgm");
    Tensor m({1, 3}, {-1.0, 0.0, 1.0});
    write_heatmap_pgm(dir + "/h.pgm", m);

    std::ifstream in(dir + "/h.pgm", std::ios::binary);
    REQUIRE(in.good());
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    CHECK(magic == "P5");
    CHECK(w == 3);
    CHECK(h == 1);
    CHECK(maxval == 255);
    in.get();  // the single whitespace after the header
    unsigned char px[3];
    in.read(reinterpret_cast<char*>(px), 3);
    CHECK(px[0] == 0);
    CHECK(px[1] == 128);
    CHECK(px[2] == 255);
}

TEST_CASE("metrics JSON round-trips exactly") {
    const std::string dir = fresh_dir("metrics");
    MetricsReport report;
    report.rank1 = 0.9642857142857143;
    report.rank2 = 0.9892857142857143;
    report.rank3 = 1.0;
    report.map = 0.971234567890123;
    report.n_queries = 280;
    report.config_hash = "0123456789abcdef";
    write_metrics_json(dir + "/m.json", report);
    const MetricsReport back = read_metrics_json(dir + "/m.json");
    CHECK(back.rank1 == report.rank1);
    CHECK(back.rank2 == report.rank2);
    CHECK(back.rank3 == report.rank3);
    CHECK(back.map == report.map);
    CHECK(back.n_queries == report.n_queries);
    CHECK(back.config_hash == report.config_hash);

    CHECK_THROWS_AS((void)read_metrics_json(dir + "/absent.json"), IoError);
}

TEST_CASE("OOD embeddings are unit length and orthogonal to the prototypes") {
    CorpusConfig cfg;
    cfg.n_organs = 3;
    cfg.n_txt = 4;
    cfg.d_txt = 16;
    cfg.seed = 2;
    const SyntheticCorpus corpus = generate_synthetic_corpus(cfg);

    const auto ood = make_ood_embeddings(corpus.prototypes, 5, 9);
    REQUIRE(ood.size() == 5);
    for (const std::vector<double>& v : ood) {
        REQUIRE(v.size() == 16);
        double norm2 = 0.0;
        for (const double x : v) norm2 += x * x;
        CHECK(std::abs(std::sqrt(norm2) - 1.0) < 1e-12);
        for (std::size_t o = 0; o < 3; ++o) {
            double dot = 0.0;
            for (std::size_t j = 0; j < 16; ++j) dot += v[j] * corpus.prototypes(o, j);
            CHECK(std::abs(dot) < 1e-10);
        }
    }

    const auto again = make_ood_embeddings(corpus.prototypes, 5, 9);
    CHECK(again == ood);
    const auto other = make_ood_embeddings(corpus.prototypes, 5, 10);
    CHECK(other != ood);

    CHECK_THROWS_AS((void)make_ood_embeddings(corpus.prototypes, 0, 1), InputError);
    CHECK_THROWS_AS((void)make_ood_embeddings(Tensor({3}), 1, 1), InputError);
}
