#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sora/corpus.hpp"
#include "sora/errors.hpp"
#include "sora/stats.hpp"
#include "sora/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

using namespace sora;

namespace {

std::filesystem::path temp_dir() {
    auto dir = std::filesystem::temp_directory_path() / "sora_corpus_test";
    std::filesystem::create_directories(dir);
    return dir;
}

CorpusConfig small_cfg() {
    CorpusConfig cfg;
    cfg.n_organs = 5;
    cfg.n_txt = 12;
    cfg.d_txt = 16;
    cfg.seed = 7;
    return cfg;
}

}  // namespace

TEST_CASE("chunk_text groups sentences greedily") {
    const std::string six =
        "One fish. Two fish! Red fish? Blue fish. Old fish. New fish.";
    auto chunks = chunk_text(six);
    REQUIRE(chunks.size() == 2);
    CHECK(chunks[0] == "One fish. Two fish! Red fish?");
    CHECK(chunks[1] == "Blue fish. Old fish. New fish.");

    const std::string five = "A. B. C. D. E.";
    chunks = chunk_text(five);
    REQUIRE(chunks.size() == 2);
    CHECK(chunks[0] == "A. B. C.");
    CHECK(chunks[1] == "D. E.");

    chunks = chunk_text("Just one sentence.");
    REQUIRE(chunks.size() == 1);
    CHECK(chunks[0] == "Just one sentence.");
}

TEST_CASE("chunk_text respects the delimiter rule") {
    SUBCASE("decimal points do not end sentences") {
        auto chunks = chunk_text("The lesion measures 3.5 cm. Follow-up advised.");
        REQUIRE(chunks.size() == 1);
        CHECK(chunks[0] == "The lesion measures 3.5 cm. Follow-up advised.");
        auto again = chunk_text(chunks[0]);
        REQUIRE(again.size() == 1);
    }
    SUBCASE("punctuation runs stay within one sentence") {
        auto chunks = chunk_text("Really?! Yes. Sure. Fine.");
        REQUIRE(chunks.size() == 2);
        CHECK(chunks[0] == "Really?! Yes. Sure.");
        CHECK(chunks[1] == "Fine.");
    }
    SUBCASE("trailing text without a delimiter is still a sentence") {
        auto chunks = chunk_text("First. Second. Third. And a tail");
        REQUIRE(chunks.size() == 2);
        CHECK(chunks[1] == "And a tail");
    }
    SUBCASE("whitespace only gives no chunks") {
        CHECK(chunk_text("   \n\t ").empty());
        CHECK(chunk_text("").empty());
    }
}

TEST_CASE("chunk_text reconstruction property") {
    const std::string raw =
        "Patient reports dull pain. Onset was gradual! No fever? "
        "Appetite unchanged. Sleep is poor. Imaging was ordered. Results pending";
    const auto chunks = chunk_text(raw);
    // Re-splitting every chunk must reproduce the original sentence sequence.
    std::vector<std::string> flattened;
    for (const auto& c : chunks) {
        for (auto& s : chunk_text(c, 1, 1)) flattened.push_back(s);
    }
    const auto direct = chunk_text(raw, 1, 1);
    CHECK(flattened == direct);
    for (const auto& c : chunks) {
        CHECK(chunk_text(c, 1, 1).size() <= 3);
    }
}

TEST_CASE("synthetic corpus has the configured shape") {
    CorpusConfig cfg;
    cfg.n_organs = 7;
    cfg.n_txt = 200;
    cfg.d_txt = 64;
    const auto corpus = generate_synthetic_corpus(cfg);
    CHECK(corpus.records.size() == 1400);
    std::vector<int> counts(7, 0);
    std::set<std::string> ids;
    for (const auto& rec : corpus.records) {
        ++counts[static_cast<std::size_t>(rec.organ_id)];
        CHECK(rec.embedding.size() == 64);
        REQUIRE(rec.planted_weights.has_value());
        CHECK(rec.planted_weights->size() == 7);
        ids.insert(rec.id);
    }
    for (int c : counts) CHECK(c == 200);
    CHECK(ids.size() == corpus.records.size());
    CHECK(corpus.prototypes.shape() == std::vector<std::size_t>{7, 64});
}

TEST_CASE("planted weights peak at the record's organ") {
    auto cfg = small_cfg();
    cfg.mixture_alpha = 0.9;
    const auto corpus = generate_synthetic_corpus(cfg);
    for (const auto& rec : corpus.records) {
        const auto& w = *rec.planted_weights;
        const auto it = std::max_element(w.begin(), w.end());
        CHECK(*it == 1.0);
        CHECK(static_cast<int>(it - w.begin()) == rec.organ_id);
        for (double v : w) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("degenerate mixture reproduces the prototypes") {
    auto cfg = small_cfg();
    cfg.mixture_alpha = 0.0;
    cfg.noise_sigma = 0.0;
    const auto corpus = generate_synthetic_corpus(cfg);
    const std::size_t d = static_cast<std::size_t>(cfg.d_txt);
    for (const auto& rec : corpus.records) {
        const double* proto =
            corpus.prototypes.data() + static_cast<std::size_t>(rec.organ_id) * d;
        const double c_own = cosine(rec.embedding.data(), proto, d);
        CHECK(std::abs(c_own - 1.0) < 1e-12);
        for (std::size_t i = 0; i < d; ++i) {
            CHECK(std::abs(rec.embedding[i] - proto[i]) < 1e-12);
        }
        for (int k = 0; k < cfg.n_organs; ++k) {
            if (k == rec.organ_id) continue;
            const double* other = corpus.prototypes.data() + static_cast<std::size_t>(k) * d;
            CHECK(std::abs(cosine(rec.embedding.data(), other, d)) <= 0.1);
        }
    }
}

TEST_CASE("prototypes are orthonormal") {
    const auto corpus = generate_synthetic_corpus(small_cfg());
    const auto& p = corpus.prototypes;
    const std::size_t n = p.extent(0), d = p.extent(1);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < d; ++k) dot += p(i, k) * p(j, k);
            CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) < 1e-12);
        }
    }
}

TEST_CASE("same seed gives a bit-identical corpus") {
    auto cfg = small_cfg();
    const auto a = generate_synthetic_corpus(cfg);
    const auto b = generate_synthetic_corpus(cfg);
    REQUIRE(a.records.size() == b.records.size());
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        CHECK(std::memcmp(a.records[i].embedding.data(), b.records[i].embedding.data(),
                          a.records[i].embedding.size() * sizeof(double)) == 0);
        CHECK(*a.records[i].planted_weights == *b.records[i].planted_weights);
    }
    CHECK(std::memcmp(a.prototypes.data(), b.prototypes.data(),
                      a.prototypes.size() * sizeof(double)) == 0);

    cfg.seed = 8;
    const auto c = generate_synthetic_corpus(cfg);
    CHECK(std::memcmp(a.records[0].embedding.data(), c.records[0].embedding.data(),
                      a.records[0].embedding.size() * sizeof(double)) != 0);
}

TEST_CASE("corpus config validation") {
    CorpusConfig cfg = small_cfg();
    cfg.d_txt = cfg.n_organs - 1;
    CHECK_THROWS_AS(generate_synthetic_corpus(cfg), ConfigError);

    cfg = small_cfg();
    cfg.n_organs = 1;
    CHECK_THROWS_AS(generate_synthetic_corpus(cfg), ConfigError);

    cfg = small_cfg();
    cfg.noise_sigma = -0.1;
    CHECK_THROWS_AS(generate_synthetic_corpus(cfg), ConfigError);

    cfg = small_cfg();
    cfg.mixture_alpha = 1.5;
    CHECK_THROWS_AS(generate_synthetic_corpus(cfg), ConfigError);

    cfg = small_cfg();
    cfg.correlated_a = 0;
    CHECK_THROWS_AS(generate_synthetic_corpus(cfg), ConfigError);

    cfg = small_cfg();
    cfg.correlated_a = 0;
    cfg.correlated_b = cfg.n_organs;
    CHECK_THROWS_AS(generate_synthetic_corpus(cfg), ConfigError);
}

TEST_CASE("planted weights track prototype similarities") {
    auto cfg = small_cfg();
    cfg.n_txt = 30;
    cfg.noise_sigma = 0.05;
    cfg.mixture_alpha = 0.4;
    const auto corpus = generate_synthetic_corpus(cfg);
    const std::size_t d = static_cast<std::size_t>(cfg.d_txt);
    double rho_sum = 0.0;
    for (const auto& rec : corpus.records) {
        std::vector<double> sims(static_cast<std::size_t>(cfg.n_organs));
        for (int k = 0; k < cfg.n_organs; ++k) {
            sims[static_cast<std::size_t>(k)] = cosine(
                rec.embedding.data(), corpus.prototypes.data() + static_cast<std::size_t>(k) * d,
                d);
        }
        rho_sum += spearman(sims, *rec.planted_weights);
    }
    CHECK(rho_sum / static_cast<double>(corpus.records.size()) > 0.9);
}

TEST_CASE("correlated pair plants a strong partner weight") {
    auto cfg = small_cfg();
    cfg.correlated_a = 1;
    cfg.correlated_b = 3;
    cfg.correlated_weight = 0.8;
    const auto corpus = generate_synthetic_corpus(cfg);
    for (const auto& rec : corpus.records) {
        const auto& w = *rec.planted_weights;
        if (rec.organ_id == 1) CHECK(w[3] >= 0.6);
        if (rec.organ_id == 3) CHECK(w[1] >= 0.6);
        if (rec.organ_id == 0) CHECK(w[2] <= cfg.mixture_alpha + 1e-12);
    }
}

TEST_CASE("stratified split") {
    CorpusConfig cfg;
    cfg.n_organs = 3;
    cfg.n_txt = 200;
    cfg.d_txt = 8;
    const auto corpus = generate_synthetic_corpus(cfg);

    SUBCASE("default fractions per organ") {
        const auto [train, test] = split_corpus(corpus.records, {0.8, 0});
        std::vector<int> tr(3, 0), te(3, 0);
        for (const auto& r : train) ++tr[static_cast<std::size_t>(r.organ_id)];
        for (const auto& r : test) ++te[static_cast<std::size_t>(r.organ_id)];
        for (int i = 0; i < 3; ++i) {
            CHECK(tr[static_cast<std::size_t>(i)] == 160);
            CHECK(te[static_cast<std::size_t>(i)] == 40);
        }
    }

    SUBCASE("partition property") {
        const auto [train, test] = split_corpus(corpus.records, {0.8, 3});
        CHECK(train.size() + test.size() == corpus.records.size());
        std::set<std::string> seen;
        for (const auto& r : train) seen.insert(r.id);
        for (const auto& r : test) {
            CHECK(seen.count(r.id) == 0);
            seen.insert(r.id);
        }
        CHECK(seen.size() == corpus.records.size());
    }

    SUBCASE("deterministic under seed") {
        const auto [a_train, a_test] = split_corpus(corpus.records, {0.8, 11});
        const auto [b_train, b_test] = split_corpus(corpus.records, {0.8, 11});
        REQUIRE(a_train.size() == b_train.size());
        for (std::size_t i = 0; i < a_train.size(); ++i) {
            CHECK(a_train[i].id == b_train[i].id);
        }
    }
}

TEST_CASE("split edge cases") {
    std::vector<SymptomRecord> tiny;
    for (int j = 0; j < 2; ++j) {
        SymptomRecord r;
        r.id = "t" + std::to_string(j);
        r.organ_id = 0;
        r.embedding = {1.0, 0.0};
        tiny.push_back(r);
    }
    const auto [train, test] = split_corpus(tiny, {0.5, 0});
    CHECK(train.size() == 1);
    CHECK(test.size() == 1);

    SymptomRecord lone;
    lone.id = "x";
    lone.organ_id = 1;
    lone.embedding = {0.0, 1.0};
    tiny.push_back(lone);
    CHECK_THROWS_AS(split_corpus(tiny, {0.5, 0}), InputError);

    tiny.pop_back();
    CHECK_THROWS_AS(split_corpus(tiny, {0.0, 0}), ConfigError);
    CHECK_THROWS_AS(split_corpus(tiny, {1.0, 0}), ConfigError);
}

TEST_CASE("jsonl round trip is bit-exact") {
    auto cfg = small_cfg();
    cfg.n_txt = 6;
    auto corpus = generate_synthetic_corpus(cfg);
    corpus.records[0].text = "Sharp pain after meals. Worse at night.";
    corpus.records[1].planted_weights.reset();
    const auto path = (temp_dir() / "roundtrip.jsonl").string();
    write_corpus_jsonl(path, corpus.records);
    const auto back = read_corpus_jsonl(path);
    REQUIRE(back.size() == corpus.records.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].id == corpus.records[i].id);
        CHECK(back[i].organ_id == corpus.records[i].organ_id);
        CHECK(back[i].text == corpus.records[i].text);
        REQUIRE(back[i].embedding.size() == corpus.records[i].embedding.size());
        CHECK(std::memcmp(back[i].embedding.data(), corpus.records[i].embedding.data(),
                          back[i].embedding.size() * sizeof(double)) == 0);
        CHECK(back[i].planted_weights.has_value() ==
              corpus.records[i].planted_weights.has_value());
        if (back[i].planted_weights) {
            CHECK(*back[i].planted_weights == *corpus.records[i].planted_weights);
        }
    }
}

TEST_CASE("jsonl read failures") {
    const auto dir = temp_dir();
    CHECK_THROWS_AS(read_corpus_jsonl((dir / "nope.jsonl").string()), IoError);

    const auto bad = (dir / "bad.jsonl").string();
    write_file_atomic(bad, "{\"id\": \"a\", not json\n");
    CHECK_THROWS_AS(read_corpus_jsonl(bad), IoError);

    const auto missing = (dir / "missing_field.jsonl").string();
    write_file_atomic(missing, "{\"id\": \"a\", \"organ_id\": 0, \"text\": \"\"}\n");
    CHECK_THROWS_AS(read_corpus_jsonl(missing), IoError);

    const auto zero = (dir / "zero_emb.jsonl").string();
    write_file_atomic(zero,
                      "{\"id\": \"a\", \"organ_id\": 0, \"text\": \"\", "
                      "\"embedding\": [0.0, 0.0], \"planted_weights\": null}\n");
    CHECK_THROWS_AS(read_corpus_jsonl(zero), InputError);
}

TEST_CASE("corpus helpers") {
    auto cfg = small_cfg();
    cfg.n_txt = 3;
    const auto corpus = generate_synthetic_corpus(cfg);
    CHECK(corpus_n_organs(corpus.records) == cfg.n_organs);
    CHECK(corpus_dim(corpus.records) == static_cast<std::size_t>(cfg.d_txt));
    CHECK_THROWS_AS(corpus_n_organs({}), InputError);
}
