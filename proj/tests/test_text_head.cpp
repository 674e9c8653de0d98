#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sora/corpus.hpp"
#include "sora/errors.hpp"
#include "sora/grad_check.hpp"
#include "sora/rng.hpp"
#include "sora/stats.hpp"
#include "sora/text_head.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <vector>

using namespace sora;

namespace {

std::filesystem::path temp_dir() {
    auto dir = std::filesystem::temp_directory_path() / "sora_text_head_test";
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("init shapes and head defaults") {
    const TextHead head = init_text_head(10, 4, 0);
    CHECK(head.d_hidden == 20);
    CHECK(head.d_feat == 10);
    CHECK(head.w1.shape() == std::vector<std::size_t>{10, 20});
    CHECK(head.w2.shape() == std::vector<std::size_t>{20, 10});
    CHECK(head.w_head.shape() == std::vector<std::size_t>{10, 4});
    CHECK(head.b_head.shape() == std::vector<std::size_t>{4});

    const TextHead again = init_text_head(10, 4, 0);
    CHECK(std::memcmp(head.w1.data(), again.w1.data(), head.w1.size() * sizeof(double)) == 0);
    const TextHead other = init_text_head(10, 4, 1);
    CHECK(std::memcmp(head.w1.data(), other.w1.data(), head.w1.size() * sizeof(double)) != 0);
}

TEST_CASE("zero weights give a zero feature vector") {
    TextHead head = init_text_head(6, 3, 0);
    head.w1 = Tensor(head.w1.shape());
    head.b1 = Tensor(head.b1.shape());
    head.w2 = Tensor(head.w2.shape());
    head.b2 = Tensor(head.b2.shape());
    const auto feat = embed_text(head, {1.0, -2.0, 3.0, 0.5, 0.0, 4.0});
    for (double v : feat) CHECK(v == 0.0);
}

TEST_CASE("forward passes are deterministic and sigmoid-bounded") {
    const TextHead head = init_text_head(8, 3, 7);
    Rng rng(11);
    std::vector<double> emb(8);
    for (auto& v : emb) v = rng.uniform(-1.0, 1.0);
    const auto a = embed_text(head, emb);
    const auto b = embed_text(head, emb);
    CHECK(a == b);
    for (double v : predict_soft(head, emb)) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    CHECK_THROWS_AS(embed_text(head, {1.0, 2.0}), DimensionError);
}

TEST_CASE("plain forward matches a manual layer-by-layer oracle") {
    const TextHead head = init_text_head(3, 2, 21);
    std::vector<double> x = {0.4, -1.2, 0.7};

    // First layer by explicit loops.
    std::vector<double> h1(static_cast<std::size_t>(head.d_hidden));
    for (std::size_t j = 0; j < h1.size(); ++j) {
        double acc = head.b1[j];
        for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * head.w1(i, j);
        h1[j] = 0.5 * acc * (1.0 + std::erf(acc * 0.70710678118654752440));
    }
    std::vector<double> feat(static_cast<std::size_t>(head.d_feat));
    for (std::size_t j = 0; j < feat.size(); ++j) {
        double acc = head.b2[j];
        for (std::size_t i = 0; i < h1.size(); ++i) acc += h1[i] * head.w2(i, j);
        feat[j] = acc;
    }

    const auto got = embed_text(head, x);
    REQUIRE(got.size() == feat.size());
    for (std::size_t i = 0; i < feat.size(); ++i) {
        CHECK(std::abs(got[i] - feat[i]) < 1e-12);
    }
}

TEST_CASE("tape forward agrees with the plain forward") {
    const TextHead head = init_text_head(6, 4, 3);
    Rng rng(5);
    const std::size_t b = 3, d = 6;
    Tensor x({b, d});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-1.5, 1.5);

    Tape tape;
    const TextHeadVars vars = text_head_leaves(tape, head, false);
    const Var xv = tape.leaf(x, false);
    const Tensor feats = tape.value(text_head_features(tape, vars, xv));
    const Tensor logits = tape.value(text_head_logits(tape, vars, xv));

    for (std::size_t r = 0; r < b; ++r) {
        std::vector<double> row(x.data() + r * d, x.data() + (r + 1) * d);
        const auto feat = embed_text(head, row);
        for (std::size_t j = 0; j < feat.size(); ++j) {
            CHECK(std::abs(feats(r, j) - feat[j]) < 1e-12);
        }
        const auto soft = predict_soft(head, row);
        for (std::size_t j = 0; j < soft.size(); ++j) {
            const double sig = 1.0 / (1.0 + std::exp(-logits(r, j)));
            CHECK(std::abs(sig - soft[j]) < 1e-12);
        }
    }
}

TEST_CASE("text head loss gradient matches finite differences") {
    CorpusConfig ccfg;
    ccfg.n_organs = 2;
    ccfg.n_txt = 2;
    ccfg.d_txt = 3;
    ccfg.seed = 13;
    const auto corpus = generate_synthetic_corpus(ccfg);
    Tensor x({4, 3});
    for (std::size_t r = 0; r < 4; ++r) {
        std::copy(corpus.records[r].embedding.begin(), corpus.records[r].embedding.end(),
                  x.data() + r * 3);
    }
    Rng rng(31);
    Tensor targets({4, 2});
    for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = rng.uniform();

    TextHead head = init_text_head(3, 2, 1);
    std::vector<Tensor*> params = {&head.w1, &head.b1,     &head.w2,
                                   &head.b2, &head.w_head, &head.b_head};

    Tape tape;
    TextHeadVars vars = text_head_leaves(tape, head, true);
    const Var loss = text_head_loss(tape, vars, tape.leaf(x, false), targets);
    tape.backward(loss);
    const std::vector<Tensor> analytic = {
        tape.grad(vars.w1), tape.grad(vars.b1),     tape.grad(vars.w2),
        tape.grad(vars.b2), tape.grad(vars.w_head), tape.grad(vars.b_head)};

    const auto result = finite_diff_check(
        [&]() {
            Tape t;
            TextHeadVars v = text_head_leaves(t, head, false);
            return t.value(text_head_loss(t, v, t.leaf(x, false), targets)).value();
        },
        params, analytic);
    CHECK(result.max_rel_err < 1e-4);
}

TEST_CASE("uniform half targets train to the ln 2 optimum") {
    CorpusConfig ccfg;
    ccfg.n_organs = 2;
    ccfg.n_txt = 4;
    ccfg.d_txt = 4;
    ccfg.seed = 2;
    const auto corpus = generate_synthetic_corpus(ccfg);
    const Tensor targets = Tensor::full({8, 2}, 0.5);

    TextHeadConfig cfg;
    cfg.epochs = 300;
    cfg.batch_size = 8;
    cfg.learning_rate = 0.01;
    const auto result = train_text_head(corpus.records, targets, cfg);

    const double ln2 = std::log(2.0);
    CHECK(result.epoch_loss.back() >= ln2 - 1e-12);
    CHECK(result.epoch_loss.back() <= ln2 + 1e-3);
}

TEST_CASE("separable corpus trains to low prediction error") {
    CorpusConfig ccfg;
    ccfg.n_organs = 3;
    ccfg.n_txt = 5;
    ccfg.d_txt = 16;
    ccfg.noise_sigma = 0.0;
    ccfg.mixture_alpha = 0.0;
    ccfg.seed = 4;
    const auto corpus = generate_synthetic_corpus(ccfg);

    // Anchors pinned to the prototypes give targets of 1 on the own organ and
    // 0.5 on orthogonal ones.
    Tensor targets({corpus.records.size(), 3});
    const std::size_t d = 16;
    for (std::size_t r = 0; r < corpus.records.size(); ++r) {
        for (std::size_t i = 0; i < 3; ++i) {
            const double c = cosine(corpus.records[r].embedding.data(),
                                    corpus.prototypes.data() + i * d, d);
            targets(r, i) = (c + 1.0) / 2.0;
        }
    }

    TextHeadConfig cfg;
    cfg.epochs = 400;
    cfg.batch_size = 15;
    cfg.learning_rate = 0.01;
    const auto result = train_text_head(corpus.records, targets, cfg);

    double mae = 0.0;
    for (std::size_t r = 0; r < corpus.records.size(); ++r) {
        const auto y = predict_soft(result.head, corpus.records[r].embedding);
        for (std::size_t i = 0; i < y.size(); ++i) mae += std::abs(y[i] - targets(r, i));
    }
    mae /= static_cast<double>(corpus.records.size() * 3);
    CHECK(mae < 0.05);
}

TEST_CASE("training is deterministic and validates targets") {
    CorpusConfig ccfg;
    ccfg.n_organs = 2;
    ccfg.n_txt = 3;
    ccfg.d_txt = 4;
    const auto corpus = generate_synthetic_corpus(ccfg);
    Tensor targets = Tensor::full({6, 2}, 0.25);

    TextHeadConfig cfg;
    cfg.epochs = 40;
    cfg.batch_size = 4;
    const auto a = train_text_head(corpus.records, targets, cfg);
    const auto b = train_text_head(corpus.records, targets, cfg);
    CHECK(std::memcmp(a.head.w1.data(), b.head.w1.data(),
                      a.head.w1.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(a.head.w_head.data(), b.head.w_head.data(),
                      a.head.w_head.size() * sizeof(double)) == 0);
    CHECK(a.epoch_loss == b.epoch_loss);

    targets(0, 0) = 1.2;
    CHECK_THROWS_AS(train_text_head(corpus.records, targets, cfg), InputError);
    targets(0, 0) = -0.1;
    CHECK_THROWS_AS(train_text_head(corpus.records, targets, cfg), InputError);
}

TEST_CASE("save and load round trip") {
    const TextHead head = init_text_head(5, 3, 9);
    const auto dir = (temp_dir() / "head_ckpt").string();
    save_text_head(dir, head, "beefcafe");
    const auto back = load_text_head(dir);
    CHECK(back.config_hash == "beefcafe");
    CHECK(back.head.d_txt == 5);
    CHECK(back.head.d_hidden == 10);
    CHECK(back.head.n_organs == 3);
    CHECK(std::memcmp(back.head.w1.data(), head.w1.data(),
                      head.w1.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(back.head.b_head.data(), head.b_head.data(),
                      head.b_head.size() * sizeof(double)) == 0);

    CHECK_THROWS_AS(load_text_head((temp_dir() / "missing").string()), IoError);
}
