#include "sora/text_head.hpp"

#include "sora/adam.hpp"
#include "sora/errors.hpp"
#include "sora/kernels.hpp"
#include "sora/rng.hpp"
#include "sora/tensor_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace sora {

void TextHeadConfig::validate() const {
    if (epochs < 1) throw ConfigError("text head: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("text head: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("text head: learning_rate must be > 0");
}

namespace {

Tensor gaussian_matrix(std::size_t rows, std::size_t cols, double scale, Rng& rng) {
    Tensor t({rows, cols});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
}

}  // namespace

TextHead init_text_head(int d_txt, int n_organs, std::uint64_t seed) {
    if (d_txt < 1 || n_organs < 1) {
        throw ConfigError("text head: d_txt and n_organs must be >= 1");
    }
    TextHead head;
    head.d_txt = d_txt;
    head.d_hidden = 2 * d_txt;
    head.d_feat = d_txt;
    head.n_organs = n_organs;
    const std::size_t d = static_cast<std::size_t>(d_txt);
    const std::size_t h = static_cast<std::size_t>(head.d_hidden);
    const std::size_t f = static_cast<std::size_t>(head.d_feat);
    const std::size_t n = static_cast<std::size_t>(n_organs);
    Rng rng(seed, 0);
    head.w1 = gaussian_matrix(d, h, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    head.b1 = Tensor({h});
    head.w2 = gaussian_matrix(h, f, 1.0 / std::sqrt(static_cast<double>(h)), rng);
    head.b2 = Tensor({f});
    head.w_head = gaussian_matrix(f, n, 1.0 / std::sqrt(static_cast<double>(f)), rng);
    head.b_head = Tensor({n});
    return head;
}

TextHeadVars text_head_leaves(Tape& tape, const TextHead& head, bool requires_grad) {
    TextHeadVars vars;
    vars.w1 = tape.leaf(head.w1, requires_grad);
    vars.b1 = tape.leaf(head.b1, requires_grad);
    vars.w2 = tape.leaf(head.w2, requires_grad);
    vars.b2 = tape.leaf(head.b2, requires_grad);
    vars.w_head = tape.leaf(head.w_head, requires_grad);
    vars.b_head = tape.leaf(head.b_head, requires_grad);
    return vars;
}

Var text_head_features(Tape& tape, const TextHeadVars& vars, Var x) {
    const Var h1 = tape.gelu(tape.add_row_broadcast(tape.matmul(x, vars.w1), vars.b1));
    return tape.add_row_broadcast(tape.matmul(h1, vars.w2), vars.b2);
}

Var text_head_logits(Tape& tape, const TextHeadVars& vars, Var x) {
    const Var feat = text_head_features(tape, vars, x);
    return tape.add_row_broadcast(tape.matmul(feat, vars.w_head), vars.b_head);
}

Var text_head_loss(Tape& tape, const TextHeadVars& vars, Var x, const Tensor& targets) {
    return tape.bce_with_logits_mean(text_head_logits(tape, vars, x), targets);
}

TextHeadTrainResult train_text_head(const std::vector<SymptomRecord>& records,
                                    const Tensor& targets, const TextHeadConfig& cfg) {
    cfg.validate();
    if (records.empty()) throw InputError("train_text_head: empty record list");
    if (targets.rank() != 2 || targets.extent(0) != records.size()) {
        throw DimensionError("train_text_head: one target row per record required");
    }
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (!(targets[i] >= 0.0 && targets[i] <= 1.0)) {
            throw InputError("train_text_head: targets must lie in [0, 1]");
        }
    }
    const std::size_t d = corpus_dim(records);
    const std::size_t n = targets.extent(1);

    TextHeadTrainResult result;
    result.head = init_text_head(static_cast<int>(d), static_cast<int>(n), cfg.seed);
    TextHead& head = result.head;

    std::vector<Tensor*> params = {&head.w1, &head.b1,     &head.w2,
                                   &head.b2, &head.w_head, &head.b_head};
    Adam adam(AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8});
    Rng shuffle_rng(cfg.seed, 1);
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t end = std::min(order.size(), start + bs);
            const std::size_t b = end - start;
            Tensor x({b, d});
            Tensor y({b, n});
            for (std::size_t r = 0; r < b; ++r) {
                const std::size_t idx = order[start + r];
                std::copy(records[idx].embedding.begin(), records[idx].embedding.end(),
                          x.data() + r * d);
                std::copy(targets.data() + idx * n, targets.data() + (idx + 1) * n,
                          y.data() + r * n);
            }

            Tape tape;
            const TextHeadVars vars = text_head_leaves(tape, head, true);
            const Var loss = text_head_loss(tape, vars, tape.leaf(std::move(x), false), y);
            const double lv = tape.value(loss).value();
            if (!std::isfinite(lv)) {
                throw NumericError("train_text_head: non-finite loss at epoch " +
                                   std::to_string(epoch));
            }
            tape.backward(loss);

            const std::vector<Tensor> grads = {
                tape.grad(vars.w1), tape.grad(vars.b1),     tape.grad(vars.w2),
                tape.grad(vars.b2), tape.grad(vars.w_head), tape.grad(vars.b_head)};
            std::vector<const Tensor*> grefs;
            for (const Tensor& g : grads) grefs.push_back(&g);
            adam.step(params, grefs);
            loss_sum += lv;
            ++batches;
        }
        result.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    }
    return result;
}

namespace {

constexpr double inv_sqrt2 = 0.70710678118654752440;

std::vector<double> affine_forward(const std::vector<double>& x, const Tensor& w,
                                   const Tensor& b) {
    const std::size_t in = w.extent(0), out = w.extent(1);
    if (x.size() != in) throw DimensionError("text head forward: dimension mismatch");
    std::vector<double> y(b.data(), b.data() + out);
    for (std::size_t i = 0; i < in; ++i) {
        kernels::axpy(y.data(), w.data() + i * out, x[i], out);
    }
    return y;
}

}  // namespace

std::vector<double> embed_text(const TextHead& head, const std::vector<double>& emb) {
    std::vector<double> h1 = affine_forward(emb, head.w1, head.b1);
    for (double& v : h1) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    return affine_forward(h1, head.w2, head.b2);
}

std::vector<double> predict_soft(const TextHead& head, const std::vector<double>& emb) {
    std::vector<double> z = affine_forward(embed_text(head, emb), head.w_head, head.b_head);
    for (double& v : z) v = 1.0 / (1.0 + std::exp(-v));
    return z;
}

void save_text_head(const std::string& dir, const TextHead& head,
                    const std::string& config_hash) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json j;
    j["version"] = 1;
    j["config_hash"] = config_hash;
    j["d_txt"] = head.d_txt;
    j["d_hidden"] = head.d_hidden;
    j["d_feat"] = head.d_feat;
    j["n_organs"] = head.n_organs;
    write_file_atomic((fs::path(dir) / "text_head.json").string(), j.dump(2) + "\n");
    write_tensor((fs::path(dir) / "w1.ten").string(), head.w1);
    write_tensor((fs::path(dir) / "b1.ten").string(), head.b1);
    write_tensor((fs::path(dir) / "w2.ten").string(), head.w2);
    write_tensor((fs::path(dir) / "b2.ten").string(), head.b2);
    write_tensor((fs::path(dir) / "w_head.ten").string(), head.w_head);
    write_tensor((fs::path(dir) / "b_head.ten").string(), head.b_head);
}

TextHeadFile load_text_head(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "text_head.json", std::ios::binary);
    if (!in) throw IoError("text head load: cannot open manifest in " + dir);
    TextHeadFile file;
    TextHead& head = file.head;
    try {
        nlohmann::json j = nlohmann::json::parse(in);
        if (j.at("version").get<int>() != 1) {
            throw IoError("text head load: unsupported version in " + dir);
        }
        file.config_hash = j.at("config_hash").get<std::string>();
        head.d_txt = j.at("d_txt").get<int>();
        head.d_hidden = j.at("d_hidden").get<int>();
        head.d_feat = j.at("d_feat").get<int>();
        head.n_organs = j.at("n_organs").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError("text head load: " + dir + ": " + e.what());
    }
    head.w1 = read_tensor((fs::path(dir) / "w1.ten").string());
    head.b1 = read_tensor((fs::path(dir) / "b1.ten").string());
    head.w2 = read_tensor((fs::path(dir) / "w2.ten").string());
    head.b2 = read_tensor((fs::path(dir) / "b2.ten").string());
    head.w_head = read_tensor((fs::path(dir) / "w_head.ten").string());
    head.b_head = read_tensor((fs::path(dir) / "b_head.ten").string());
    const std::size_t d = static_cast<std::size_t>(head.d_txt);
    const std::size_t h = static_cast<std::size_t>(head.d_hidden);
    const std::size_t f = static_cast<std::size_t>(head.d_feat);
    const std::size_t n = static_cast<std::size_t>(head.n_organs);
    if (head.w1.shape() != std::vector<std::size_t>{d, h} ||
        head.b1.shape() != std::vector<std::size_t>{h} ||
        head.w2.shape() != std::vector<std::size_t>{h, f} ||
        head.b2.shape() != std::vector<std::size_t>{f} ||
        head.w_head.shape() != std::vector<std::size_t>{f, n} ||
        head.b_head.shape() != std::vector<std::size_t>{n}) {
        throw IoError("text head load: tensor shapes do not match manifest in " + dir);
    }
    return file;
}

}  // namespace sora
