#include "sora/anchors.hpp"

#include "sora/adam.hpp"
#include "sora/errors.hpp"
#include "sora/rng.hpp"
#include "sora/stats.hpp"
#include "sora/tensor_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace sora {

void AnchorTrainConfig::validate() const {
    if (!(margin > 0.5 && margin < 1.0)) {
        throw ConfigError("anchors: margin must be in (0.5, 1)");
    }
    if (!(repel_margin > 1.0 - margin && repel_margin < 1.0)) {
        throw ConfigError("anchors: repel_margin must be in (1 - margin, 1)");
    }
    if (!(repel_weight >= 0.0)) throw ConfigError("anchors: repel_weight must be >= 0");
    if (epochs < 1) throw ConfigError("anchors: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("anchors: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("anchors: learning_rate must be > 0");
}

std::pair<double, double> anchor_similarities(const OrganAnchorPair& pair,
                                              const std::vector<double>& emb) {
    if (pair.v_plus.size() != emb.size() || pair.v_minus.size() != emb.size()) {
        throw DimensionError("anchor_similarities: dimension mismatch");
    }
    return {cosine(pair.v_plus, emb), cosine(pair.v_minus, emb)};
}

double margin_fn(double s_plus, double s_minus, double m) {
    if (!(m > 0.5 && m < 1.0)) throw ConfigError("margin_fn: margin must be in (0.5, 1)");
    return std::max(0.0, m - s_plus) + std::max(0.0, s_minus - (1.0 - m));
}

double anchor_loss(const std::vector<OrganAnchorPair>& anchors,
                   const std::vector<SymptomRecord>& batch, double m,
                   double repel_margin, double repel_weight) {
    if (batch.empty()) throw InputError("anchor_loss: empty batch");
    if (anchors.empty()) throw InputError("anchor_loss: no anchors");
    const int n = static_cast<int>(anchors.size());
    for (const auto& rec : batch) {
        if (rec.organ_id < 0 || rec.organ_id >= n) {
            throw InputError("anchor_loss: record organ " + std::to_string(rec.organ_id) +
                             " has no anchor");
        }
    }
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        double pos_sum = 0.0, neg_sum = 0.0;
        std::size_t pos_cnt = 0, neg_cnt = 0;
        for (const auto& rec : batch) {
            const auto [sp, sm] = anchor_similarities(anchors[static_cast<std::size_t>(i)],
                                                      rec.embedding);
            if (rec.organ_id == i) {
                pos_sum += margin_fn(sp, sm, m);
                ++pos_cnt;
            } else {
                neg_sum += std::max(0.0, sm - (1.0 - m)) +
                           repel_weight * std::max(0.0, sp - repel_margin);
                ++neg_cnt;
            }
        }
        if (pos_cnt > 0) total += pos_sum / static_cast<double>(pos_cnt);
        if (neg_cnt > 0) total += neg_sum / static_cast<double>(neg_cnt);
    }
    return total;
}

Var anchor_loss_tape(Tape& tape, const std::vector<Var>& v_plus,
                     const std::vector<Var>& v_minus, const Tensor& batch,
                     const std::vector<int>& organ_ids, double m,
                     double repel_margin, double repel_weight) {
    if (!(m > 0.5 && m < 1.0)) throw ConfigError("anchor_loss: margin must be in (0.5, 1)");
    if (v_plus.size() != v_minus.size() || v_plus.empty()) {
        throw InputError("anchor_loss: anchor lists must be nonempty and equal length");
    }
    if (batch.rank() != 2) throw DimensionError("anchor_loss: batch must be rank 2");
    const std::size_t b = batch.extent(0);
    const int n = static_cast<int>(v_plus.size());
    if (organ_ids.size() != b) throw DimensionError("anchor_loss: one organ id per row");
    for (int organ : organ_ids) {
        if (organ < 0 || organ >= n) {
            throw InputError("anchor_loss: record organ " + std::to_string(organ) +
                             " has no anchor");
        }
    }

    const Var rows = tape.leaf(batch, false);
    Var total;
    for (int i = 0; i < n; ++i) {
        std::size_t pos_cnt = 0;
        for (int organ : organ_ids) pos_cnt += organ == i ? 1 : 0;
        const std::size_t neg_cnt = b - pos_cnt;

        const Var sp = tape.cosine_sim_rows(rows, v_plus[static_cast<std::size_t>(i)]);
        const Var sm = tape.cosine_sim_rows(rows, v_minus[static_cast<std::size_t>(i)]);
        const Var sp_high = tape.relu(tape.affine(sp, -1.0, m));          // max(0, m - sp)
        const Var sm_low = tape.relu(tape.affine(sm, 1.0, -(1.0 - m)));   // max(0, sm - (1-m))

        std::vector<Var> terms;
        if (pos_cnt > 0) {
            Tensor w({b});
            for (std::size_t r = 0; r < b; ++r) {
                w[r] = organ_ids[r] == i ? 1.0 / static_cast<double>(pos_cnt) : 0.0;
            }
            const Var wv = tape.leaf(std::move(w), false);
            terms.push_back(tape.add(tape.dot(sp_high, wv), tape.dot(sm_low, wv)));
        }
        if (neg_cnt > 0) {
            Tensor w({b});
            for (std::size_t r = 0; r < b; ++r) {
                w[r] = organ_ids[r] != i ? 1.0 / static_cast<double>(neg_cnt) : 0.0;
            }
            const Var wv = tape.leaf(std::move(w), false);
            terms.push_back(tape.dot(sm_low, wv));
            if (repel_weight > 0.0) {
                const Var sp_repel = tape.relu(tape.affine(sp, 1.0, -repel_margin));
                terms.push_back(tape.affine(tape.dot(sp_repel, wv), repel_weight, 0.0));
            }
        }
        for (const Var t : terms) total = total.valid() ? tape.add(total, t) : t;
    }
    return total;
}

AnchorTrainResult train_anchors(const std::vector<SymptomRecord>& corpus,
                                const AnchorTrainConfig& cfg) {
    cfg.validate();
    if (corpus.empty()) throw InputError("train_anchors: empty corpus");
    const std::size_t d = corpus_dim(corpus);
    const int n = corpus_n_organs(corpus);

    std::vector<Tensor> params;
    params.reserve(2 * static_cast<std::size_t>(n));
    Rng init_rng(cfg.seed, 0);
    for (int i = 0; i < 2 * n; ++i) {
        std::vector<double> v(d);
        for (auto& x : v) x = init_rng.normal();
        normalize_in_place(v);
        params.emplace_back(std::vector<std::size_t>{d}, std::move(v));
    }

    Adam adam(AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8});
    Rng shuffle_rng(cfg.seed, 1);
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);

    AnchorTrainResult result;
    result.epoch_loss.reserve(static_cast<std::size_t>(cfg.epochs));
    const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t end = std::min(order.size(), start + bs);
            const std::size_t b = end - start;
            Tensor batch({b, d});
            std::vector<int> organ_ids(b);
            for (std::size_t r = 0; r < b; ++r) {
                const SymptomRecord& rec = corpus[order[start + r]];
                if (rec.embedding.size() != d) {
                    throw DimensionError("train_anchors: embedding dimension mismatch");
                }
                std::copy(rec.embedding.begin(), rec.embedding.end(),
                          batch.data() + r * d);
                organ_ids[r] = rec.organ_id;
            }

            Tape tape;
            std::vector<Var> vp(static_cast<std::size_t>(n)), vm(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) {
                vp[static_cast<std::size_t>(i)] = tape.leaf(params[2 * static_cast<std::size_t>(i)]);
                vm[static_cast<std::size_t>(i)] =
                    tape.leaf(params[2 * static_cast<std::size_t>(i) + 1]);
            }
            const Var loss = anchor_loss_tape(tape, vp, vm, batch, organ_ids, cfg.margin,
                                              cfg.repel_margin, cfg.repel_weight);
            const double lv = tape.value(loss).value();
            if (!std::isfinite(lv)) {
                throw NumericError("train_anchors: non-finite loss at epoch " +
                                   std::to_string(epoch));
            }
            tape.backward(loss);

            std::vector<Tensor*> prefs;
            std::vector<const Tensor*> grefs;
            std::vector<Tensor> grads;
            grads.reserve(2 * static_cast<std::size_t>(n));
            auto grad_or_zero = [&](Var v) {
                return tape.has_grad(v) ? tape.grad(v) : Tensor({d});
            };
            for (int i = 0; i < n; ++i) {
                grads.push_back(grad_or_zero(vp[static_cast<std::size_t>(i)]));
                grads.push_back(grad_or_zero(vm[static_cast<std::size_t>(i)]));
            }
            for (std::size_t i = 0; i < params.size(); ++i) {
                prefs.push_back(&params[i]);
                grefs.push_back(&grads[i]);
            }
            adam.step(prefs, grefs);
            loss_sum += lv;
            ++batches;
        }
        result.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    }

    result.anchors.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        auto& pair = result.anchors[static_cast<std::size_t>(i)];
        pair.organ_id = i;
        const Tensor& p = params[2 * static_cast<std::size_t>(i)];
        const Tensor& q = params[2 * static_cast<std::size_t>(i) + 1];
        pair.v_plus.assign(p.data(), p.data() + p.size());
        pair.v_minus.assign(q.data(), q.data() + q.size());
    }
    return result;
}

std::vector<double> soft_label(const std::vector<OrganAnchorPair>& anchors,
                               const std::vector<double>& emb) {
    if (anchors.empty()) throw InputError("soft_label: no anchors");
    std::vector<double> out(anchors.size());
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        if (anchors[i].v_plus.size() != emb.size()) {
            throw DimensionError("soft_label: dimension mismatch");
        }
        out[i] = (cosine(anchors[i].v_plus, emb) + 1.0) / 2.0;
    }
    return out;
}

Tensor soft_label_matrix(const std::vector<OrganAnchorPair>& anchors,
                         const std::vector<SymptomRecord>& records) {
    if (records.empty()) throw InputError("soft_label_matrix: empty record list");
    Tensor out({records.size(), anchors.size()});
    for (std::size_t r = 0; r < records.size(); ++r) {
        const std::vector<double> y = soft_label(anchors, records[r].embedding);
        std::copy(y.begin(), y.end(), out.data() + r * anchors.size());
    }
    return out;
}

void write_anchors_json(const std::string& path, const std::vector<OrganAnchorPair>& anchors,
                        const std::string& config_hash) {
    nlohmann::json j;
    j["version"] = 1;
    j["config_hash"] = config_hash;
    j["anchors"] = nlohmann::json::array();
    for (const auto& pair : anchors) {
        j["anchors"].push_back({{"organ_id", pair.organ_id},
                                {"v_plus", pair.v_plus},
                                {"v_minus", pair.v_minus}});
    }
    write_file_atomic(path, j.dump(2) + "\n");
}

AnchorFile read_anchors_json(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("anchors read: cannot open " + path);
    AnchorFile file;
    try {
        nlohmann::json j = nlohmann::json::parse(in);
        if (j.at("version").get<int>() != 1) {
            throw IoError("anchors read: unsupported version in " + path);
        }
        file.config_hash = j.at("config_hash").get<std::string>();
        for (const auto& a : j.at("anchors")) {
            OrganAnchorPair pair;
            pair.organ_id = a.at("organ_id").get<int>();
            pair.v_plus = a.at("v_plus").get<std::vector<double>>();
            pair.v_minus = a.at("v_minus").get<std::vector<double>>();
            if (pair.v_plus.size() != pair.v_minus.size() || pair.v_plus.empty()) {
                throw IoError("anchors read: malformed anchor vectors in " + path);
            }
            file.anchors.push_back(std::move(pair));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError("anchors read: " + path + ": " + e.what());
    }
    if (file.anchors.empty()) throw IoError("anchors read: no anchors in " + path);
    return file;
}

void write_soft_labels_csv(const std::string& path,
                           const std::vector<SymptomRecord>& records,
                           const Tensor& labels) {
    if (labels.rank() != 2 || labels.extent(0) != records.size()) {
        throw DimensionError("soft labels csv: one row per record required");
    }
    const std::size_t n = labels.extent(1);
    std::string body = "id";
    for (std::size_t i = 0; i < n; ++i) body += ",organ_" + std::to_string(i);
    body += '\n';
    char buf[64];
    for (std::size_t r = 0; r < records.size(); ++r) {
        body += records[r].id;
        for (std::size_t i = 0; i < n; ++i) {
            std::snprintf(buf, sizeof(buf), ",%.17g", labels(r, i));
            body += buf;
        }
        body += '\n';
    }
    write_file_atomic(path, body);
}

}  // namespace sora
