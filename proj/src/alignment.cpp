#include "sora/alignment.hpp"

#include "sora/adam.hpp"
#include "sora/checkpoint.hpp"
#include "sora/errors.hpp"
#include "sora/kernels.hpp"
#include "sora/stats.hpp"
#include "sora/tensor_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>

namespace sora {

void AlignTrainConfig::validate() const {
    if (!(tau > 0.0)) throw ConfigError("alignment: tau must be > 0");
    if (epochs < 1) throw ConfigError("alignment: epochs must be >= 1");
    if (n_txt_batch < 1) throw ConfigError("alignment: n_txt_batch must be >= 1");
    if (!(learning_rate >= 0.0)) {
        throw ConfigError("alignment: learning_rate must be >= 0");
    }
}

AlignmentProjection init_alignment_projection(int d_img, int d_txt_feat, Rng& rng) {
    if (d_img < 1 || d_txt_feat < 1) {
        throw ConfigError("alignment: d_img and d_txt_feat must be >= 1");
    }
    AlignmentProjection proj;
    proj.w_align = Tensor({static_cast<std::size_t>(d_img),
                           static_cast<std::size_t>(d_txt_feat)});
    const double s = 1.0 / std::sqrt(static_cast<double>(d_txt_feat));
    for (std::size_t i = 0; i < proj.w_align.size(); ++i) {
        proj.w_align[i] = s * rng.normal();
    }
    return proj;
}

std::vector<double> project_text(const AlignmentProjection& proj,
                                 const std::vector<double>& f_bar_txt) {
    const std::size_t rows = proj.w_align.extent(0);
    const std::size_t cols = proj.w_align.extent(1);
    if (f_bar_txt.size() != cols) {
        throw DimensionError("project_text: feature size " +
                             std::to_string(f_bar_txt.size()) + " vs projection " +
                             proj.w_align.shape_str());
    }
    std::vector<double> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        out[r] = kernels::dot(proj.w_align.data() + r * cols, f_bar_txt.data(), cols);
    }
    return out;
}

double avg_sim(const Tensor& f_out_rows, const std::vector<std::vector<double>>& f_hat_txts,
               bool sum_instead_of_mean) {
    if (f_out_rows.rank() != 2 || f_out_rows.extent(0) == 0 || f_hat_txts.empty()) {
        throw InputError("avg_sim: need a nonempty row matrix and nonempty text list");
    }
    const std::size_t rows = f_out_rows.extent(0), d = f_out_rows.extent(1);
    double acc = 0.0;
    for (const std::vector<double>& txt : f_hat_txts) {
        if (txt.size() != d) {
            throw DimensionError("avg_sim: text dimension " + std::to_string(txt.size()) +
                                 " vs image dimension " + std::to_string(d));
        }
        for (std::size_t l = 0; l < rows; ++l) {
            acc += cosine(f_out_rows.data() + l * d, txt.data(), d);
        }
    }
    if (sum_instead_of_mean) return acc;
    return acc / (static_cast<double>(rows) * static_cast<double>(f_hat_txts.size()));
}

std::vector<double> info_nce_terms(const std::vector<OrganPair>& pairs, double tau) {
    if (!(tau > 0.0)) throw ConfigError("info_nce: tau must be > 0");
    if (pairs.size() < 2) throw InputError("info_nce: need at least 2 organs");
    const std::size_t n = pairs.size();
    std::vector<double> sims(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < n; ++k) {
            sims[i * n + k] = avg_sim(pairs[i].img_rows, pairs[k].txts);
        }
    }
    std::vector<double> terms(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = sims.data() + i * n;
        double hi = row[0] / tau;
        for (std::size_t k = 1; k < n; ++k) hi = std::max(hi, row[k] / tau);
        double denom = 0.0;
        for (std::size_t k = 0; k < n; ++k) denom += std::exp(row[k] / tau - hi);
        terms[i] = -(row[i] / tau - hi) + std::log(denom);
    }
    return terms;
}

double info_nce(const std::vector<OrganPair>& pairs, double tau) {
    const std::vector<double> terms = info_nce_terms(pairs, tau);
    double loss = 0.0;
    for (double t : terms) loss += t;
    return loss;
}

Var avg_sim_tape(Tape& tape, Var img_rows, const std::vector<Var>& txt_vecs) {
    if (txt_vecs.empty()) throw InputError("avg_sim: nonempty text list required");
    std::vector<Var> per_text;
    per_text.reserve(txt_vecs.size());
    for (Var txt : txt_vecs) {
        per_text.push_back(tape.cosine_sim_rows(img_rows, txt));
    }
    return tape.mean(tape.concat_vecs(per_text));
}

Var info_nce_tape(Tape& tape, const std::vector<Var>& img_rows,
                  const std::vector<std::vector<Var>>& txts, double tau) {
    if (!(tau > 0.0)) throw ConfigError("info_nce: tau must be > 0");
    if (img_rows.size() < 2 || img_rows.size() != txts.size()) {
        throw InputError("info_nce: need matching image and text lists for >= 2 organs");
    }
    const std::size_t n = img_rows.size();
    std::vector<Var> entries;
    entries.reserve(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < n; ++k) {
            entries.push_back(avg_sim_tape(tape, img_rows[i], txts[k]));
        }
    }
    return tape.diag_cross_entropy_sum(tape.stack_scalars(entries, n, n), tau);
}

PipelineModel init_pipeline_model(const EncoderConfig& cfg, int n_organs,
                                  int d_txt_feat, std::uint64_t seed) {
    cfg.validate();
    if (n_organs < 2) throw ConfigError("pipeline: n_organs must be >= 2");
    PipelineModel model;
    model.cfg = cfg;
    model.n_organs = n_organs;
    model.d_txt_feat = d_txt_feat;
    Rng rng(seed, 0);
    model.enc2d = init_encoder_2d(cfg, rng);
    model.enc3d = init_encoder_3d(cfg, rng);
    model.xattn = init_cross_attention(cfg.d_img, rng);
    model.heads = init_image_heads(cfg.d_img, n_organs, rng);
    model.proj = init_alignment_projection(cfg.d_img, d_txt_feat, rng);
    return model;
}

std::vector<std::pair<std::string, Tensor*>> pipeline_named_params(PipelineModel& model) {
    std::vector<std::pair<std::string, Tensor*>> out;
    collect_params(model.enc2d, "enc2d", out);
    collect_params(model.enc3d, "enc3d", out);
    collect_params(model.xattn, "xattn", out);
    collect_params(model.heads, "heads", out);
    out.emplace_back("proj.w_align", &model.proj.w_align);
    return out;
}

namespace {

nlohmann::json encoder_config_json(const EncoderConfig& cfg) {
    return {{"d_img", cfg.d_img},
            {"n_blocks_2d", cfg.n_blocks_2d},
            {"n_blocks_3d", cfg.n_blocks_3d},
            {"n_heads", cfg.n_heads},
            {"patch_2d", {cfg.patch_2d_h, cfg.patch_2d_w}},
            {"patch_3d", {cfg.patch_3d_d, cfg.patch_3d_h, cfg.patch_3d_w}},
            {"extents", {cfg.depth, cfg.height, cfg.width}}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
    EncoderConfig cfg;
    cfg.d_img = j.at("d_img").get<int>();
    cfg.n_blocks_2d = j.at("n_blocks_2d").get<int>();
    cfg.n_blocks_3d = j.at("n_blocks_3d").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.patch_2d_h = j.at("patch_2d").at(0).get<std::size_t>();
    cfg.patch_2d_w = j.at("patch_2d").at(1).get<std::size_t>();
    cfg.patch_3d_d = j.at("patch_3d").at(0).get<std::size_t>();
    cfg.patch_3d_h = j.at("patch_3d").at(1).get<std::size_t>();
    cfg.patch_3d_w = j.at("patch_3d").at(2).get<std::size_t>();
    cfg.depth = j.at("extents").at(0).get<std::size_t>();
    cfg.height = j.at("extents").at(1).get<std::size_t>();
    cfg.width = j.at("extents").at(2).get<std::size_t>();
    return cfg;
}

}  // namespace

void save_pipeline_model(const std::string& dir, const PipelineModel& model,
                         const std::string& config_hash) {
    PipelineModel copy = model;
    const auto named = pipeline_named_params(copy);
    std::vector<std::pair<std::string, const Tensor*>> tensors;
    tensors.reserve(named.size());
    for (const auto& [name, ptr] : named) tensors.emplace_back(name, ptr);
    nlohmann::json meta;
    meta["encoder"] = encoder_config_json(model.cfg);
    meta["n_organs"] = model.n_organs;
    meta["d_txt_feat"] = model.d_txt_feat;
    save_checkpoint(dir, tensors, config_hash, meta);
}

PipelineModelFile load_pipeline_model(const std::string& dir) {
    const Checkpoint ckpt = load_checkpoint(dir);
    EncoderConfig cfg;
    int n_organs = 0, d_txt_feat = 0;
    try {
        cfg = encoder_config_from_json(ckpt.meta.at("encoder"));
        n_organs = ckpt.meta.at("n_organs").get<int>();
        d_txt_feat = ckpt.meta.at("d_txt_feat").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError("pipeline checkpoint: malformed meta in " + dir + ": " + e.what());
    }
    PipelineModelFile out;
    out.model = init_pipeline_model(cfg, n_organs, d_txt_feat, 0);
    out.config_hash = ckpt.config_hash;
    for (auto& [name, ptr] : pipeline_named_params(out.model)) {
        checkpoint_fill(ckpt, name, *ptr);
    }
    return out;
}

namespace {

void flatten(const PatchTransformerVars& v, std::vector<Var>& out) {
    out.push_back(v.w_patch);
    out.push_back(v.b_patch);
    out.push_back(v.cls);
    out.push_back(v.pos);
    for (const TransformerBlockVars& b : v.blocks) {
        out.push_back(b.ln1_g);
        out.push_back(b.ln1_b);
        out.push_back(b.wq);
        out.push_back(b.bq);
        out.push_back(b.wk);
        out.push_back(b.bk);
        out.push_back(b.wv);
        out.push_back(b.bv);
        out.push_back(b.wo);
        out.push_back(b.bo);
        out.push_back(b.ln2_g);
        out.push_back(b.ln2_b);
        out.push_back(b.w1);
        out.push_back(b.b1);
        out.push_back(b.w2);
        out.push_back(b.b2);
    }
    out.push_back(v.ln_f_g);
    out.push_back(v.ln_f_b);
}

void flatten(const CrossAttentionVars& v, std::vector<Var>& out) {
    out.push_back(v.wq);
    out.push_back(v.bq);
    out.push_back(v.wk);
    out.push_back(v.bk);
    out.push_back(v.wv);
    out.push_back(v.bv);
    out.push_back(v.wo);
    out.push_back(v.bo);
}

void flatten(const ImageHeadsVars& v, std::vector<Var>& out) {
    out.push_back(v.w_2d);
    out.push_back(v.b_2d);
    out.push_back(v.w_3d);
    out.push_back(v.b_3d);
    out.push_back(v.w_fused);
    out.push_back(v.b_fused);
}

Tensor grad_or_zero(const Tape& tape, Var v) {
    if (tape.has_grad(v)) return tape.grad(v);
    return Tensor::zeros(tape.value(v).shape());
}

}  // namespace

AlignTrainResult train_alignment(PipelineModel& model,
                                 const std::vector<SymptomRecord>& records,
                                 const TextHead& text_head,
                                 const std::vector<OrganVolume>& volumes,
                                 const AlignTrainConfig& cfg) {
    cfg.validate();
    model.cfg.validate();
    const int n = model.n_organs;
    if (n < 2) throw ConfigError("alignment: model must cover >= 2 organs");
    if (text_head.d_feat != model.d_txt_feat) {
        throw DimensionError("alignment: text head feature size " +
                             std::to_string(text_head.d_feat) + " vs model " +
                             std::to_string(model.d_txt_feat));
    }

    // Group text features and volumes by organ; every organ needs at least
    // one of each because InfoNCE ranges over the full organ set.
    std::vector<std::vector<Tensor>> organ_txts(static_cast<std::size_t>(n));
    for (const SymptomRecord& rec : records) {
        if (rec.organ_id < 0 || rec.organ_id >= n) {
            throw InputError("alignment: record " + rec.id + " has organ " +
                             std::to_string(rec.organ_id) + " outside the model range");
        }
        std::vector<double> feat = embed_text(text_head, rec.embedding);
        const std::size_t d_feat = feat.size();
        organ_txts[static_cast<std::size_t>(rec.organ_id)].push_back(
            Tensor({d_feat}, std::move(feat)));
    }
    std::vector<std::vector<const OrganVolume*>> organ_vols(static_cast<std::size_t>(n));
    for (const OrganVolume& vol : volumes) {
        if (vol.organ_id < 0 || vol.organ_id >= n) {
            throw InputError("alignment: volume organ " + std::to_string(vol.organ_id) +
                             " outside the model range");
        }
        validate_volume(vol);
        if (vol.voxels.extent(0) != model.cfg.depth ||
            vol.voxels.extent(1) != model.cfg.height ||
            vol.voxels.extent(2) != model.cfg.width) {
            throw DimensionError("alignment: volume shape " + vol.voxels.shape_str() +
                                 " does not match the model extents");
        }
        organ_vols[static_cast<std::size_t>(vol.organ_id)].push_back(&vol);
    }
    std::size_t steps_per_epoch = 0;
    for (int i = 0; i < n; ++i) {
        if (organ_txts[static_cast<std::size_t>(i)].empty()) {
            throw InputError("alignment: no text records for organ " + std::to_string(i));
        }
        if (organ_vols[static_cast<std::size_t>(i)].empty()) {
            throw InputError("alignment: no volumes for organ " + std::to_string(i));
        }
        steps_per_epoch =
            std::max(steps_per_epoch, organ_vols[static_cast<std::size_t>(i)].size());
    }

    auto named = pipeline_named_params(model);
    std::vector<Tensor*> params;
    params.reserve(named.size());
    for (auto& [name, ptr] : named) params.push_back(ptr);

    Adam adam({cfg.learning_rate, 0.9, 0.999, 1e-8});
    Rng rng(cfg.seed, 1);
    AlignTrainResult result;
    result.trace.reserve(static_cast<std::size_t>(cfg.epochs));

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        AlignEpoch acc;
        for (std::size_t step = 0; step < steps_per_epoch; ++step) {
            Tape tape;
            const PatchTransformerVars v2d = patch_transformer_leaves(tape, model.enc2d, true);
            const PatchTransformerVars v3d = patch_transformer_leaves(tape, model.enc3d, true);
            const CrossAttentionVars vx = cross_attention_leaves(tape, model.xattn, true);
            const ImageHeadsVars vh = image_heads_leaves(tape, model.heads, true);
            const Var w_align = tape.leaf(model.proj.w_align, true);
            std::vector<Var> param_vars;
            param_vars.reserve(named.size());
            flatten(v2d, param_vars);
            flatten(v3d, param_vars);
            flatten(vx, param_vars);
            flatten(vh, param_vars);
            param_vars.push_back(w_align);

            std::vector<Var> fused_rows;
            std::vector<std::vector<Var>> organ_txt_vars;
            std::vector<Var> part_2d, part_3d, part_fused;
            fused_rows.reserve(static_cast<std::size_t>(n));
            organ_txt_vars.reserve(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) {
                const auto& vols = organ_vols[static_cast<std::size_t>(i)];
                const auto& txts = organ_txts[static_cast<std::size_t>(i)];
                const std::size_t vol_idx = vols.size() > 1 ? rng.below(vols.size()) : 0;

                // Batch text choice is canonicalized to ascending index order
                // so the averaged similarities do not depend on draw order.
                std::vector<std::size_t> chosen;
                if (txts.size() <= static_cast<std::size_t>(cfg.n_txt_batch)) {
                    chosen.resize(txts.size());
                    std::iota(chosen.begin(), chosen.end(), 0);
                } else {
                    std::vector<std::size_t> idx(txts.size());
                    std::iota(idx.begin(), idx.end(), 0);
                    rng.shuffle(idx);
                    chosen.assign(idx.begin(),
                                  idx.begin() + static_cast<std::size_t>(cfg.n_txt_batch));
                    std::sort(chosen.begin(), chosen.end());
                }

                const Var vol = tape.leaf(vols[vol_idx]->voxels, false);
                const Var f2d = encode_volume_2d_tape(tape, v2d, vol, model.cfg);
                const Var f3d = encode_volume_3d_tape(tape, v3d, vol, model.cfg);
                const Var fout = cross_attend_tape(tape, vx, f3d, f2d, model.cfg.n_heads);
                const Var fused = tape.add(f2d, fout);
                const ImageLossVars parts =
                    image_loss_tape(tape, vh, f2d, f3d, fused, n, i);
                part_2d.push_back(parts.l2d);
                part_3d.push_back(parts.l3d);
                part_fused.push_back(parts.lfused);
                fused_rows.push_back(fused);

                std::vector<Var> txt_vars;
                txt_vars.reserve(chosen.size());
                for (std::size_t c : chosen) {
                    txt_vars.push_back(
                        tape.matvec(w_align, tape.leaf(txts[c], false)));
                }
                organ_txt_vars.push_back(std::move(txt_vars));
            }

            const double inv_n = 1.0 / static_cast<double>(n);
            const Var l2d = tape.affine(
                tape.sum(tape.stack_scalars(part_2d, 1, static_cast<std::size_t>(n))),
                inv_n, 0.0);
            const Var l3d = tape.affine(
                tape.sum(tape.stack_scalars(part_3d, 1, static_cast<std::size_t>(n))),
                inv_n, 0.0);
            const Var lfused = tape.affine(
                tape.sum(tape.stack_scalars(part_fused, 1, static_cast<std::size_t>(n))),
                inv_n, 0.0);
            const Var lalign = info_nce_tape(tape, fused_rows, organ_txt_vars, cfg.tau);
            const Var ltotal =
                tape.add(tape.add(l2d, l3d), tape.add(lfused, lalign));

            for (int i = 0; i < n; ++i) {
                const double per_organ =
                    tape.value(part_2d[static_cast<std::size_t>(i)]).value() +
                    tape.value(part_3d[static_cast<std::size_t>(i)]).value() +
                    tape.value(part_fused[static_cast<std::size_t>(i)]).value();
                if (!std::isfinite(per_organ)) {
                    throw NumericError("alignment: non-finite image loss at epoch " +
                                       std::to_string(epoch) + ", step " +
                                       std::to_string(step) + ", organ " +
                                       std::to_string(i));
                }
            }
            const double total_value = tape.value(ltotal).value();
            if (!std::isfinite(total_value)) {
                throw NumericError("alignment: non-finite loss at epoch " +
                                   std::to_string(epoch) + ", step " +
                                   std::to_string(step));
            }

            acc.l2d += tape.value(l2d).value();
            acc.l3d += tape.value(l3d).value();
            acc.lfusion += tape.value(lfused).value();
            acc.lalign += tape.value(lalign).value();
            acc.ltotal += total_value;

            tape.backward(ltotal);
            std::vector<Tensor> grads;
            grads.reserve(param_vars.size());
            for (Var v : param_vars) grads.push_back(grad_or_zero(tape, v));
            std::vector<const Tensor*> grad_ptrs;
            grad_ptrs.reserve(grads.size());
            for (const Tensor& g : grads) grad_ptrs.push_back(&g);
            adam.step(params, grad_ptrs);
        }
        const double inv_steps = 1.0 / static_cast<double>(steps_per_epoch);
        acc.l2d *= inv_steps;
        acc.l3d *= inv_steps;
        acc.lfusion *= inv_steps;
        acc.lalign *= inv_steps;
        acc.ltotal *= inv_steps;
        result.trace.push_back(acc);
    }
    return result;
}

void write_alignment_trace_csv(const std::string& path,
                               const std::vector<AlignEpoch>& trace) {
    std::string csv = "epoch,l_2d,l_3d,l_fusion,l_align,l_total\n";
    char line[192];
    for (std::size_t e = 0; e < trace.size(); ++e) {
        const AlignEpoch& t = trace[e];
        std::snprintf(line, sizeof(line), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", e,
                      t.l2d, t.l3d, t.lfusion, t.lalign, t.ltotal);
        csv += line;
    }
    write_file_atomic(path, csv);
}

}  // namespace sora
