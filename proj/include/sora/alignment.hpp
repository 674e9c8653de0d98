#pragma once

#include "sora/corpus.hpp"
#include "sora/encoders.hpp"
#include "sora/fusion.hpp"
#include "sora/tape.hpp"
#include "sora/tensor.hpp"
#include "sora/text_head.hpp"
#include "sora/volumes.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace sora {

// Maps text features into image space. Stored as written in the projection
// equation: rows index the image dimension, so f_hat = w_align * f_bar.
struct AlignmentProjection {
    Tensor w_align;  // [d_img, d_txt_feat]
};

AlignmentProjection init_alignment_projection(int d_img, int d_txt_feat, Rng& rng);

std::vector<double> project_text(const AlignmentProjection& proj,
                                 const std::vector<double>& f_bar_txt);

// Mean cosine similarity over all (slice row, text) pairs. The sum flag
// reproduces the bare double sum instead of the mean.
double avg_sim(const Tensor& f_out_rows, const std::vector<std::vector<double>>& f_hat_txts,
               bool sum_instead_of_mean = false);

// One organ's pairing of image rows with its projected text vectors.
struct OrganPair {
    Tensor img_rows;                          // [D, d_img]
    std::vector<std::vector<double>> txts;    // each [d_img]
};

// Per-organ terms -log softmax over k of avg_sim(img_i, txts_k) / tau, where
// the denominator includes k = i; info_nce is their sum.
std::vector<double> info_nce_terms(const std::vector<OrganPair>& pairs, double tau);
double info_nce(const std::vector<OrganPair>& pairs, double tau);

// Tape forms used by training. img_rows[i] is [D, d_img]; txts[k] holds the
// projected text vectors of organ k.
Var avg_sim_tape(Tape& tape, Var img_rows, const std::vector<Var>& txt_vecs);
Var info_nce_tape(Tape& tape, const std::vector<Var>& img_rows,
                  const std::vector<std::vector<Var>>& txts, double tau);

// Everything the joint training stage optimizes, plus the frozen config.
struct PipelineModel {
    EncoderConfig cfg;
    int n_organs = 0;
    int d_txt_feat = 0;
    PatchTransformer enc2d;
    PatchTransformer enc3d;
    CrossAttention xattn;
    ImageHeads heads;
    AlignmentProjection proj;
};

PipelineModel init_pipeline_model(const EncoderConfig& cfg, int n_organs,
                                  int d_txt_feat, std::uint64_t seed);

std::vector<std::pair<std::string, Tensor*>> pipeline_named_params(PipelineModel& model);

void save_pipeline_model(const std::string& dir, const PipelineModel& model,
                         const std::string& config_hash);
struct PipelineModelFile {
    PipelineModel model;
    std::string config_hash;
};
PipelineModelFile load_pipeline_model(const std::string& dir);

struct AlignTrainConfig {
    double tau = 0.1;
    int epochs = 50;
    int n_txt_batch = 8;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;

    void validate() const;
};

struct AlignEpoch {
    double l2d = 0.0, l3d = 0.0, lfusion = 0.0, lalign = 0.0, ltotal = 0.0;
};

struct AlignTrainResult {
    std::vector<AlignEpoch> trace;  // per-epoch means over steps
};

// Joint training of encoders, fusion, heads, and the alignment projection on
// L_image + L_align. Text features come from the frozen text head; records
// supply the texts and organs, volumes the images. Every step visits all
// organs once with one volume and up to n_txt_batch texts each.
AlignTrainResult train_alignment(PipelineModel& model,
                                 const std::vector<SymptomRecord>& records,
                                 const TextHead& text_head,
                                 const std::vector<OrganVolume>& volumes,
                                 const AlignTrainConfig& cfg);

// CSV columns: epoch, l_2d, l_3d, l_fusion, l_align, l_total.
void write_alignment_trace_csv(const std::string& path,
                               const std::vector<AlignEpoch>& trace);

}  // namespace sora
