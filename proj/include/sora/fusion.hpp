#pragma once

#include "sora/rng.hpp"
#include "sora/tape.hpp"
#include "sora/tensor.hpp"

#include <string>
#include <utility>
#include <vector>

namespace sora {

// Single-query multi-head attention: the 3D feature queries the D slice
// features. Weights are [d_img, d_img] in applied orientation.
struct CrossAttention {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

// One linear classification head per feature kind, d_img -> n_organs.
struct ImageHeads {
    int n_organs = 0;
    Tensor w_2d, b_2d;
    Tensor w_3d, b_3d;
    Tensor w_fused, b_fused;
};

struct FusedFeatureSet {
    Tensor f2d;    // [D, d_img]
    Tensor f3d;    // [d_img]
    Tensor fout;   // [D, d_img], attended feature broadcast to every slice
    Tensor fused;  // [D, d_img], exactly f2d + fout
};

CrossAttention init_cross_attention(int d_img, Rng& rng);
ImageHeads init_image_heads(int d_img, int n_organs, Rng& rng);

void collect_params(CrossAttention& xattn, const std::string& prefix,
                    std::vector<std::pair<std::string, Tensor*>>& out);
void collect_params(ImageHeads& heads, const std::string& prefix,
                    std::vector<std::pair<std::string, Tensor*>>& out);

struct CrossAttentionVars {
    Var wq, bq, wk, bk, wv, bv, wo, bo;
};
struct ImageHeadsVars {
    Var w_2d, b_2d, w_3d, b_3d, w_fused, b_fused;
};

CrossAttentionVars cross_attention_leaves(Tape& tape, const CrossAttention& xattn,
                                          bool requires_grad);
ImageHeadsVars image_heads_leaves(Tape& tape, const ImageHeads& heads,
                                  bool requires_grad);

// Attended output broadcast to [D, d_img]; f3d is [d_img], f2d is [D, d_img].
Var cross_attend_tape(Tape& tape, const CrossAttentionVars& vars, Var f3d, Var f2d,
                      int n_heads);

struct CrossAttnDetail {
    Tensor output;    // [D, d_img]
    Tensor attended;  // [d_img], the single-query result before broadcast
    Tensor weights;   // [n_heads, D], each row sums to 1
};

CrossAttnDetail cross_attend_detail(const Tensor& f3d, const Tensor& f2d,
                                    const CrossAttention& xattn, int n_heads);
Tensor cross_attend(const Tensor& f3d, const Tensor& f2d, const CrossAttention& xattn,
                    int n_heads);

// Elementwise residual sum.
Tensor fuse(const Tensor& f2d, const Tensor& fout);

// Full fusion: cross-attend, broadcast, residual sum.
FusedFeatureSet fuse_features(const Tensor& f2d, const Tensor& f3d,
                              const CrossAttention& xattn, int n_heads);

struct ImageLossParts {
    double l2d = 0.0, l3d = 0.0, lfused = 0.0, total = 0.0;
};

struct ImageLossVars {
    Var l2d, l3d, lfused, total;
};

// Softmax cross-entropy of each head against the organ label. The 2D and
// fused heads average over the D slice rows; the 3D head scores one vector.
ImageLossParts image_loss(const ImageHeads& heads, const FusedFeatureSet& features,
                          int organ_id);
ImageLossVars image_loss_tape(Tape& tape, const ImageHeadsVars& vars, Var f2d, Var f3d,
                              Var fused, int n_organs, int organ_id);

}  // namespace sora
