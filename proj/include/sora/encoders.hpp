#pragma once

#include "sora/rng.hpp"
#include "sora/tape.hpp"
#include "sora/tensor.hpp"
#include "sora/volumes.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace sora {

struct EncoderConfig {
    int d_img = 32;
    int n_blocks_2d = 2;
    int n_blocks_3d = 1;
    int n_heads = 4;
    std::size_t patch_2d_h = 8, patch_2d_w = 8;
    std::size_t patch_3d_d = 2, patch_3d_h = 8, patch_3d_w = 8;
    // Expected volume extents. Learned positional embeddings fix the token
    // count, so the extents are part of the model shape.
    std::size_t depth = 8, height = 32, width = 32;

    void validate() const;
    std::size_t tokens_2d() const { return (height / patch_2d_h) * (width / patch_2d_w); }
    std::size_t tokens_3d() const {
        return (depth / patch_3d_d) * (height / patch_3d_h) * (width / patch_3d_w);
    }
};

// Pre-norm transformer block: x + Attn(LN(x)), then h + MLP(LN(h)) with a
// GELU MLP at expansion 4. Weights are stored in applied orientation, so a
// token row t maps through t*W.
struct TransformerBlock {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
};

// Patch-embedding transformer shared by the 2D and 3D encoders; only the
// patch shape and token count differ. A learnable CLS token is prepended,
// learned positional embeddings are added, and the CLS row after the final
// layer norm is the output feature.
struct PatchTransformer {
    Tensor w_patch, b_patch;  // [patch_volume, d_img], [d_img]
    Tensor cls;               // [d_img]
    Tensor pos;               // [n_tokens + 1, d_img]
    std::vector<TransformerBlock> blocks;
    Tensor ln_f_g, ln_f_b;
};

struct TransformerBlockVars {
    Var ln1_g, ln1_b;
    Var wq, bq, wk, bk, wv, bv, wo, bo;
    Var ln2_g, ln2_b;
    Var w1, b1, w2, b2;
};

struct PatchTransformerVars {
    Var w_patch, b_patch, cls, pos;
    std::vector<TransformerBlockVars> blocks;
    Var ln_f_g, ln_f_b;
};

PatchTransformer init_patch_transformer(std::size_t patch_volume,
                                        std::size_t n_patch_tokens, int d_img,
                                        int n_blocks, Rng& rng);
PatchTransformer init_encoder_2d(const EncoderConfig& cfg, Rng& rng);
PatchTransformer init_encoder_3d(const EncoderConfig& cfg, Rng& rng);

PatchTransformerVars patch_transformer_leaves(Tape& tape, const PatchTransformer& enc,
                                              bool requires_grad);

// Ordered (name, tensor) pairs covering every parameter; the order is the
// checkpoint and optimizer order.
void collect_params(PatchTransformer& enc, const std::string& prefix,
                    std::vector<std::pair<std::string, Tensor*>>& out);

// One pre-norm block over tokens [T, d_img].
Var transformer_block_tape(Tape& tape, const TransformerBlockVars& blk, Var x,
                           int n_heads);

// CLS feature of a token matrix: prepend CLS, add positions, run the blocks,
// final layer norm, return row 0. tokens is [n_tokens, d_img].
Var encode_tokens_tape(Tape& tape, const PatchTransformerVars& enc, Var tokens,
                       int n_heads);

// Slice features for a whole volume, one CLS row per slice: [D, d_img].
// Slices pass through the encoder independently.
Var encode_volume_2d_tape(Tape& tape, const PatchTransformerVars& enc, Var vol,
                          const EncoderConfig& cfg);

// Global volume feature via 3D patch embedding: [d_img].
Var encode_volume_3d_tape(Tape& tape, const PatchTransformerVars& enc, Var vol,
                          const EncoderConfig& cfg);

// Plain forward passes. These drive the tape without gradients, so training
// and inference share one arithmetic path.
Tensor encode_slice_2d(const Tensor& slice, const PatchTransformer& enc,
                       const EncoderConfig& cfg);
Tensor encode_volume_2d(const OrganVolume& vol, const PatchTransformer& enc,
                        const EncoderConfig& cfg);
Tensor encode_volume_3d(const OrganVolume& vol, const PatchTransformer& enc,
                        const EncoderConfig& cfg);

}  // namespace sora
