#include "sora/encoders.hpp"

#include "sora/errors.hpp"

#include <cmath>

namespace sora {

void EncoderConfig::validate() const {
    if (d_img < 1 || n_heads < 1) {
        throw ConfigError("encoders: d_img and n_heads must be >= 1");
    }
    if (d_img % n_heads != 0) {
        throw ConfigError("encoders: d_img must be divisible by n_heads");
    }
    if (n_blocks_2d < 1 || n_blocks_3d < 1) {
        throw ConfigError("encoders: block counts must be >= 1");
    }
    if (patch_2d_h == 0 || patch_2d_w == 0 || height % patch_2d_h != 0 ||
        width % patch_2d_w != 0) {
        throw ConfigError("encoders: patch_2d must divide the slice extents");
    }
    if (patch_3d_d == 0 || patch_3d_h == 0 || patch_3d_w == 0 ||
        depth % patch_3d_d != 0 || height % patch_3d_h != 0 ||
        width % patch_3d_w != 0) {
        throw ConfigError("encoders: patch_3d must divide the volume extents");
    }
}

namespace {

Tensor gaussian(std::vector<std::size_t> shape, double scale, Rng& rng) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
}

TransformerBlock init_block(std::size_t d, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    const std::size_t hid = 4 * d;
    TransformerBlock b;
    b.ln1_g = Tensor::full({d}, 1.0);
    b.ln1_b = Tensor({d});
    b.wq = gaussian({d, d}, s, rng);
    b.bq = Tensor({d});
    b.wk = gaussian({d, d}, s, rng);
    b.bk = Tensor({d});
    b.wv = gaussian({d, d}, s, rng);
    b.bv = Tensor({d});
    b.wo = gaussian({d, d}, s, rng);
    b.bo = Tensor({d});
    b.ln2_g = Tensor::full({d}, 1.0);
    b.ln2_b = Tensor({d});
    b.w1 = gaussian({d, hid}, s, rng);
    b.b1 = Tensor({hid});
    b.w2 = gaussian({hid, d}, 1.0 / std::sqrt(static_cast<double>(hid)), rng);
    b.b2 = Tensor({d});
    return b;
}

void check_volume_shape(const Tensor& vol, const EncoderConfig& cfg, const char* who) {
    if (vol.rank() != 3 || vol.extent(0) != cfg.depth || vol.extent(1) != cfg.height ||
        vol.extent(2) != cfg.width) {
        throw DimensionError(std::string(who) + ": volume shape " + vol.shape_str() +
                             " does not match configured extents");
    }
}

}  // namespace

PatchTransformer init_patch_transformer(std::size_t patch_volume,
                                        std::size_t n_patch_tokens, int d_img,
                                        int n_blocks, Rng& rng) {
    const std::size_t d = static_cast<std::size_t>(d_img);
    PatchTransformer enc;
    enc.w_patch = gaussian({patch_volume, d},
                           1.0 / std::sqrt(static_cast<double>(patch_volume)), rng);
    enc.b_patch = Tensor({d});
    enc.cls = gaussian({d}, 0.02, rng);
    enc.pos = gaussian({n_patch_tokens + 1, d}, 0.02, rng);
    for (int i = 0; i < n_blocks; ++i) enc.blocks.push_back(init_block(d, rng));
    enc.ln_f_g = Tensor::full({d}, 1.0);
    enc.ln_f_b = Tensor({d});
    return enc;
}

PatchTransformer init_encoder_2d(const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    return init_patch_transformer(cfg.patch_2d_h * cfg.patch_2d_w, cfg.tokens_2d(),
                                  cfg.d_img, cfg.n_blocks_2d, rng);
}

PatchTransformer init_encoder_3d(const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    return init_patch_transformer(cfg.patch_3d_d * cfg.patch_3d_h * cfg.patch_3d_w,
                                  cfg.tokens_3d(), cfg.d_img, cfg.n_blocks_3d, rng);
}

PatchTransformerVars patch_transformer_leaves(Tape& tape, const PatchTransformer& enc,
                                              bool requires_grad) {
    PatchTransformerVars v;
    v.w_patch = tape.leaf(enc.w_patch, requires_grad);
    v.b_patch = tape.leaf(enc.b_patch, requires_grad);
    v.cls = tape.leaf(enc.cls, requires_grad);
    v.pos = tape.leaf(enc.pos, requires_grad);
    for (const TransformerBlock& b : enc.blocks) {
        TransformerBlockVars bv;
        bv.ln1_g = tape.leaf(b.ln1_g, requires_grad);
        bv.ln1_b = tape.leaf(b.ln1_b, requires_grad);
        bv.wq = tape.leaf(b.wq, requires_grad);
        bv.bq = tape.leaf(b.bq, requires_grad);
        bv.wk = tape.leaf(b.wk, requires_grad);
        bv.bk = tape.leaf(b.bk, requires_grad);
        bv.wv = tape.leaf(b.wv, requires_grad);
        bv.bv = tape.leaf(b.bv, requires_grad);
        bv.wo = tape.leaf(b.wo, requires_grad);
        bv.bo = tape.leaf(b.bo, requires_grad);
        bv.ln2_g = tape.leaf(b.ln2_g, requires_grad);
        bv.ln2_b = tape.leaf(b.ln2_b, requires_grad);
        bv.w1 = tape.leaf(b.w1, requires_grad);
        bv.b1 = tape.leaf(b.b1, requires_grad);
        bv.w2 = tape.leaf(b.w2, requires_grad);
        bv.b2 = tape.leaf(b.b2, requires_grad);
        v.blocks.push_back(bv);
    }
    v.ln_f_g = tape.leaf(enc.ln_f_g, requires_grad);
    v.ln_f_b = tape.leaf(enc.ln_f_b, requires_grad);
    return v;
}

void collect_params(PatchTransformer& enc, const std::string& prefix,
                    std::vector<std::pair<std::string, Tensor*>>& out) {
    out.emplace_back(prefix + ".w_patch", &enc.w_patch);
    out.emplace_back(prefix + ".b_patch", &enc.b_patch);
    out.emplace_back(prefix + ".cls", &enc.cls);
    out.emplace_back(prefix + ".pos", &enc.pos);
    for (std::size_t i = 0; i < enc.blocks.size(); ++i) {
        TransformerBlock& b = enc.blocks[i];
        const std::string p = prefix + ".block" + std::to_string(i);
        out.emplace_back(p + ".ln1_g", &b.ln1_g);
        out.emplace_back(p + ".ln1_b", &b.ln1_b);
        out.emplace_back(p + ".wq", &b.wq);
        out.emplace_back(p + ".bq", &b.bq);
        out.emplace_back(p + ".wk", &b.wk);
        out.emplace_back(p + ".bk", &b.bk);
        out.emplace_back(p + ".wv", &b.wv);
        out.emplace_back(p + ".bv", &b.bv);
        out.emplace_back(p + ".wo", &b.wo);
        out.emplace_back(p + ".bo", &b.bo);
        out.emplace_back(p + ".ln2_g", &b.ln2_g);
        out.emplace_back(p + ".ln2_b", &b.ln2_b);
        out.emplace_back(p + ".w1", &b.w1);
        out.emplace_back(p + ".b1", &b.b1);
        out.emplace_back(p + ".w2", &b.w2);
        out.emplace_back(p + ".b2", &b.b2);
    }
    out.emplace_back(prefix + ".ln_f_g", &enc.ln_f_g);
    out.emplace_back(prefix + ".ln_f_b", &enc.ln_f_b);
}

namespace {

Var self_attention(Tape& t, const TransformerBlockVars& blk, Var x, int n_heads) {
    const std::size_t d = t.value(x).extent(1);
    const std::size_t dh = d / static_cast<std::size_t>(n_heads);
    const Var q = t.add_row_broadcast(t.matmul(x, blk.wq), blk.bq);
    const Var k = t.add_row_broadcast(t.matmul(x, blk.wk), blk.bk);
    const Var v = t.add_row_broadcast(t.matmul(x, blk.wv), blk.bv);
    std::vector<Var> heads;
    heads.reserve(static_cast<std::size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
        const std::size_t c0 = static_cast<std::size_t>(h) * dh;
        const Var qh = t.slice_cols(q, c0, c0 + dh);
        const Var kh = t.slice_cols(k, c0, c0 + dh);
        const Var vh = t.slice_cols(v, c0, c0 + dh);
        const Var scores = t.affine(t.matmul(qh, t.transpose(kh)),
                                    1.0 / std::sqrt(static_cast<double>(dh)), 0.0);
        heads.push_back(t.matmul(t.softmax(scores, 1), vh));
    }
    return t.add_row_broadcast(t.matmul(t.concat_cols(heads), blk.wo), blk.bo);
}

}  // namespace

Var transformer_block_tape(Tape& tape, const TransformerBlockVars& blk, Var x,
                           int n_heads) {
    const Var h =
        tape.add(x, self_attention(tape, blk, tape.layer_norm_rows(x, blk.ln1_g, blk.ln1_b),
                                   n_heads));
    const Var m = tape.layer_norm_rows(h, blk.ln2_g, blk.ln2_b);
    const Var mlp = tape.add_row_broadcast(
        tape.matmul(tape.gelu(tape.add_row_broadcast(tape.matmul(m, blk.w1), blk.b1)),
                    blk.w2),
        blk.b2);
    return tape.add(h, mlp);
}

Var encode_tokens_tape(Tape& tape, const PatchTransformerVars& enc, Var tokens,
                       int n_heads) {
    Var x = tape.add(tape.prepend_row(enc.cls, tokens), enc.pos);
    for (const TransformerBlockVars& blk : enc.blocks) {
        x = transformer_block_tape(tape, blk, x, n_heads);
    }
    return tape.row(tape.layer_norm_rows(x, enc.ln_f_g, enc.ln_f_b), 0);
}

Var encode_volume_2d_tape(Tape& tape, const PatchTransformerVars& enc, Var vol,
                          const EncoderConfig& cfg) {
    cfg.validate();
    check_volume_shape(tape.value(vol), cfg, "encode_volume_2d");
    // Patch depth 1 tokenizes every slice at once; rows are grouped by slice
    // because tokens come out in (slice, row, column) order.
    const Var all = tape.conv3d_patches(vol, enc.w_patch, enc.b_patch, 1, cfg.patch_2d_h,
                                        cfg.patch_2d_w);
    const std::size_t per_slice = cfg.tokens_2d();
    std::vector<Var> rows;
    rows.reserve(cfg.depth);
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        const Var tok = tape.slice_rows(all, l * per_slice, (l + 1) * per_slice);
        rows.push_back(encode_tokens_tape(tape, enc, tok, cfg.n_heads));
    }
    return tape.stack_rows(rows);
}

Var encode_volume_3d_tape(Tape& tape, const PatchTransformerVars& enc, Var vol,
                          const EncoderConfig& cfg) {
    cfg.validate();
    check_volume_shape(tape.value(vol), cfg, "encode_volume_3d");
    const Var tokens = tape.conv3d_patches(vol, enc.w_patch, enc.b_patch, cfg.patch_3d_d,
                                           cfg.patch_3d_h, cfg.patch_3d_w);
    return encode_tokens_tape(tape, enc, tokens, cfg.n_heads);
}

Tensor encode_slice_2d(const Tensor& slice, const PatchTransformer& enc,
                       const EncoderConfig& cfg) {
    cfg.validate();
    if (slice.rank() != 2 || slice.extent(0) != cfg.height ||
        slice.extent(1) != cfg.width) {
        throw DimensionError("encode_slice_2d: slice shape " + slice.shape_str() +
                             " does not match configured extents");
    }
    Tape tape;
    const PatchTransformerVars vars = patch_transformer_leaves(tape, enc, false);
    Tensor as_vol({1, cfg.height, cfg.width},
                  std::vector<double>(slice.data(), slice.data() + slice.size()));
    const Var tokens = tape.conv3d_patches(tape.leaf(std::move(as_vol), false),
                                           vars.w_patch, vars.b_patch, 1,
                                           cfg.patch_2d_h, cfg.patch_2d_w);
    return tape.value(encode_tokens_tape(tape, vars, tokens, cfg.n_heads));
}

Tensor encode_volume_2d(const OrganVolume& vol, const PatchTransformer& enc,
                        const EncoderConfig& cfg) {
    Tape tape;
    const PatchTransformerVars vars = patch_transformer_leaves(tape, enc, false);
    return tape.value(
        encode_volume_2d_tape(tape, vars, tape.leaf(vol.voxels, false), cfg));
}

Tensor encode_volume_3d(const OrganVolume& vol, const PatchTransformer& enc,
                        const EncoderConfig& cfg) {
    Tape tape;
    const PatchTransformerVars vars = patch_transformer_leaves(tape, enc, false);
    return tape.value(
        encode_volume_3d_tape(tape, vars, tape.leaf(vol.voxels, false), cfg));
}

}  // namespace sora
