#include "sora/fusion.hpp"

#include "sora/errors.hpp"

#include <cmath>

namespace sora {

namespace {

Tensor gaussian(std::vector<std::size_t> shape, double scale, Rng& rng) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
}

}  // namespace

CrossAttention init_cross_attention(int d_img, Rng& rng) {
    if (d_img < 1) throw ConfigError("cross attention: d_img must be >= 1");
    const std::size_t d = static_cast<std::size_t>(d_img);
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    CrossAttention x;
    x.wq = gaussian({d, d}, s, rng);
    x.bq = Tensor({d});
    x.wk = gaussian({d, d}, s, rng);
    x.bk = Tensor({d});
    x.wv = gaussian({d, d}, s, rng);
    x.bv = Tensor({d});
    x.wo = gaussian({d, d}, s, rng);
    x.bo = Tensor({d});
    return x;
}

ImageHeads init_image_heads(int d_img, int n_organs, Rng& rng) {
    if (d_img < 1 || n_organs < 1) {
        throw ConfigError("image heads: d_img and n_organs must be >= 1");
    }
    const std::size_t d = static_cast<std::size_t>(d_img);
    const std::size_t n = static_cast<std::size_t>(n_organs);
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    ImageHeads h;
    h.n_organs = n_organs;
    h.w_2d = gaussian({d, n}, s, rng);
    h.b_2d = Tensor({n});
    h.w_3d = gaussian({d, n}, s, rng);
    h.b_3d = Tensor({n});
    h.w_fused = gaussian({d, n}, s, rng);
    h.b_fused = Tensor({n});
    return h;
}

void collect_params(CrossAttention& xattn, const std::string& prefix,
                    std::vector<std::pair<std::string, Tensor*>>& out) {
    out.emplace_back(prefix + ".wq", &xattn.wq);
    out.emplace_back(prefix + ".bq", &xattn.bq);
    out.emplace_back(prefix + ".wk", &xattn.wk);
    out.emplace_back(prefix + ".bk", &xattn.bk);
    out.emplace_back(prefix + ".wv", &xattn.wv);
    out.emplace_back(prefix + ".bv", &xattn.bv);
    out.emplace_back(prefix + ".wo", &xattn.wo);
    out.emplace_back(prefix + ".bo", &xattn.bo);
}

void collect_params(ImageHeads& heads, const std::string& prefix,
                    std::vector<std::pair<std::string, Tensor*>>& out) {
    out.emplace_back(prefix + ".w_2d", &heads.w_2d);
    out.emplace_back(prefix + ".b_2d", &heads.b_2d);
    out.emplace_back(prefix + ".w_3d", &heads.w_3d);
    out.emplace_back(prefix + ".b_3d", &heads.b_3d);
    out.emplace_back(prefix + ".w_fused", &heads.w_fused);
    out.emplace_back(prefix + ".b_fused", &heads.b_fused);
}

CrossAttentionVars cross_attention_leaves(Tape& tape, const CrossAttention& xattn,
                                          bool requires_grad) {
    CrossAttentionVars v;
    v.wq = tape.leaf(xattn.wq, requires_grad);
    v.bq = tape.leaf(xattn.bq, requires_grad);
    v.wk = tape.leaf(xattn.wk, requires_grad);
    v.bk = tape.leaf(xattn.bk, requires_grad);
    v.wv = tape.leaf(xattn.wv, requires_grad);
    v.bv = tape.leaf(xattn.bv, requires_grad);
    v.wo = tape.leaf(xattn.wo, requires_grad);
    v.bo = tape.leaf(xattn.bo, requires_grad);
    return v;
}

ImageHeadsVars image_heads_leaves(Tape& tape, const ImageHeads& heads,
                                  bool requires_grad) {
    ImageHeadsVars v;
    v.w_2d = tape.leaf(heads.w_2d, requires_grad);
    v.b_2d = tape.leaf(heads.b_2d, requires_grad);
    v.w_3d = tape.leaf(heads.w_3d, requires_grad);
    v.b_3d = tape.leaf(heads.b_3d, requires_grad);
    v.w_fused = tape.leaf(heads.w_fused, requires_grad);
    v.b_fused = tape.leaf(heads.b_fused, requires_grad);
    return v;
}

namespace {

void check_attend_shapes(const Tensor& f3d, const Tensor& f2d, int n_heads,
                         const char* who) {
    if (f3d.rank() != 1 || f2d.rank() != 2 || f2d.extent(1) != f3d.extent(0)) {
        throw DimensionError(std::string(who) + ": f3d " + f3d.shape_str() + " vs f2d " +
                             f2d.shape_str());
    }
    if (n_heads < 1 || f3d.extent(0) % static_cast<std::size_t>(n_heads) != 0) {
        throw ConfigError(std::string(who) + ": n_heads must divide d_img");
    }
}

// Attention weights per head as rows of a [n_heads, D] matrix, so tape users
// and the plain inspection API share the arithmetic.
struct TapeAttend {
    Var attended;  // [d_img]
    Var weights;   // [n_heads, D]
};

TapeAttend cross_attend_core(Tape& t, const CrossAttentionVars& vars, Var f3d, Var f2d,
                             int n_heads) {
    check_attend_shapes(t.value(f3d), t.value(f2d), n_heads, "cross_attend");
    const std::size_t d = t.value(f3d).extent(0);
    const std::size_t dh = d / static_cast<std::size_t>(n_heads);
    // Row-vector convention: a single query q = f3d * Wq + bq.
    const Var q = t.add(t.matvec(t.transpose(vars.wq), f3d), vars.bq);
    const Var k = t.add_row_broadcast(t.matmul(f2d, vars.wk), vars.bk);
    const Var v = t.add_row_broadcast(t.matmul(f2d, vars.wv), vars.bv);
    std::vector<Var> outs, weights;
    outs.reserve(static_cast<std::size_t>(n_heads));
    weights.reserve(static_cast<std::size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
        const std::size_t c0 = static_cast<std::size_t>(h) * dh;
        const Var qh = t.slice_vec(q, c0, c0 + dh);
        const Var kh = t.slice_cols(k, c0, c0 + dh);
        const Var vh = t.slice_cols(v, c0, c0 + dh);
        const Var scores =
            t.affine(t.matvec(kh, qh), 1.0 / std::sqrt(static_cast<double>(dh)), 0.0);
        const Var a = t.softmax(scores, 0);
        weights.push_back(a);
        outs.push_back(t.matvec(t.transpose(vh), a));
    }
    TapeAttend r;
    r.attended = t.add(t.matvec(t.transpose(vars.wo), t.concat_vecs(outs)), vars.bo);
    r.weights = t.stack_rows(weights);
    return r;
}

}  // namespace

Var cross_attend_tape(Tape& tape, const CrossAttentionVars& vars, Var f3d, Var f2d,
                      int n_heads) {
    const TapeAttend r = cross_attend_core(tape, vars, f3d, f2d, n_heads);
    return tape.repeat_row(r.attended, tape.value(f2d).extent(0));
}

CrossAttnDetail cross_attend_detail(const Tensor& f3d, const Tensor& f2d,
                                    const CrossAttention& xattn, int n_heads) {
    Tape tape;
    const CrossAttentionVars vars = cross_attention_leaves(tape, xattn, false);
    const TapeAttend r = cross_attend_core(tape, vars, tape.leaf(f3d, false),
                                           tape.leaf(f2d, false), n_heads);
    CrossAttnDetail out;
    out.attended = tape.value(r.attended);
    out.weights = tape.value(r.weights);
    out.output = Tensor({f2d.extent(0), f3d.extent(0)});
    for (std::size_t i = 0; i < f2d.extent(0); ++i) {
        for (std::size_t j = 0; j < f3d.extent(0); ++j) {
            out.output(i, j) = out.attended[j];
        }
    }
    return out;
}

Tensor cross_attend(const Tensor& f3d, const Tensor& f2d, const CrossAttention& xattn,
                    int n_heads) {
    return cross_attend_detail(f3d, f2d, xattn, n_heads).output;
}

Tensor fuse(const Tensor& f2d, const Tensor& fout) {
    if (!f2d.same_shape(fout)) {
        throw DimensionError("fuse: shape " + f2d.shape_str() + " vs " +
                             fout.shape_str());
    }
    Tensor out = f2d;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += fout[i];
    return out;
}

FusedFeatureSet fuse_features(const Tensor& f2d, const Tensor& f3d,
                              const CrossAttention& xattn, int n_heads) {
    FusedFeatureSet set;
    set.f2d = f2d;
    set.f3d = f3d;
    set.fout = cross_attend(f3d, f2d, xattn, n_heads);
    set.fused = fuse(f2d, set.fout);
    return set;
}

ImageLossParts image_loss(const ImageHeads& heads, const FusedFeatureSet& features,
                          int organ_id) {
    Tape tape;
    const ImageHeadsVars vars = image_heads_leaves(tape, heads, false);
    const ImageLossVars loss = image_loss_tape(
        tape, vars, tape.leaf(features.f2d, false), tape.leaf(features.f3d, false),
        tape.leaf(features.fused, false), heads.n_organs, organ_id);
    ImageLossParts parts;
    parts.l2d = tape.value(loss.l2d).value();
    parts.l3d = tape.value(loss.l3d).value();
    parts.lfused = tape.value(loss.lfused).value();
    parts.total = tape.value(loss.total).value();
    return parts;
}

ImageLossVars image_loss_tape(Tape& tape, const ImageHeadsVars& vars, Var f2d, Var f3d,
                              Var fused, int n_organs, int organ_id) {
    if (organ_id < 0 || organ_id >= n_organs) {
        throw InputError("image_loss: organ_id out of range");
    }
    const std::size_t label = static_cast<std::size_t>(organ_id);
    ImageLossVars out;
    out.l2d = tape.cross_entropy_rows_mean(
        tape.add_row_broadcast(tape.matmul(f2d, vars.w_2d), vars.b_2d), label);
    out.l3d = tape.cross_entropy_vec(
        tape.add(tape.matvec(tape.transpose(vars.w_3d), f3d), vars.b_3d), label);
    out.lfused = tape.cross_entropy_rows_mean(
        tape.add_row_broadcast(tape.matmul(fused, vars.w_fused), vars.b_fused), label);
    out.total = tape.add(tape.add(out.l2d, out.l3d), out.lfused);
    return out;
}

}  // namespace sora
