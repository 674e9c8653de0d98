#include "sora/tape.hpp"

#include "sora/errors.hpp"
#include "sora/kernels.hpp"

#include <cmath>
#include <sstream>
#include <string>

namespace sora {
namespace {

constexpr double kLnEps = 1e-5;       // layer norm variance floor
constexpr double kNormFloor = 1e-12;  // below this a vector counts as degenerate

[[noreturn]] void dim_fail(const char* who, const std::string& detail) {
    throw DimensionError(std::string(who) + ": " + detail);
}

void need_rank(const Tensor& t, std::size_t r, const char* who) {
    if (t.rank() != r) {
        dim_fail(who, "expected rank " + std::to_string(r) + ", got shape " + t.shape_str());
    }
}

void need_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (!a.same_shape(b)) {
        dim_fail(who, "shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
}

// returns the squared norm; the caller divides by sqrt(aa*bb) in one step so
// exactly (anti)parallel inputs land on exactly +/-1
double checked_norm_sq(const double* p, std::size_t n, const char* who) {
    const double sq = kernels::dot(p, p, n);
    if (!(std::sqrt(sq) >= kNormFloor)) {
        throw DegenerateVectorError(std::string(who) + ": vector norm is below " +
                                    std::to_string(kNormFloor));
    }
    return sq;
}

double stable_softplus_neg_abs(double z) {
    // log(1 + exp(-|z|))
    return std::log1p(std::exp(-std::abs(z)));
}

} // namespace

// --- plumbing ---------------------------------------------------------------

int Tape::push(Tensor value, std::vector<int> inputs, std::function<void(Tape&, int)> back) {
    Node n;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    n.back = std::move(back);
    for (int id : n.inputs) {
        if (nodes_[static_cast<std::size_t>(id)].requires_grad) {
            n.requires_grad = true;
            break;
        }
    }
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

void Tape::check(Var v, const char* who) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size()) {
        throw InputError(std::string(who) + ": variable does not belong to this tape");
    }
}

const Tape::Node& Tape::node(Var v) const {
    return nodes_[static_cast<std::size_t>(v.id)];
}

const Tensor& Tape::value(Var v) const {
    check(v, "value");
    return node(v).value;
}

const Tensor& Tape::grad(Var v) const {
    check(v, "grad");
    const Node& n = node(v);
    if (!n.grad_valid) {
        throw InputError("grad: no gradient recorded for this variable; run backward first");
    }
    return n.grad;
}

bool Tape::has_grad(Var v) const {
    check(v, "has_grad");
    return node(v).grad_valid;
}

void Tape::clear() {
    nodes_.clear();
    backward_visits_ = 0;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf_scalar(double v, bool requires_grad) {
    return leaf(Tensor::scalar(v), requires_grad);
}

// --- elementwise -------------------------------------------------------------

Var Tape::add(Var a, Var b) {
    check(a, "add");
    check(b, "add");
    const Tensor& ta = val(a.id);
    const Tensor& tb = val(b.id);
    need_same_shape(ta, tb, "add");
    Tensor out(ta.shape());
    kernels::add(out.data(), ta.data(), tb.data(), ta.size());
    int id = push(std::move(out), {a.id, b.id}, [](Tape& t, int self) {
        auto& n = t.node_mut(self);
        const Tensor& gr = n.grad;
        for (int in : n.inputs) {
            if (t.wants(in)) kernels::axpy(t.g(in).data(), gr.data(), 1.0, gr.size());
        }
    });
    return Var{id};
}

Var Tape::sub(Var a, Var b) {
    check(a, "sub");
    check(b, "sub");
    const Tensor& ta = val(a.id);
    const Tensor& tb = val(b.id);
    need_same_shape(ta, tb, "sub");
    Tensor out(ta.shape());
    kernels::sub(out.data(), ta.data(), tb.data(), ta.size());
    int id = push(std::move(out), {a.id, b.id}, [](Tape& t, int self) {
        auto& n = t.node_mut(self);
        const Tensor& gr = n.grad;
        if (t.wants(n.inputs[0])) kernels::axpy(t.g(n.inputs[0]).data(), gr.data(), 1.0, gr.size());
        if (t.wants(n.inputs[1])) kernels::axpy(t.g(n.inputs[1]).data(), gr.data(), -1.0, gr.size());
    });
    return Var{id};
}

Var Tape::mul(Var a, Var b) {
    check(a, "mul");
    check(b, "mul");
    const Tensor& ta = val(a.id);
    const Tensor& tb = val(b.id);
    need_same_shape(ta, tb, "mul");
    Tensor out(ta.shape());
    kernels::mul(out.data(), ta.data(), tb.data(), ta.size());
    int id = push(std::move(out), {a.id, b.id}, [](Tape& t, int self) {
        auto& n = t.node_mut(self);
        const Tensor& gr = n.grad;
        const Tensor& va = t.val(n.inputs[0]);
        const Tensor& vb = t.val(n.inputs[1]);
        if (t.wants(n.inputs[0])) {
            Tensor& da = t.g(n.inputs[0]);
            for (std::size_t i = 0; i < gr.size(); ++i) da[i] += gr[i] * vb[i];
        }
        if (t.wants(n.inputs[1])) {
            Tensor& db = t.g(n.inputs[1]);
            for (std::size_t i = 0; i < gr.size(); ++i) db[i] += gr[i] * va[i];
        }
    });
    return Var{id};
}

Var Tape::affine(Var x, double a, double b) {
    check(x, "affine");
    const Tensor& tx = val(x.id);
    Tensor out(tx.shape());
    for (std::size_t i = 0; i < tx.size(); ++i) out[i] = a * tx[i] + b;
    int id = push(std::move(out), {x.id}, [a](Tape& t, int self) {
        auto& n = t.node_mut(self);
        if (t.wants(n.inputs[0])) {
            kernels::axpy(t.g(n.inputs[0]).data(), n.grad.data(), a, n.grad.size());
        }
    });
    return Var{id};
}

Var Tape::relu(Var x) {
    check(x, "relu");
    const Tensor& tx = val(x.id);
    Tensor out(tx.shape());
    for (std::size_t i = 0; i < tx.size(); ++i) out[i] = tx[i] > 0.0 ? tx[i] : 0.0;
    int id = push(std::move(out), {x.id}, [](Tape& t, int self) {
        auto& n = t.node_mut(self);
        if (!t.wants(n.inputs[0])) return;
        const Tensor& vx = t.val(n.inputs[0]);
        Tensor& dx = t.g(n.inputs[0]);
        for (std::size_t i = 0; i < vx.size(); ++i) {
            if (vx[i] > 0.0) dx[i] += n.grad[i];
        }
    });
    return Var{id};
}

Var Tape::gelu(Var x) {
    check(x, "gelu");
    const Tensor& tx = val(x.id);
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    Tensor out(tx.shape());
    for (std::size_t i = 0; i < tx.size(); ++i) {
        const double v = tx[i];
        out[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    }
    int id = push(std::move(out), {x.id}, [](Tape& t, int self) {
        auto& n = t.node_mut(self);
        if (!t.wants(n.inputs[0])) return;
        const Tensor& vx = t.val(n.inputs[0]);
        Tensor& dx = t.g(n.inputs[0]);
        constexpr double inv_sqrt2 = 0.70710678118654752440;
        constexpr double inv_sqrt_2pi = 0.3989422804014326779399461;
        for (std::size_t i = 0; i < vx.size(); ++i) {
            const double v = vx[i];
            const double Phi = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            const double phi = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            dx[i] += n.grad[i] * (Phi + v * phi);
        }
    });
    return Var{id};
}

Var Tape::sigmoid(Var x) {
    check(x, "sigmoid");
    const Tensor& tx = val(x.id);
    Tensor out(tx.shape());
    for (std::size_t i = 0; i < tx.size(); ++i) {
        const double v = tx[i];
        // branch keeps exp() off the overflow side for either sign
        out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                          : std::exp(v) / (1.0 + std::exp(v));
    }
    int id = push(std::move(out), {x.id}, [](Tape& t, int self) {
        auto& n = t.node_mut(self);
        if (!t.wants(n.inputs[0])) return;
        Tensor& dx = t.g(n.inputs[0]);
        for (std::size_t i = 0; i < n.value.size(); ++i) {
            const double s = n.value[i];
            dx[i] += n.grad[i] * s * (1.0 - s);
        }
    });
    return Var{id};
}

// --- linear algebra -----------------------------------------------------------

Var Tape::matmul(Var a, Var b) {
    check(a, "matmul");
    check(b, "matmul");
    const Tensor& ta = val(a.id);
    const Tensor& tb = val(b.id);
    need_rank(ta, 2, "matmul");
    need_rank(tb, 2, "matmul");
    if (ta.extent(1) != tb.extent(0)) {
        dim_fail("matmul", "inner extents differ, lhs " + ta.shape_str() + " rhs " + tb.shape_str());
    }
    const std::size_t m = ta.extent(0), k = ta.extent(1), n = tb.extent(1);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out.data() + i * n;
        const double* arow = ta.data() + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            kernels::axpy(orow, tb.data() + kk * n, arow[kk], n);
        }
    }
    int id = push(std::move(out), {a.id, b.id}, [m, k, n](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        const Tensor& gr = nd.grad;
        const Tensor& va = t.val(nd.inputs[0]);
        const Tensor& vb = t.val(nd.inputs[1]);
        if (t.wants(nd.inputs[0])) {
            // dA = dC * B^T, row by row: dA[i,kk] = dot(dC[i,:], B[kk,:])
            Tensor& da = t.g(nd.inputs[0]);
            for (std::size_t i = 0; i < m; ++i) {
                const double* grow = gr.data() + i * n;
                double* darow = da.data() + i * k;
                for (std::size_t kk = 0; kk < k; ++kk) {
                    darow[kk] += kernels::dot(grow, vb.data() + kk * n, n);
                }
            }
        }
        if (t.wants(nd.inputs[1])) {
            // dB = A^T * dC: dB[kk,:] += A[i,kk] * dC[i,:]
            Tensor& db = t.g(nd.inputs[1]);
            for (std::size_t i = 0; i < m; ++i) {
                const double* grow = gr.data() + i * n;
                const double* arow = va.data() + i * k;
                for (std::size_t kk = 0; kk < k; ++kk) {
                    kernels::axpy(db.data() + kk * n, grow, arow[kk], n);
                }
            }
        }
    });
    return Var{id};
}

Var Tape::matvec(Var a, Var x) {
    check(a, "matvec");
    check(x, "matvec");
    const Tensor& ta = val(a.id);
    const Tensor& tx = val(x.id);
    need_rank(ta, 2, "matvec");
    need_rank(tx, 1, "matvec");
    if (ta.extent(1) != tx.extent(0)) {
        dim_fail("matvec", "inner extents differ, lhs " + ta.shape_str() + " rhs " + tx.shape_str());
    }
    const std::size_t m = ta.extent(0), k = ta.extent(1);
    Tensor out({m});
    for (std::size_t i = 0; i < m; ++i) {
        out[i] = kernels::dot(ta.data() + i * k, tx.data(), k);
    }
    int id = push(std::move(out), {a.id, x.id}, [m, k](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        const Tensor& gr = nd.grad;
        const Tensor& va = t.val(nd.inputs[0]);
        const Tensor& vx = t.val(nd.inputs[1]);
        if (t.wants(nd.inputs[0])) {
            Tensor& da = t.g(nd.inputs[0]);
            for (std::size_t i = 0; i < m; ++i) {
                kernels::axpy(da.data() + i * k, vx.data(), gr[i], k);
            }
        }
        if (t.wants(nd.inputs[1])) {
            Tensor& dx = t.g(nd.inputs[1]);
            for (std::size_t i = 0; i < m; ++i) {
                kernels::axpy(dx.data(), va.data() + i * k, gr[i], k);
            }
        }
    });
    return Var{id};
}

Var Tape::transpose(Var a) {
    check(a, "transpose");
    const Tensor& ta = val(a.id);
    need_rank(ta, 2, "transpose");
    const std::size_t r = ta.extent(0), c = ta.extent(1);
    Tensor out({c, r});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out(j, i) = ta(i, j);
    }
    int id = push(std::move(out), {a.id}, [r, c](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        if (!t.wants(nd.inputs[0])) return;
        Tensor& da = t.g(nd.inputs[0]);
        const Tensor& gr = nd.grad;
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) da(i, j) += gr(j, i);
        }
    });
    return Var{id};
}

Var Tape::dot(Var a, Var b) {
    check(a, "dot");
    check(b, "dot");
    const Tensor& ta = val(a.id);
    const Tensor& tb = val(b.id);
    need_rank(ta, 1, "dot");
    need_same_shape(ta, tb, "dot");
    Tensor out = Tensor::scalar(kernels::dot(ta.data(), tb.data(), ta.size()));
    int id = push(std::move(out), {a.id, b.id}, [](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        const double gr = nd.grad[0];
        const Tensor& va = t.val(nd.inputs[0]);
        const Tensor& vb = t.val(nd.inputs[1]);
        if (t.wants(nd.inputs[0])) kernels::axpy(t.g(nd.inputs[0]).data(), vb.data(), gr, vb.size());
        if (t.wants(nd.inputs[1])) kernels::axpy(t.g(nd.inputs[1]).data(), va.data(), gr, va.size());
    });
    return Var{id};
}

Var Tape::cosine_sim(Var a, Var b) {
    check(a, "cosine_sim");
    check(b, "cosine_sim");
    const Tensor& ta = val(a.id);
    const Tensor& tb = val(b.id);
    need_rank(ta, 1, "cosine_sim");
    need_same_shape(ta, tb, "cosine_sim");
    const std::size_t d = ta.size();
    const double aa = checked_norm_sq(ta.data(), d, "cosine_sim");
    const double bb = checked_norm_sq(tb.data(), d, "cosine_sim");
    double c = kernels::dot(ta.data(), tb.data(), d) / std::sqrt(aa * bb);
    if (c > 1.0) c = 1.0;
    if (c < -1.0) c = -1.0;
    int id = push(Tensor::scalar(c), {a.id, b.id}, [](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        const double gr = nd.grad[0];
        const double c = nd.value[0];
        const double aa = nd.saved[0];
        const double bb = nd.saved[1];
        const Tensor& va = t.val(nd.inputs[0]);
        const Tensor& vb = t.val(nd.inputs[1]);
        const double inv = 1.0 / std::sqrt(aa * bb);
        if (t.wants(nd.inputs[0])) {
            Tensor& da = t.g(nd.inputs[0]);
            kernels::axpy(da.data(), vb.data(), gr * inv, vb.size());
            kernels::axpy(da.data(), va.data(), -gr * c / aa, va.size());
        }
        if (t.wants(nd.inputs[1])) {
            Tensor& db = t.g(nd.inputs[1]);
            kernels::axpy(db.data(), va.data(), gr * inv, va.size());
            kernels::axpy(db.data(), vb.data(), -gr * c / bb, vb.size());
        }
    });
    nodes_.back().saved = {aa, bb};
    return Var{id};
}

Var Tape::cosine_sim_rows(Var m, Var v) {
    check(m, "cosine_sim_rows");
    check(v, "cosine_sim_rows");
    const Tensor& tm = val(m.id);
    const Tensor& tv = val(v.id);
    need_rank(tm, 2, "cosine_sim_rows");
    need_rank(tv, 1, "cosine_sim_rows");
    if (tm.extent(1) != tv.extent(0)) {
        dim_fail("cosine_sim_rows", "row width " + tm.shape_str() + " vs vector " + tv.shape_str());
    }
    const std::size_t r = tm.extent(0), d = tm.extent(1);
    const double vv_sq = checked_norm_sq(tv.data(), d, "cosine_sim_rows");
    Tensor out({r});
    std::vector<double> saved(r + 1);
    saved[r] = vv_sq;
    for (std::size_t i = 0; i < r; ++i) {
        const double* rowp = tm.data() + i * d;
        const double rr = checked_norm_sq(rowp, d, "cosine_sim_rows");
        saved[i] = rr;
        double c = kernels::dot(rowp, tv.data(), d) / std::sqrt(rr * vv_sq);
        if (c > 1.0) c = 1.0;
        if (c < -1.0) c = -1.0;
        out[i] = c;
    }
    int id = push(std::move(out), {m.id, v.id}, [r, d](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        const Tensor& gr = nd.grad;
        const Tensor& vm = t.val(nd.inputs[0]);
        const Tensor& vv = t.val(nd.inputs[1]);
        const double vv_sq = nd.saved[r];
        for (std::size_t i = 0; i < r; ++i) {
            const double gi = gr[i];
            if (gi == 0.0) continue;
            const double rr = nd.saved[i];
            const double c = nd.value[i];
            const double inv = 1.0 / std::sqrt(rr * vv_sq);
            const double* rowp = vm.data() + i * d;
            if (t.wants(nd.inputs[0])) {
                double* drow = t.g(nd.inputs[0]).data() + i * d;
                kernels::axpy(drow, vv.data(), gi * inv, d);
                kernels::axpy(drow, rowp, -gi * c / rr, d);
            }
            if (t.wants(nd.inputs[1])) {
                Tensor& dv = t.g(nd.inputs[1]);
                kernels::axpy(dv.data(), rowp, gi * inv, d);
                kernels::axpy(dv.data(), vv.data(), -gi * c / vv_sq, d);
            }
        }
    });
    nodes_.back().saved = std::move(saved);
    return Var{id};
}

// --- shape glue ----------------------------------------------------------------

Var Tape::row(Var m, std::size_t i) {
    check(m, "row");
    const Tensor& tm = val(m.id);
    need_rank(tm, 2, "row");
    if (i >= tm.extent(0)) dim_fail("row", "row index out of range for " + tm.shape_str());
    const std::size_t d = tm.extent(1);
    Tensor out({d});
    for (std::size_t j = 0; j < d; ++j) out[j] = tm(i, j);
    int id = push(std::move(out), {m.id}, [i, d](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        if (!t.wants(nd.inputs[0])) return;
        kernels::axpy(t.g(nd.inputs[0]).data() + i * d, nd.grad.data(), 1.0, d);
    });
    return Var{id};
}

Var Tape::slice_rows(Var m, std::size_t r0, std::size_t r1) {
    check(m, "slice_rows");
    const Tensor& tm = val(m.id);
    need_rank(tm, 2, "slice_rows");
    if (r0 >= r1 || r1 > tm.extent(0)) {
        dim_fail("slice_rows", "bad row range for " + tm.shape_str());
    }
    const std::size_t h = r1 - r0, c = tm.extent(1);
    Tensor out({h, c});
    for (std::size_t i = 0; i < h * c; ++i) out[i] = tm.data()[r0 * c + i];
    int id = push(std::move(out), {m.id}, [r0, h, c](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        if (!t.wants(nd.inputs[0])) return;
        kernels::axpy(t.g(nd.inputs[0]).data() + r0 * c, nd.grad.data(), 1.0, h * c);
    });
    return Var{id};
}

Var Tape::slice_cols(Var m, std::size_t c0, std::size_t c1) {
    check(m, "slice_cols");
    const Tensor& tm = val(m.id);
    need_rank(tm, 2, "slice_cols");
    if (c0 >= c1 || c1 > tm.extent(1)) {
        dim_fail("slice_cols", "bad column range for " + tm.shape_str());
    }
    const std::size_t r = tm.extent(0), c = tm.extent(1), w = c1 - c0;
    Tensor out({r, w});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < w; ++j) out(i, j) = tm(i, c0 + j);
    }
    int id = push(std::move(out), {m.id}, [r, c, c0, w](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        if (!t.wants(nd.inputs[0])) return;
        Tensor& dm = t.g(nd.inputs[0]);
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < w; ++j) dm.data()[i * c + c0 + j] += nd.grad(i, j);
        }
    });
    return Var{id};
}

Var Tape::slice_vec(Var v, std::size_t i0, std::size_t i1) {
    check(v, "slice_vec");
    const Tensor& tv = val(v.id);
    need_rank(tv, 1, "slice_vec");
    if (i0 >= i1 || i1 > tv.extent(0)) dim_fail("slice_vec", "bad range for " + tv.shape_str());
    const std::size_t w = i1 - i0;
    Tensor out({w});
    for (std::size_t j = 0; j < w; ++j) out[j] = tv[i0 + j];
    int id = push(std::move(out), {v.id}, [i0, w](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        if (!t.wants(nd.inputs[0])) return;
        kernels::axpy(t.g(nd.inputs[0]).data() + i0, nd.grad.data(), 1.0, w);
    });
    return Var{id};
}

Var Tape::concat_cols(const std::vector<Var>& mats) {
    if (mats.empty()) throw InputError("concat_cols: no inputs");
    std::size_t r = 0, total = 0;
    std::vector<int> ids;
    std::vector<std::size_t> widths;
    for (Var m : mats) {
        check(m, "concat_cols");
        const Tensor& tm = val(m.id);
        need_rank(tm, 2, "concat_cols");
        if (ids.empty()) {
            r = tm.extent(0);
        } else if (tm.extent(0) != r) {
            dim_fail("concat_cols", "row count mismatch at input " + std::to_string(ids.size()));
        }
        ids.push_back(m.id);
        widths.push_back(tm.extent(1));
        total += tm.extent(1);
    }
    Tensor out({r, total});
    std::size_t off = 0;
    for (std::size_t s = 0; s < ids.size(); ++s) {
        const Tensor& tm = val(ids[s]);
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < widths[s]; ++j) out(i, off + j) = tm(i, j);
        }
        off += widths[s];
    }
    int id = push(std::move(out), ids, [r, widths, total](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        std::size_t off = 0;
        for (std::size_t s = 0; s < nd.inputs.size(); ++s) {
            const std::size_t w = widths[s];
            if (t.wants(nd.inputs[s])) {
                Tensor& dm = t.g(nd.inputs[s]);
                for (std::size_t i = 0; i < r; ++i) {
                    for (std::size_t j = 0; j < w; ++j) dm(i, j) += nd.grad.data()[i * total + off + j];
                }
            }
            off += w;
        }
    });
    return Var{id};
}

Var Tape::concat_vecs(const std::vector<Var>& vecs) {
    if (vecs.empty()) throw InputError("concat_vecs: no inputs");
    std::vector<int> ids;
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (Var v : vecs) {
        check(v, "concat_vecs");
        const Tensor& tv = val(v.id);
        need_rank(tv, 1, "concat_vecs");
        ids.push_back(v.id);
        widths.push_back(tv.size());
        total += tv.size();
    }
    Tensor out({total});
    std::size_t off = 0;
    for (std::size_t s = 0; s < ids.size(); ++s) {
        const Tensor& tv = val(ids[s]);
        for (std::size_t j = 0; j < widths[s]; ++j) out[off + j] = tv[j];
        off += widths[s];
    }
    int id = push(std::move(out), ids, [widths](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        std::size_t off = 0;
        for (std::size_t s = 0; s < nd.inputs.size(); ++s) {
            if (t.wants(nd.inputs[s])) {
                kernels::axpy(t.g(nd.inputs[s]).data(), nd.grad.data() + off, 1.0, widths[s]);
            }
            off += widths[s];
        }
    });
    return Var{id};
}

Var Tape::stack_rows(const std::vector<Var>& vecs) {
    if (vecs.empty()) throw InputError("stack_rows: no inputs");
    std::vector<int> ids;
    std::size_t d = 0;
    for (Var v : vecs) {
        check(v, "stack_rows");
        const Tensor& tv = val(v.id);
        need_rank(tv, 1, "stack_rows");
        if (ids.empty()) {
            d = tv.size();
        } else if (tv.size() != d) {
            dim_fail("stack_rows", "width mismatch at input " + std::to_string(ids.size()));
        }
        ids.push_back(v.id);
    }
    const std::size_t k = ids.size();
    Tensor out({k, d});
    for (std::size_t i = 0; i < k; ++i) {
        const Tensor& tv = val(ids[i]);
        for (std::size_t j = 0; j < d; ++j) out(i, j) = tv[j];
    }
    int id = push(std::move(out), ids, [d](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        for (std::size_t i = 0; i < nd.inputs.size(); ++i) {
            if (t.wants(nd.inputs[i])) {
                kernels::axpy(t.g(nd.inputs[i]).data(), nd.grad.data() + i * d, 1.0, d);
            }
        }
    });
    return Var{id};
}

Var Tape::stack_scalars(const std::vector<Var>& ss, std::size_t rows, std::size_t cols) {
    if (ss.size() != rows * cols) {
        dim_fail("stack_scalars", std::to_string(ss.size()) + " scalars for " +
                                      std::to_string(rows) + "x" + std::to_string(cols));
    }
    std::vector<int> ids;
    Tensor out({rows, cols});
    for (std::size_t i = 0; i < ss.size(); ++i) {
        check(ss[i], "stack_scalars");
        const Tensor& tv = val(ss[i].id);
        if (tv.size() != 1) dim_fail("stack_scalars", "input " + std::to_string(i) + " is not scalar");
        ids.push_back(ss[i].id);
        out[i] = tv[0];
    }
    int id = push(std::move(out), ids, [](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        for (std::size_t i = 0; i < nd.inputs.size(); ++i) {
            if (t.wants(nd.inputs[i])) t.g(nd.inputs[i])[0] += nd.grad[i];
        }
    });
    return Var{id};
}

Var Tape::prepend_row(Var v, Var m) {
    check(v, "prepend_row");
    check(m, "prepend_row");
    const Tensor& tv = val(v.id);
    const Tensor& tm = val(m.id);
    need_rank(tv, 1, "prepend_row");
    need_rank(tm, 2, "prepend_row");
    if (tv.size() != tm.extent(1)) {
        dim_fail("prepend_row", "vector " + tv.shape_str() + " vs matrix " + tm.shape_str());
    }
    const std::size_t r = tm.extent(0), d = tm.extent(1);
    Tensor out({r + 1, d});
    for (std::size_t j = 0; j < d; ++j) out(0, j) = tv[j];
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < d; ++j) out(i + 1, j) = tm(i, j);
    }
    int id = push(std::move(out), {v.id, m.id}, [r, d](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        if (t.wants(nd.inputs[0])) {
            kernels::axpy(t.g(nd.inputs[0]).data(), nd.grad.data(), 1.0, d);
        }
        if (t.wants(nd.inputs[1])) {
            kernels::axpy(t.g(nd.inputs[1]).data(), nd.grad.data() + d, 1.0, r * d);
        }
    });
    return Var{id};
}

Var Tape::repeat_row(Var v, std::size_t n) {
    check(v, "repeat_row");
    const Tensor& tv = val(v.id);
    need_rank(tv, 1, "repeat_row");
    if (n == 0) dim_fail("repeat_row", "need at least one row");
    const std::size_t d = tv.size();
    Tensor out({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) out(i, j) = tv[j];
    }
    int id = push(std::move(out), {v.id}, [n, d](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        if (!t.wants(nd.inputs[0])) return;
        Tensor& dv = t.g(nd.inputs[0]);
        for (std::size_t i = 0; i < n; ++i) {
            kernels::axpy(dv.data(), nd.grad.data() + i * d, 1.0, d);
        }
    });
    return Var{id};
}

Var Tape::add_row_broadcast(Var m, Var v) {
    check(m, "add_row_broadcast");
    check(v, "add_row_broadcast");
    const Tensor& tm = val(m.id);
    const Tensor& tv = val(v.id);
    need_rank(tm, 2, "add_row_broadcast");
    need_rank(tv, 1, "add_row_broadcast");
    if (tm.extent(1) != tv.size()) {
        dim_fail("add_row_broadcast", "matrix " + tm.shape_str() + " vs vector " + tv.shape_str());
    }
    const std::size_t r = tm.extent(0), d = tm.extent(1);
    Tensor out({r, d});
    for (std::size_t i = 0; i < r; ++i) {
        kernels::add(out.data() + i * d, tm.data() + i * d, tv.data(), d);
    }
    int id = push(std::move(out), {m.id, v.id}, [r, d](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        if (t.wants(nd.inputs[0])) {
            kernels::axpy(t.g(nd.inputs[0]).data(), nd.grad.data(), 1.0, r * d);
        }
        if (t.wants(nd.inputs[1])) {
            Tensor& dv = t.g(nd.inputs[1]);
            for (std::size_t i = 0; i < r; ++i) {
                kernels::axpy(dv.data(), nd.grad.data() + i * d, 1.0, d);
            }
        }
    });
    return Var{id};
}

// --- normalization ---------------------------------------------------------------

namespace {

void softmax_span(const double* x, double* y, std::size_t n) {
    double m = x[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = std::exp(x[i] - m);
        s += y[i];
    }
    const double inv = 1.0 / s;
    for (std::size_t i = 0; i < n; ++i) y[i] *= inv;
}

// dx = y .* (dy - dot(dy, y)), written into dst with +=
void softmax_back_span(const double* y, const double* dy, double* dst, std::size_t n) {
    const double inner = kernels::dot(dy, y, n);
    for (std::size_t i = 0; i < n; ++i) dst[i] += y[i] * (dy[i] - inner);
}

} // namespace

Var Tape::softmax(Var x, int axis) {
    check(x, "softmax");
    const Tensor& tx = val(x.id);
    if (tx.rank() == 1) {
        if (axis != 0) dim_fail("softmax", "rank-1 input has only axis 0");
        Tensor out({tx.size()});
        softmax_span(tx.data(), out.data(), tx.size());
        int id = push(std::move(out), {x.id}, [](Tape& t, int self) {
            auto& nd = t.node_mut(self);
            if (!t.wants(nd.inputs[0])) return;
            softmax_back_span(nd.value.data(), nd.grad.data(), t.g(nd.inputs[0]).data(),
                              nd.value.size());
        });
        return Var{id};
    }
    need_rank(tx, 2, "softmax");
    const std::size_t r = tx.extent(0), c = tx.extent(1);
    if (axis == 1) {
        Tensor out({r, c});
        for (std::size_t i = 0; i < r; ++i) softmax_span(tx.data() + i * c, out.data() + i * c, c);
        int id = push(std::move(out), {x.id}, [r, c](Tape& t, int self) {
            auto& nd = t.node_mut(self);
            if (!t.wants(nd.inputs[0])) return;
            Tensor& dx = t.g(nd.inputs[0]);
            for (std::size_t i = 0; i < r; ++i) {
                softmax_back_span(nd.value.data() + i * c, nd.grad.data() + i * c,
                                  dx.data() + i * c, c);
            }
        });
        return Var{id};
    }
    if (axis != 0) dim_fail("softmax", "rank-2 input has axes 0 and 1");
    // column softmax via gather/scatter
    Tensor out({r, c});
    std::vector<double> col(r), soft(r);
    for (std::size_t j = 0; j < c; ++j) {
        for (std::size_t i = 0; i < r; ++i) col[i] = tx(i, j);
        softmax_span(col.data(), soft.data(), r);
        for (std::size_t i = 0; i < r; ++i) out(i, j) = soft[i];
    }
    int id = push(std::move(out), {x.id}, [r, c](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        if (!t.wants(nd.inputs[0])) return;
        Tensor& dx = t.g(nd.inputs[0]);
        std::vector<double> y(r), dy(r), acc(r);
        for (std::size_t j = 0; j < c; ++j) {
            for (std::size_t i = 0; i < r; ++i) {
                y[i] = nd.value(i, j);
                dy[i] = nd.grad(i, j);
                acc[i] = 0.0;
            }
            softmax_back_span(y.data(), dy.data(), acc.data(), r);
            for (std::size_t i = 0; i < r; ++i) dx(i, j) += acc[i];
        }
    });
    return Var{id};
}

Var Tape::layer_norm_rows(Var m, Var gain, Var bias) {
    check(m, "layer_norm_rows");
    check(gain, "layer_norm_rows");
    check(bias, "layer_norm_rows");
    const Tensor& tm = val(m.id);
    const Tensor& tg = val(gain.id);
    const Tensor& tb = val(bias.id);
    need_rank(tm, 2, "layer_norm_rows");
    need_rank(tg, 1, "layer_norm_rows");
    need_rank(tb, 1, "layer_norm_rows");
    const std::size_t r = tm.extent(0), d = tm.extent(1);
    if (tg.size() != d || tb.size() != d) {
        dim_fail("layer_norm_rows", "gain/bias width must match " + tm.shape_str());
    }
    Tensor out({r, d});
    std::vector<double> saved(2 * r); // mu, inv_std per row
    for (std::size_t i = 0; i < r; ++i) {
        const double* xp = tm.data() + i * d;
        const double mu = kernels::sum(xp, d) / static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double dv = xp[j] - mu;
            var += dv * dv;
        }
        var /= static_cast<double>(d);
        const double inv_std = 1.0 / std::sqrt(var + kLnEps);
        saved[2 * i] = mu;
        saved[2 * i + 1] = inv_std;
        for (std::size_t j = 0; j < d; ++j) {
            out(i, j) = tg[j] * ((xp[j] - mu) * inv_std) + tb[j];
        }
    }
    int id = push(std::move(out), {m.id, gain.id, bias.id}, [r, d](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        const Tensor& vm = t.val(nd.inputs[0]);
        const Tensor& vg = t.val(nd.inputs[1]);
        std::vector<double> xhat(d), dxhat(d);
        for (std::size_t i = 0; i < r; ++i) {
            const double mu = nd.saved[2 * i];
            const double inv_std = nd.saved[2 * i + 1];
            const double* xp = vm.data() + i * d;
            const double* gp = nd.grad.data() + i * d;
            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                xhat[j] = (xp[j] - mu) * inv_std;
                dxhat[j] = gp[j] * vg[j];
                mean_dxhat += dxhat[j];
                mean_dxhat_xhat += dxhat[j] * xhat[j];
            }
            mean_dxhat /= static_cast<double>(d);
            mean_dxhat_xhat /= static_cast<double>(d);
            if (t.wants(nd.inputs[0])) {
                double* dm = t.g(nd.inputs[0]).data() + i * d;
                for (std::size_t j = 0; j < d; ++j) {
                    dm[j] += inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                }
            }
            if (t.wants(nd.inputs[1])) {
                Tensor& dg = t.g(nd.inputs[1]);
                for (std::size_t j = 0; j < d; ++j) dg[j] += gp[j] * xhat[j];
            }
            if (t.wants(nd.inputs[2])) {
                Tensor& db = t.g(nd.inputs[2]);
                for (std::size_t j = 0; j < d; ++j) db[j] += gp[j];
            }
        }
    });
    nodes_.back().saved = std::move(saved);
    return Var{id};
}

// --- reductions -------------------------------------------------------------------

Var Tape::sum(Var x) {
    check(x, "sum");
    const Tensor& tx = val(x.id);
    Tensor out = Tensor::scalar(kernels::sum(tx.data(), tx.size()));
    int id = push(std::move(out), {x.id}, [](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        if (!t.wants(nd.inputs[0])) return;
        Tensor& dx = t.g(nd.inputs[0]);
        const double gr = nd.grad[0];
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gr;
    });
    return Var{id};
}

Var Tape::mean(Var x) {
    check(x, "mean");
    const Tensor& tx = val(x.id);
    const double n = static_cast<double>(tx.size());
    Tensor out = Tensor::scalar(kernels::sum(tx.data(), tx.size()) / n);
    int id = push(std::move(out), {x.id}, [n](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        if (!t.wants(nd.inputs[0])) return;
        Tensor& dx = t.g(nd.inputs[0]);
        const double gr = nd.grad[0] / n;
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gr;
    });
    return Var{id};
}

// --- structured / fused --------------------------------------------------------------

Var Tape::conv3d_patches(Var vol, Var w, Var b,
                         std::size_t pd, std::size_t ph, std::size_t pw) {
    check(vol, "conv3d_patches");
    check(w, "conv3d_patches");
    check(b, "conv3d_patches");
    const Tensor& tv = val(vol.id);
    const Tensor& tw = val(w.id);
    const Tensor& tb = val(b.id);
    need_rank(tv, 3, "conv3d_patches");
    need_rank(tw, 2, "conv3d_patches");
    need_rank(tb, 1, "conv3d_patches");
    const std::size_t D = tv.extent(0), H = tv.extent(1), W = tv.extent(2);
    if (pd == 0 || ph == 0 || pw == 0 || D % pd || H % ph || W % pw) {
        throw ConfigError("conv3d_patches: patch " + std::to_string(pd) + "x" +
                          std::to_string(ph) + "x" + std::to_string(pw) +
                          " must divide volume " + tv.shape_str());
    }
    const std::size_t pv = pd * ph * pw;
    if (tw.extent(0) != pv) {
        dim_fail("conv3d_patches", "weight rows " + tw.shape_str() + " vs patch volume " +
                                       std::to_string(pv));
    }
    const std::size_t dout = tw.extent(1);
    if (tb.size() != dout) dim_fail("conv3d_patches", "bias width " + tb.shape_str());
    const std::size_t td = D / pd, th = H / ph, tw_ = W / pw;
    const std::size_t nt = td * th * tw_;

    Tensor out({nt, dout});
    std::vector<double> buf(pv);
    for (std::size_t t0 = 0; t0 < td; ++t0) {
        for (std::size_t t1 = 0; t1 < th; ++t1) {
            for (std::size_t t2 = 0; t2 < tw_; ++t2) {
                const std::size_t tok = (t0 * th + t1) * tw_ + t2;
                std::size_t p = 0;
                for (std::size_t dz = 0; dz < pd; ++dz) {
                    for (std::size_t dy = 0; dy < ph; ++dy) {
                        for (std::size_t dx = 0; dx < pw; ++dx, ++p) {
                            buf[p] = tv(t0 * pd + dz, t1 * ph + dy, t2 * pw + dx);
                        }
                    }
                }
                double* orow = out.data() + tok * dout;
                for (std::size_t j = 0; j < dout; ++j) orow[j] = tb[j];
                for (p = 0; p < pv; ++p) {
                    if (buf[p] != 0.0) kernels::axpy(orow, tw.data() + p * dout, buf[p], dout);
                }
            }
        }
    }
    int id = push(std::move(out), {vol.id, w.id, b.id},
                  [pd, ph, pw, pv, dout, td, th, tw_](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        const Tensor& vv = t.val(nd.inputs[0]);
        const Tensor& vw = t.val(nd.inputs[1]);
        const bool want_vol = t.wants(nd.inputs[0]);
        const bool want_w = t.wants(nd.inputs[1]);
        const bool want_b = t.wants(nd.inputs[2]);
        std::vector<double> buf(pv);
        for (std::size_t t0 = 0; t0 < td; ++t0) {
            for (std::size_t t1 = 0; t1 < th; ++t1) {
                for (std::size_t t2 = 0; t2 < tw_; ++t2) {
                    const std::size_t tok = (t0 * th + t1) * tw_ + t2;
                    const double* grow = nd.grad.data() + tok * dout;
                    std::size_t p = 0;
                    for (std::size_t dz = 0; dz < pd; ++dz) {
                        for (std::size_t dy = 0; dy < ph; ++dy) {
                            for (std::size_t dx = 0; dx < pw; ++dx, ++p) {
                                buf[p] = vv(t0 * pd + dz, t1 * ph + dy, t2 * pw + dx);
                            }
                        }
                    }
                    if (want_b) {
                        kernels::axpy(t.g(nd.inputs[2]).data(), grow, 1.0, dout);
                    }
                    if (want_w) {
                        Tensor& dw = t.g(nd.inputs[1]);
                        for (p = 0; p < pv; ++p) {
                            if (buf[p] != 0.0) kernels::axpy(dw.data() + p * dout, grow, buf[p], dout);
                        }
                    }
                    if (want_vol) {
                        Tensor& dv = t.g(nd.inputs[0]);
                        p = 0;
                        for (std::size_t dz = 0; dz < pd; ++dz) {
                            for (std::size_t dy = 0; dy < ph; ++dy) {
                                for (std::size_t dx = 0; dx < pw; ++dx, ++p) {
                                    dv(t0 * pd + dz, t1 * ph + dy, t2 * pw + dx) +=
                                        kernels::dot(vw.data() + p * dout, grow, dout);
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    return Var{id};
}

Var Tape::bce_with_logits_mean(Var logits, Tensor targets) {
    check(logits, "bce_with_logits_mean");
    const Tensor& tz = val(logits.id);
    need_same_shape(tz, targets, "bce_with_logits_mean");
    const std::size_t n = tz.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double z = tz[i];
        const double y = targets[i];
        acc += std::max(z, 0.0) - z * y + stable_softplus_neg_abs(z);
    }
    Tensor out = Tensor::scalar(acc / static_cast<double>(n));
    int id = push(std::move(out), {logits.id},
                  [tg = std::move(targets), n](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        if (!t.wants(nd.inputs[0])) return;
        const Tensor& vz = t.val(nd.inputs[0]);
        Tensor& dz = t.g(nd.inputs[0]);
        const double gr = nd.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double z = vz[i];
            const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                                      : std::exp(z) / (1.0 + std::exp(z));
            dz[i] += gr * (s - tg[i]);
        }
    });
    return Var{id};
}

namespace {

double row_cross_entropy(const double* z, std::size_t n, std::size_t label) {
    double m = z[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, z[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += std::exp(z[i] - m);
    return m + std::log(s) - z[label];
}

// dst += g * (softmax(z) - onehot(label))
void row_cross_entropy_back(const double* z, std::size_t n, std::size_t label,
                            double g, double* dst) {
    double m = z[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, z[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += std::exp(z[i] - m);
    const double inv = 1.0 / s;
    for (std::size_t i = 0; i < n; ++i) dst[i] += g * (std::exp(z[i] - m) * inv);
    dst[label] -= g;
}

} // namespace

Var Tape::cross_entropy_rows_mean(Var logits, std::size_t label) {
    check(logits, "cross_entropy_rows_mean");
    const Tensor& tz = val(logits.id);
    need_rank(tz, 2, "cross_entropy_rows_mean");
    const std::size_t r = tz.extent(0), n = tz.extent(1);
    if (label >= n) dim_fail("cross_entropy_rows_mean", "label out of range");
    double acc = 0.0;
    for (std::size_t i = 0; i < r; ++i) acc += row_cross_entropy(tz.data() + i * n, n, label);
    Tensor out = Tensor::scalar(acc / static_cast<double>(r));
    int id = push(std::move(out), {logits.id}, [r, n, label](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        if (!t.wants(nd.inputs[0])) return;
        const Tensor& vz = t.val(nd.inputs[0]);
        Tensor& dz = t.g(nd.inputs[0]);
        const double gr = nd.grad[0] / static_cast<double>(r);
        for (std::size_t i = 0; i < r; ++i) {
            row_cross_entropy_back(vz.data() + i * n, n, label, gr, dz.data() + i * n);
        }
    });
    return Var{id};
}

Var Tape::cross_entropy_vec(Var logits, std::size_t label) {
    check(logits, "cross_entropy_vec");
    const Tensor& tz = val(logits.id);
    need_rank(tz, 1, "cross_entropy_vec");
    const std::size_t n = tz.size();
    if (label >= n) dim_fail("cross_entropy_vec", "label out of range");
    Tensor out = Tensor::scalar(row_cross_entropy(tz.data(), n, label));
    int id = push(std::move(out), {logits.id}, [n, label](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        if (!t.wants(nd.inputs[0])) return;
        row_cross_entropy_back(t.val(nd.inputs[0]).data(), n, label, nd.grad[0],
                               t.g(nd.inputs[0]).data());
    });
    return Var{id};
}

Var Tape::diag_cross_entropy_sum(Var sims, double tau) {
    check(sims, "diag_cross_entropy_sum");
    const Tensor& ts = val(sims.id);
    need_rank(ts, 2, "diag_cross_entropy_sum");
    if (ts.extent(0) != ts.extent(1)) {
        dim_fail("diag_cross_entropy_sum", "needs a square matrix, got " + ts.shape_str());
    }
    if (!(tau > 0.0)) throw ConfigError("diag_cross_entropy_sum: tau must be positive");
    const std::size_t n = ts.extent(0);
    std::vector<double> scaled(n);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) scaled[j] = ts(i, j) / tau;
        acc += row_cross_entropy(scaled.data(), n, i);
    }
    Tensor out = Tensor::scalar(acc);
    int id = push(std::move(out), {sims.id}, [n, tau](Tape& t, int self) {
        auto& nd = t.node_mut(self);
        if (!t.wants(nd.inputs[0])) return;
        const Tensor& vs = t.val(nd.inputs[0]);
        Tensor& ds = t.g(nd.inputs[0]);
        const double gr = nd.grad[0] / tau;
        std::vector<double> scaled(n), acc(n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                scaled[j] = vs(i, j) / tau;
                acc[j] = 0.0;
            }
            row_cross_entropy_back(scaled.data(), n, i, gr, acc.data());
            for (std::size_t j = 0; j < n; ++j) ds(i, j) += acc[j];
        }
    });
    return Var{id};
}

// --- driving -------------------------------------------------------------------------

void Tape::backward(Var loss) {
    check(loss, "backward");
    const Node& ln = node(loss);
    if (ln.value.size() != 1) {
        throw DimensionError("backward: loss must be scalar, got shape " + ln.value.shape_str());
    }
    if (!ln.value.all_finite()) {
        throw NumericError("backward: loss is not finite");
    }

    // mark the reachable subgraph
    std::vector<char> reach(nodes_.size(), 0);
    std::vector<int> stack{loss.id};
    reach[static_cast<std::size_t>(loss.id)] = 1;
    while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        for (int in : nodes_[static_cast<std::size_t>(cur)].inputs) {
            if (!reach[static_cast<std::size_t>(in)]) {
                reach[static_cast<std::size_t>(in)] = 1;
                stack.push_back(in);
            }
        }
    }

    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        nodes_[i].grad_valid = false;
        if (reach[i] && nodes_[i].requires_grad) {
            nodes_[i].grad = Tensor::zeros(nodes_[i].value.shape());
            nodes_[i].grad_valid = true;
        }
    }
    nodes_[static_cast<std::size_t>(loss.id)].grad = Tensor::scalar(1.0);
    nodes_[static_cast<std::size_t>(loss.id)].grad_valid = true;

    backward_visits_ = 0;
    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (!reach[static_cast<std::size_t>(i)]) continue;
        ++backward_visits_;
        if (n.requires_grad && n.back) n.back(*this, i);
    }

    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (reach[i] && nodes_[i].requires_grad && !nodes_[i].grad.all_finite()) {
            throw NumericError("backward: non-finite gradient at node " + std::to_string(i));
        }
    }
}

} // namespace sora
