#pragma once

#include "sora/tensor.hpp"

#include <cstddef>
#include <functional>
#include <vector>

namespace sora {

// Handle to a node on a Tape. Plain index, valid until the tape is cleared.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Every operation records its result eagerly plus a
// backward closure. Recording order is a topological order by construction,
// so backward() is a single reverse sweep that visits each reachable node
// exactly once and accumulates gradients into the inputs. Gradients stay
// readable through grad() until clear() starts the next step.
class Tape {
public:
    // --- graph inputs ------------------------------------------------------
    Var leaf(Tensor value, bool requires_grad = true);
    Var leaf_scalar(double v, bool requires_grad = false);

    // --- elementwise (shapes must match) ------------------------------------
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var affine(Var x, double a, double b); // a*x + b
    Var relu(Var x);
    Var gelu(Var x);    // exact erf form
    Var sigmoid(Var x);

    // --- linear algebra ------------------------------------------------------
    Var matmul(Var a, Var b);            // [m,k] x [k,n] -> [m,n]
    Var matvec(Var a, Var x);            // [m,k] x [k]   -> [m]
    Var transpose(Var a);                // [r,c] -> [c,r]
    Var dot(Var a, Var b);               // [d],[d] -> scalar
    Var cosine_sim(Var a, Var b);        // [d],[d] -> scalar in [-1,1]
    Var cosine_sim_rows(Var m, Var v);   // [r,d],[d] -> [r]

    // --- shape glue ----------------------------------------------------------
    Var row(Var m, std::size_t i);                    // [r,d] -> [d]
    Var slice_rows(Var m, std::size_t r0, std::size_t r1);
    Var slice_cols(Var m, std::size_t c0, std::size_t c1);
    Var slice_vec(Var v, std::size_t i0, std::size_t i1);
    Var concat_cols(const std::vector<Var>& mats);
    Var concat_vecs(const std::vector<Var>& vecs);
    Var stack_rows(const std::vector<Var>& vecs);     // k x [d] -> [k,d]
    Var stack_scalars(const std::vector<Var>& ss, std::size_t rows, std::size_t cols);
    Var prepend_row(Var v, Var m);                    // [d],[r,d] -> [r+1,d]
    Var repeat_row(Var v, std::size_t n);             // [d] -> [n,d]
    Var add_row_broadcast(Var m, Var v);              // m[r][c] + v[c]

    // --- normalization -------------------------------------------------------
    // rank-1: axis 0; rank-2: axis 1 normalizes rows, axis 0 columns.
    Var softmax(Var x, int axis);
    Var layer_norm_rows(Var m, Var gain, Var bias);   // eps 1e-5, biased variance

    // --- reductions ----------------------------------------------------------
    Var sum(Var x);
    Var mean(Var x);

    // --- structured / fused --------------------------------------------------
    // Non-overlapping 3D patch embedding: vol [D,H,W] cut into pd x ph x pw
    // patches (extents must divide), each flattened in (dz,dy,dx) row-major
    // order and projected by w [pd*ph*pw, d_out] plus bias. Token order is
    // (td,th,tw) row-major.
    Var conv3d_patches(Var vol, Var w, Var b,
                       std::size_t pd, std::size_t ph, std::size_t pw);
    // Numerically stable mean Bernoulli cross-entropy against fixed targets.
    Var bce_with_logits_mean(Var logits, Tensor targets);
    // Mean softmax cross-entropy over rows, one shared integer label.
    Var cross_entropy_rows_mean(Var logits, std::size_t label);
    Var cross_entropy_vec(Var logits, std::size_t label);
    // Sum over rows i of -log softmax(s_i / tau)[i]; the InfoNCE core.
    Var diag_cross_entropy_sum(Var sims, double tau);

    // --- driving -------------------------------------------------------------
    void backward(Var loss);
    const Tensor& value(Var v) const;
    const Tensor& grad(Var v) const;
    // True when the last backward() reached v, so grad(v) is readable. A
    // parameter that does not influence the loss is simply never reached;
    // its gradient is zero by definition and callers can skip or substitute.
    bool has_grad(Var v) const;
    void clear();

    std::size_t size() const { return nodes_.size(); }
    std::size_t backward_visits() const { return backward_visits_; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool grad_valid = false;
        std::vector<int> inputs;
        std::vector<double> saved;
        std::function<void(Tape&, int)> back;
    };

    int push(Tensor value, std::vector<int> inputs, std::function<void(Tape&, int)> back);
    const Node& node(Var v) const;
    Node& node_mut(int id) { return nodes_[id]; }
    bool wants(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
    Tensor& g(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
    const Tensor& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    void check(Var v, const char* who) const;

    std::vector<Node> nodes_;
    std::size_t backward_visits_ = 0;

    friend struct TapeTestPeer;
};

} // namespace sora
