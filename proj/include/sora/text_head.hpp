#pragma once

#include "sora/corpus.hpp"
#include "sora/tape.hpp"
#include "sora/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace sora {

// Text feature extractor plus per-organ sigmoid heads. Weights are stored in
// the orientation they are applied: x [d_txt] -> w1 [d_txt, d_hidden] ->
// w2 [d_hidden, d_feat] -> w_head [d_feat, n_organs].
struct TextHead {
    int d_txt = 0;
    int d_hidden = 0;
    int d_feat = 0;
    int n_organs = 0;
    Tensor w1, b1, w2, b2, w_head, b_head;
};

struct TextHeadConfig {
    int epochs = 500;
    int batch_size = 32;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;

    void validate() const;
};

struct TextHeadTrainResult {
    TextHead head;
    std::vector<double> epoch_loss;  // mean minibatch loss per epoch
};

struct TextHeadVars {
    Var w1, b1, w2, b2, w_head, b_head;
};

TextHead init_text_head(int d_txt, int n_organs, std::uint64_t seed);

TextHeadVars text_head_leaves(Tape& tape, const TextHead& head, bool requires_grad);

// x is [B, d_txt]. Features are the pre-head activations [B, d_feat];
// logits are [B, n_organs] before the sigmoid.
Var text_head_features(Tape& tape, const TextHeadVars& vars, Var x);
Var text_head_logits(Tape& tape, const TextHeadVars& vars, Var x);

// Mean per-class binary cross-entropy of sigmoid(logits) against soft targets.
Var text_head_loss(Tape& tape, const TextHeadVars& vars, Var x, const Tensor& targets);

// targets is [n_records, n_organs] with entries in [0, 1].
TextHeadTrainResult train_text_head(const std::vector<SymptomRecord>& records,
                                    const Tensor& targets, const TextHeadConfig& cfg);

// Plain forward passes for inference-time use.
std::vector<double> embed_text(const TextHead& head, const std::vector<double>& emb);
std::vector<double> predict_soft(const TextHead& head, const std::vector<double>& emb);

void save_text_head(const std::string& dir, const TextHead& head,
                    const std::string& config_hash);
struct TextHeadFile {
    TextHead head;
    std::string config_hash;
};
TextHeadFile load_text_head(const std::string& dir);

}  // namespace sora
