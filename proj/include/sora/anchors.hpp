#pragma once

#include "sora/corpus.hpp"
#include "sora/tape.hpp"
#include "sora/tensor.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace sora {

struct OrganAnchorPair {
    int organ_id = 0;
    std::vector<double> v_plus;
    std::vector<double> v_minus;
};

struct AnchorTrainConfig {
    double margin = 0.8;
    // Secondary hinge on other-organ records: their similarity to the
    // positive anchor is pushed under repel_margin with weight repel_weight.
    // The threshold sits above 1 - margin because mixed records legitimately
    // share components with every organ; the push exists to keep the positive
    // anchor centered on its organ's cluster instead of freezing at the first
    // direction that satisfies the margin. repel_weight = 0 disables it.
    double repel_margin = 0.4;
    double repel_weight = 0.8;
    int epochs = 500;
    int batch_size = 32;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;

    void validate() const;
};

struct AnchorTrainResult {
    std::vector<OrganAnchorPair> anchors;
    std::vector<double> epoch_loss;  // mean minibatch loss per epoch
};

// Cosine similarities of emb against the positive and negative anchor.
std::pair<double, double> anchor_similarities(const OrganAnchorPair& pair,
                                              const std::vector<double>& emb);

// max(0, m - s_plus) + max(0, s_minus - (1 - m)). Zero exactly when the
// positive similarity clears m and the negative similarity stays under 1 - m.
double margin_fn(double s_plus, double s_minus, double m);

// Per organ i: the margin function averaged over organ-i records, plus a
// term averaged over every other organ's records with two hinges: one pushes
// their negative-anchor similarity under 1 - m, the other (scaled by
// repel_weight) pushes their positive-anchor similarity under repel_margin.
// Organs with no positives in the batch contribute only the negative-set
// term, and vice versa. Summed over organs.
double anchor_loss(const std::vector<OrganAnchorPair>& anchors,
                   const std::vector<SymptomRecord>& batch, double m,
                   double repel_margin = 0.4, double repel_weight = 0.8);

// Tape form of the same loss, used by training and the gradient checks.
// batch is [B, d]; v_plus/v_minus hold one rank-1 leaf per organ.
Var anchor_loss_tape(Tape& tape, const std::vector<Var>& v_plus,
                     const std::vector<Var>& v_minus, const Tensor& batch,
                     const std::vector<int>& organ_ids, double m,
                     double repel_margin = 0.4, double repel_weight = 0.8);

AnchorTrainResult train_anchors(const std::vector<SymptomRecord>& corpus,
                                const AnchorTrainConfig& cfg);

// Entry i is (cosine_sim(v_i_plus, emb) + 1) / 2, each in [0, 1].
std::vector<double> soft_label(const std::vector<OrganAnchorPair>& anchors,
                               const std::vector<double>& emb);

// Rows follow the record order; columns follow anchor order. [n, N].
Tensor soft_label_matrix(const std::vector<OrganAnchorPair>& anchors,
                         const std::vector<SymptomRecord>& records);

void write_anchors_json(const std::string& path, const std::vector<OrganAnchorPair>& anchors,
                        const std::string& config_hash);
struct AnchorFile {
    std::vector<OrganAnchorPair> anchors;
    std::string config_hash;
};
AnchorFile read_anchors_json(const std::string& path);

void write_soft_labels_csv(const std::string& path,
                           const std::vector<SymptomRecord>& records,
                           const Tensor& labels);

}  // namespace sora
