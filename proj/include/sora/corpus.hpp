#pragma once

#include "sora/tensor.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace sora {

struct SymptomRecord {
    std::string id;
    int organ_id = 0;
    std::string text;
    std::vector<double> embedding;
    // Ground-truth organ association strengths, max-normalized so the entry at
    // organ_id is 1. Present only for synthetic records.
    std::optional<std::vector<double>> planted_weights;
};

struct CorpusConfig {
    int n_organs = 7;
    int n_txt = 200;
    int d_txt = 64;
    double noise_sigma = 0.05;
    double mixture_alpha = 0.4;
    std::uint64_t seed = 0;
    // Optional deliberately correlated organ pair: records of either partner
    // carry a strong planted weight on the other. Disabled when either is -1.
    int correlated_a = -1;
    int correlated_b = -1;
    double correlated_weight = 0.8;

    void validate() const;
    bool has_correlated_pair() const { return correlated_a >= 0 && correlated_b >= 0; }
};

struct SyntheticCorpus {
    std::vector<SymptomRecord> records;
    Tensor prototypes;  // n_organs x d_txt, orthonormal rows
};

struct SplitSpec {
    double train_fraction = 0.8;
    std::uint64_t seed = 0;
};

// Greedy left-to-right grouping of sentences into chunks of max_sentences; the
// final chunk keeps whatever remains. Sentences end at '.', '!' or '?' only
// when followed by whitespace or end of input, so decimals stay intact.
std::vector<std::string> chunk_text(const std::string& raw, int min_sentences = 2,
                                    int max_sentences = 3);

SyntheticCorpus generate_synthetic_corpus(const CorpusConfig& cfg);

// Stratified split: per organ, floor(train_fraction * n) records go to train.
// Both halves preserve the input record order.
std::pair<std::vector<SymptomRecord>, std::vector<SymptomRecord>> split_corpus(
    const std::vector<SymptomRecord>& records, const SplitSpec& spec);

// JSON lines, one record per line: id, organ_id, text, embedding,
// planted_weights (null when absent).
void write_corpus_jsonl(const std::string& path, const std::vector<SymptomRecord>& records);
std::vector<SymptomRecord> read_corpus_jsonl(const std::string& path);

int corpus_n_organs(const std::vector<SymptomRecord>& records);
std::size_t corpus_dim(const std::vector<SymptomRecord>& records);

}  // namespace sora
