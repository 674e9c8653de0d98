#include "sora/corpus.hpp"

#include "sora/errors.hpp"
#include "sora/kernels.hpp"
#include "sora/rng.hpp"
#include "sora/stats.hpp"
#include "sora/tensor_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace sora {

void CorpusConfig::validate() const {
    if (n_organs < 2) throw ConfigError("corpus: n_organs must be >= 2");
    if (n_txt < 1) throw ConfigError("corpus: n_txt must be >= 1");
    if (d_txt < 2) throw ConfigError("corpus: d_txt must be >= 2");
    if (!(noise_sigma >= 0.0)) throw ConfigError("corpus: noise_sigma must be >= 0");
    if (!(mixture_alpha >= 0.0 && mixture_alpha <= 1.0)) {
        throw ConfigError("corpus: mixture_alpha must be in [0, 1]");
    }
    if (d_txt < n_organs) {
        throw ConfigError("corpus: d_txt must be >= n_organs to fit orthonormal organ prototypes");
    }
    const bool a_set = correlated_a >= 0, b_set = correlated_b >= 0;
    if (a_set != b_set) throw ConfigError("corpus: correlated pair needs both organ ids");
    if (a_set) {
        if (correlated_a >= n_organs || correlated_b >= n_organs) {
            throw ConfigError("corpus: correlated organ id out of range");
        }
        if (correlated_a == correlated_b) {
            throw ConfigError("corpus: correlated pair must name two distinct organs");
        }
        if (!(correlated_weight >= 0.0 && correlated_weight <= 1.0)) {
            throw ConfigError("corpus: correlated_weight must be in [0, 1]");
        }
    }
}

namespace {

bool is_sentence_end(const std::string& s, std::size_t i) {
    const char c = s[i];
    if (c != '.' && c != '!' && c != '?') return false;
    return i + 1 >= s.size() || std::isspace(static_cast<unsigned char>(s[i + 1])) != 0;
}

std::string trimmed(const std::string& s, std::size_t begin, std::size_t end) {
    while (begin < end && std::isspace(static_cast<unsigned char>(s[begin]))) ++begin;
    while (end > begin && std::isspace(static_cast<unsigned char>(s[end - 1]))) --end;
    return s.substr(begin, end - begin);
}

std::vector<std::string> split_sentences(const std::string& raw) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (is_sentence_end(raw, i)) {
            std::string s = trimmed(raw, start, i + 1);
            if (!s.empty()) out.push_back(std::move(s));
            start = i + 1;
        }
    }
    std::string tail = trimmed(raw, start, raw.size());
    if (!tail.empty()) out.push_back(std::move(tail));
    return out;
}

}  // namespace

std::vector<std::string> chunk_text(const std::string& raw, int min_sentences,
                                    int max_sentences) {
    if (min_sentences < 1 || max_sentences < min_sentences) {
        throw ConfigError("chunk_text: need 1 <= min_sentences <= max_sentences");
    }
    const std::vector<std::string> sentences = split_sentences(raw);
    std::vector<std::string> chunks;
    for (std::size_t i = 0; i < sentences.size(); i += static_cast<std::size_t>(max_sentences)) {
        const std::size_t end =
            std::min(sentences.size(), i + static_cast<std::size_t>(max_sentences));
        std::string chunk = sentences[i];
        for (std::size_t j = i + 1; j < end; ++j) {
            chunk += ' ';
            chunk += sentences[j];
        }
        chunks.push_back(std::move(chunk));
    }
    return chunks;
}

namespace {

Tensor orthonormal_prototypes(int n, int d, Rng& rng) {
    Tensor proto({static_cast<std::size_t>(n), static_cast<std::size_t>(d)});
    for (int i = 0; i < n; ++i) {
        double* row = proto.data() + static_cast<std::size_t>(i) * d;
        while (true) {
            for (int k = 0; k < d; ++k) row[k] = rng.normal();
            for (int p = 0; p < i; ++p) {
                const double* prev = proto.data() + static_cast<std::size_t>(p) * d;
                const double c = kernels::dot(row, prev, static_cast<std::size_t>(d));
                kernels::axpy(row, prev, -c, static_cast<std::size_t>(d));
            }
            const double nrm = l2_norm(row, static_cast<std::size_t>(d));
            if (nrm >= 1e-8) {
                kernels::scale(row, row, 1.0 / nrm, static_cast<std::size_t>(d));
                break;
            }
        }
    }
    return proto;
}

}  // namespace

SyntheticCorpus generate_synthetic_corpus(const CorpusConfig& cfg) {
    cfg.validate();
    const int n = cfg.n_organs;
    const std::size_t d = static_cast<std::size_t>(cfg.d_txt);

    Rng proto_rng(cfg.seed, 0);
    SyntheticCorpus corpus;
    corpus.prototypes = orthonormal_prototypes(n, cfg.d_txt, proto_rng);

    corpus.records.reserve(static_cast<std::size_t>(n) * cfg.n_txt);
    for (int i = 0; i < n; ++i) {
        const int partner = cfg.correlated_a == i   ? cfg.correlated_b
                            : cfg.correlated_b == i ? cfg.correlated_a
                                                    : -1;
        for (int j = 0; j < cfg.n_txt; ++j) {
            // One stream per record keeps draws independent of loop structure.
            Rng rng(cfg.seed, 1 + static_cast<std::uint64_t>(i) * cfg.n_txt + j);
            std::vector<double> w(static_cast<std::size_t>(n), 0.0);
            w[static_cast<std::size_t>(i)] = 1.0;
            for (int k = 0; k < n; ++k) {
                if (k != i) w[static_cast<std::size_t>(k)] = rng.uniform(0.0, cfg.mixture_alpha);
            }
            if (partner >= 0) {
                const double hi = std::min(cfg.correlated_weight, 0.99);
                const double lo = std::max(0.0, cfg.correlated_weight - 0.2);
                w[static_cast<std::size_t>(partner)] = rng.uniform(lo, hi);
            }

            std::vector<double> emb(d, 0.0);
            for (int k = 0; k < n; ++k) {
                const double* proto = corpus.prototypes.data() + static_cast<std::size_t>(k) * d;
                kernels::axpy(emb.data(), proto, w[static_cast<std::size_t>(k)], d);
            }
            if (cfg.noise_sigma > 0.0) {
                for (std::size_t k = 0; k < d; ++k) emb[k] += rng.normal(0.0, cfg.noise_sigma);
            }
            normalize_in_place(emb);

            const double wmax = *std::max_element(w.begin(), w.end());
            for (double& v : w) v /= wmax;

            SymptomRecord rec;
            rec.id = "o" + std::to_string(i) + "_t" + std::to_string(j);
            rec.organ_id = i;
            rec.embedding = std::move(emb);
            rec.planted_weights = std::move(w);
            corpus.records.push_back(std::move(rec));
        }
    }
    return corpus;
}

std::pair<std::vector<SymptomRecord>, std::vector<SymptomRecord>> split_corpus(
    const std::vector<SymptomRecord>& records, const SplitSpec& spec) {
    if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) {
        throw ConfigError("split: train_fraction must be in (0, 1)");
    }
    std::map<int, std::vector<std::size_t>> by_organ;
    for (std::size_t idx = 0; idx < records.size(); ++idx) {
        if (records[idx].organ_id < 0) throw InputError("split: negative organ_id");
        by_organ[records[idx].organ_id].push_back(idx);
    }
    if (by_organ.empty()) throw InputError("split: empty corpus");

    std::vector<char> in_train(records.size(), 0);
    for (auto& [organ, idxs] : by_organ) {
        if (idxs.size() < 2) {
            throw InputError("split: organ " + std::to_string(organ) +
                             " has fewer than 2 records");
        }
        Rng rng(spec.seed, static_cast<std::uint64_t>(organ) + 1);
        std::vector<std::size_t> shuffled = idxs;
        rng.shuffle(shuffled);
        const std::size_t k = static_cast<std::size_t>(
            std::floor(spec.train_fraction * static_cast<double>(idxs.size())));
        for (std::size_t p = 0; p < k; ++p) in_train[shuffled[p]] = 1;
    }

    std::pair<std::vector<SymptomRecord>, std::vector<SymptomRecord>> out;
    for (std::size_t idx = 0; idx < records.size(); ++idx) {
        (in_train[idx] ? out.first : out.second).push_back(records[idx]);
    }
    return out;
}

void write_corpus_jsonl(const std::string& path, const std::vector<SymptomRecord>& records) {
    std::string body;
    for (const auto& rec : records) {
        for (double v : rec.embedding) {
            if (!std::isfinite(v)) throw NumericError("corpus write: non-finite embedding");
        }
        nlohmann::json line;
        line["id"] = rec.id;
        line["organ_id"] = rec.organ_id;
        line["text"] = rec.text;
        line["embedding"] = rec.embedding;
        if (rec.planted_weights) {
            line["planted_weights"] = *rec.planted_weights;
        } else {
            line["planted_weights"] = nullptr;
        }
        body += line.dump();
        body += '\n';
    }
    write_file_atomic(path, body);
}

std::vector<SymptomRecord> read_corpus_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("corpus read: cannot open " + path);
    std::vector<SymptomRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
            SymptomRecord rec;
            rec.id = j.at("id").get<std::string>();
            rec.organ_id = j.at("organ_id").get<int>();
            rec.text = j.at("text").get<std::string>();
            rec.embedding = j.at("embedding").get<std::vector<double>>();
            const auto& pw = j.at("planted_weights");
            if (!pw.is_null()) rec.planted_weights = pw.get<std::vector<double>>();
            records.push_back(std::move(rec));
        } catch (const nlohmann::json::exception& e) {
            throw IoError("corpus read: " + path + " line " + std::to_string(line_no) + ": " +
                          e.what());
        }
    }

    for (const auto& rec : records) {
        if (rec.organ_id < 0) throw InputError("corpus read: negative organ_id for " + rec.id);
        if (rec.embedding.size() != records.front().embedding.size()) {
            throw InputError("corpus read: inconsistent embedding dimension at " + rec.id);
        }
        double sq = 0.0;
        for (double v : rec.embedding) {
            if (!std::isfinite(v)) throw InputError("corpus read: non-finite embedding at " + rec.id);
            sq += v * v;
        }
        if (!(std::sqrt(sq) >= 1e-9)) {
            throw InputError("corpus read: near-zero embedding at " + rec.id);
        }
        if (rec.planted_weights &&
            rec.organ_id >= static_cast<int>(rec.planted_weights->size())) {
            throw InputError("corpus read: organ_id outside planted_weights at " + rec.id);
        }
    }
    return records;
}

int corpus_n_organs(const std::vector<SymptomRecord>& records) {
    if (records.empty()) throw InputError("corpus: empty record list");
    int n = 0;
    for (const auto& rec : records) {
        if (rec.organ_id < 0) throw InputError("corpus: negative organ_id");
        n = std::max(n, rec.organ_id + 1);
    }
    return n;
}

std::size_t corpus_dim(const std::vector<SymptomRecord>& records) {
    if (records.empty()) throw InputError("corpus: empty record list");
    const std::size_t d = records.front().embedding.size();
    for (const auto& rec : records) {
        if (rec.embedding.size() != d) {
            throw DimensionError("corpus: inconsistent embedding dimension");
        }
    }
    return d;
}

}  // namespace sora
