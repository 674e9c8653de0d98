#pragma once

#include "sora/alignment.hpp"
#include "sora/anchors.hpp"
#include "sora/corpus.hpp"
#include "sora/encoders.hpp"
#include "sora/text_head.hpp"
#include "sora/volumes.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>

namespace sora {

// Everything one pipeline run needs. Organ count and volume extents are
// single-sourced: corpus.n_organs drives volumes.n_organs, and the volume
// extents drive the encoder extents.
struct RunConfig {
    CorpusConfig corpus;
    AnchorTrainConfig anchors;
    TextHeadConfig text_head;
    VolumeConfig volumes;
    int n_cases = 3;
    EncoderConfig encoder;
    AlignTrainConfig align;
    double split_fraction = 0.8;
    std::uint64_t seed = 0;
    std::string out_dir = "artifacts";

    void validate() const;
};

// Sets the run seed and pushes it into every sub-config seed.
void apply_seed(RunConfig& cfg, std::uint64_t seed);

// Partial JSON: absent fields keep their defaults. A top-level "seed"
// propagates to sub-configs first; explicit sub-config seeds then win.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

// Canonical full dump; derived fields included.
nlohmann::json run_config_to_json(const RunConfig& cfg);

// FNV-1a over the canonical dump of everything except out_dir, as 16 hex
// digits. Identical semantics give identical hashes regardless of where the
// artifacts land.
std::string config_hash(const RunConfig& cfg);

std::uint64_t fnv1a64(const std::string& bytes);

}  // namespace sora
