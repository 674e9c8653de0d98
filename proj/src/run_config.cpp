#include "sora/run_config.hpp"

#include "sora/errors.hpp"

#include <cstdio>
#include <fstream>

namespace sora {

void RunConfig::validate() const {
    corpus.validate();
    anchors.validate();
    text_head.validate();
    volumes.validate();
    encoder.validate();
    align.validate();
    if (n_cases < 1) throw ConfigError("run config: n_cases must be >= 1");
    if (!(split_fraction > 0.0 && split_fraction < 1.0)) {
        throw ConfigError("run config: split_fraction must be in (0,1)");
    }
    if (volumes.n_organs != corpus.n_organs) {
        throw ConfigError("run config: volume organ count must match the corpus");
    }
    if (encoder.depth != volumes.depth || encoder.height != volumes.height ||
        encoder.width != volumes.width) {
        throw ConfigError("run config: encoder extents must match the volumes");
    }
    if (out_dir.empty()) throw ConfigError("run config: out_dir must be set");
}

void apply_seed(RunConfig& cfg, std::uint64_t seed) {
    cfg.seed = seed;
    cfg.corpus.seed = seed;
    cfg.anchors.seed = seed;
    cfg.text_head.seed = seed;
    cfg.volumes.seed = seed;
    cfg.align.seed = seed;
}

namespace {

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& dst) {
    if (j.contains(key)) dst = j.at(key).get<T>();
}

void parse_corpus(const nlohmann::json& j, CorpusConfig& c) {
    maybe(j, "n_organs", c.n_organs);
    maybe(j, "n_txt", c.n_txt);
    maybe(j, "d_txt", c.d_txt);
    maybe(j, "noise_sigma", c.noise_sigma);
    maybe(j, "mixture_alpha", c.mixture_alpha);
    maybe(j, "seed", c.seed);
    maybe(j, "correlated_a", c.correlated_a);
    maybe(j, "correlated_b", c.correlated_b);
    maybe(j, "correlated_weight", c.correlated_weight);
}

void parse_anchors(const nlohmann::json& j, AnchorTrainConfig& c) {
    maybe(j, "margin", c.margin);
    maybe(j, "repel_margin", c.repel_margin);
    maybe(j, "repel_weight", c.repel_weight);
    maybe(j, "epochs", c.epochs);
    maybe(j, "batch_size", c.batch_size);
    maybe(j, "learning_rate", c.learning_rate);
    maybe(j, "seed", c.seed);
}

void parse_text_head(const nlohmann::json& j, TextHeadConfig& c) {
    maybe(j, "epochs", c.epochs);
    maybe(j, "batch_size", c.batch_size);
    maybe(j, "learning_rate", c.learning_rate);
    maybe(j, "seed", c.seed);
}

void parse_volumes(const nlohmann::json& j, VolumeConfig& c) {
    maybe(j, "depth", c.depth);
    maybe(j, "height", c.height);
    maybe(j, "width", c.width);
    maybe(j, "noise_sigma", c.noise_sigma);
    maybe(j, "seed", c.seed);
}

void parse_encoder(const nlohmann::json& j, EncoderConfig& c) {
    maybe(j, "d_img", c.d_img);
    maybe(j, "n_blocks_2d", c.n_blocks_2d);
    maybe(j, "n_blocks_3d", c.n_blocks_3d);
    maybe(j, "n_heads", c.n_heads);
    if (j.contains("patch_2d")) {
        c.patch_2d_h = j.at("patch_2d").at(0).get<std::size_t>();
        c.patch_2d_w = j.at("patch_2d").at(1).get<std::size_t>();
    }
    if (j.contains("patch_3d")) {
        c.patch_3d_d = j.at("patch_3d").at(0).get<std::size_t>();
        c.patch_3d_h = j.at("patch_3d").at(1).get<std::size_t>();
        c.patch_3d_w = j.at("patch_3d").at(2).get<std::size_t>();
    }
}

void parse_align(const nlohmann::json& j, AlignTrainConfig& c) {
    maybe(j, "tau", c.tau);
    maybe(j, "epochs", c.epochs);
    maybe(j, "n_txt_batch", c.n_txt_batch);
    maybe(j, "learning_rate", c.learning_rate);
    maybe(j, "seed", c.seed);
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("run config must be a JSON object");
    RunConfig cfg;
    try {
        if (j.contains("seed")) apply_seed(cfg, j.at("seed").get<std::uint64_t>());
        if (j.contains("corpus")) parse_corpus(j.at("corpus"), cfg.corpus);
        if (j.contains("anchors")) parse_anchors(j.at("anchors"), cfg.anchors);
        if (j.contains("text_head")) parse_text_head(j.at("text_head"), cfg.text_head);
        if (j.contains("volumes")) parse_volumes(j.at("volumes"), cfg.volumes);
        if (j.contains("encoder")) parse_encoder(j.at("encoder"), cfg.encoder);
        if (j.contains("align")) parse_align(j.at("align"), cfg.align);
        maybe(j, "n_cases", cfg.n_cases);
        maybe(j, "split_fraction", cfg.split_fraction);
        maybe(j, "out_dir", cfg.out_dir);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("run config: malformed JSON: ") + e.what());
    }
    // Derived fields: the corpus owns the organ count, the volumes own the
    // grid extents.
    cfg.volumes.n_organs = cfg.corpus.n_organs;
    cfg.encoder.depth = cfg.volumes.depth;
    cfg.encoder.height = cfg.volumes.height;
    cfg.encoder.width = cfg.volumes.width;
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("run config: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("run config: " + path + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

nlohmann::json run_config_to_json(const RunConfig& cfg) {
    nlohmann::json j;
    j["seed"] = cfg.seed;
    j["out_dir"] = cfg.out_dir;
    j["n_cases"] = cfg.n_cases;
    j["split_fraction"] = cfg.split_fraction;
    j["corpus"] = {{"n_organs", cfg.corpus.n_organs},
                   {"n_txt", cfg.corpus.n_txt},
                   {"d_txt", cfg.corpus.d_txt},
                   {"noise_sigma", cfg.corpus.noise_sigma},
                   {"mixture_alpha", cfg.corpus.mixture_alpha},
                   {"seed", cfg.corpus.seed},
                   {"correlated_a", cfg.corpus.correlated_a},
                   {"correlated_b", cfg.corpus.correlated_b},
                   {"correlated_weight", cfg.corpus.correlated_weight}};
    j["anchors"] = {{"margin", cfg.anchors.margin},
                    {"repel_margin", cfg.anchors.repel_margin},
                    {"repel_weight", cfg.anchors.repel_weight},
                    {"epochs", cfg.anchors.epochs},
                    {"batch_size", cfg.anchors.batch_size},
                    {"learning_rate", cfg.anchors.learning_rate},
                    {"seed", cfg.anchors.seed}};
    j["text_head"] = {{"epochs", cfg.text_head.epochs},
                      {"batch_size", cfg.text_head.batch_size},
                      {"learning_rate", cfg.text_head.learning_rate},
                      {"seed", cfg.text_head.seed}};
    j["volumes"] = {{"n_organs", cfg.volumes.n_organs},
                    {"depth", cfg.volumes.depth},
                    {"height", cfg.volumes.height},
                    {"width", cfg.volumes.width},
                    {"noise_sigma", cfg.volumes.noise_sigma},
                    {"seed", cfg.volumes.seed}};
    j["encoder"] = {{"d_img", cfg.encoder.d_img},
                    {"n_blocks_2d", cfg.encoder.n_blocks_2d},
                    {"n_blocks_3d", cfg.encoder.n_blocks_3d},
                    {"n_heads", cfg.encoder.n_heads},
                    {"patch_2d", {cfg.encoder.patch_2d_h, cfg.encoder.patch_2d_w}},
                    {"patch_3d",
                     {cfg.encoder.patch_3d_d, cfg.encoder.patch_3d_h, cfg.encoder.patch_3d_w}},
                    {"extents", {cfg.encoder.depth, cfg.encoder.height, cfg.encoder.width}}};
    j["align"] = {{"tau", cfg.align.tau},
                  {"epochs", cfg.align.epochs},
                  {"n_txt_batch", cfg.align.n_txt_batch},
                  {"learning_rate", cfg.align.learning_rate},
                  {"seed", cfg.align.seed}};
    return j;
}

std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ull;
    for (const char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    return h;
}

std::string config_hash(const RunConfig& cfg) {
    nlohmann::json j = run_config_to_json(cfg);
    j.erase("out_dir");
    const std::uint64_t h = fnv1a64(j.dump());
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
    return hex;
}

}  // namespace sora
