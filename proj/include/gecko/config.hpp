#pragma once

// Model / run configuration and its JSON form. The same struct feeds the
// library, the CLI and checkpoint headers.

#include <string>

#include <json.hpp>

#include "gecko/common.hpp"
#include "gecko/tsdn.hpp"

namespace gecko {

enum class AttnPattern { chunk, swa, sca };

inline const char* pattern_name(AttnPattern p) {
    switch (p) {
        case AttnPattern::chunk: return "chunk";
        case AttnPattern::swa: return "swa";
        case AttnPattern::sca: return "sca";
    }
    return "?";
}

inline AttnPattern pattern_from_name(const std::string& s) {
    if (s == "chunk") return AttnPattern::chunk;
    if (s == "swa") return AttnPattern::swa;
    if (s == "sca") return AttnPattern::sca;
    throw error("unknown attention pattern '" + s + "' (chunk|swa|sca)");
}

inline NormVariant norm_variant_from_name(const std::string& s) {
    if (s == "tsn") return NormVariant::tsn;
    if (s == "tsdn") return NormVariant::tsdn;
    if (s == "tsdn_literal") return NormVariant::tsdn_literal;
    throw error("unknown norm variant '" + s + "' (tsn|tsdn|tsdn_literal)");
}

struct OptimConfig {
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.05;
    double clip = 1.0;
    size_t warmup = 100;
    double final_lr_ratio = 0.0;  // cosine decays to lr * ratio
};

struct ModelConfig {
    size_t layers = 2;
    size_t dim = 128;
    size_t zdim = 128;
    size_t vdim = 256;
    size_t cema_h = 8;
    size_t chunk = 64;        // attention chunk c; effective context 2c
    size_t scan_chunk = 32;   // CEMA scan / rematerialization chunk
    size_t norm_groups = 16;
    double beta1 = 0.999;     // TSDN mean decay
    double beta2 = 0.9999;    // TSDN variance decay
    double norm_eps = 1e-5;
    size_t vocab = 256;       // byte-level
    uint64_t seed = 1;
    std::string dtype = "f32";

    AttnPattern pattern = AttnPattern::sca;
    size_t swa_window = 128;  // only for pattern == swa
    bool awm = true;
    NormVariant norm_variant = NormVariant::tsdn;
    bool output_gate = true;
    bool tie_embeddings = false;

    // document-boundary reset scope (the mask always resets CEMA state; the
    // rest is configurable and off by default)
    bool reset_tsdn = false;
    bool reset_kv = false;
    bool reset_awm = false;

    size_t train_seq = 256;
    size_t train_batch = 2;
    OptimConfig optim;

    size_t ffn_hidden() const {
        const size_t raw = (8 * dim + 2) / 3;
        return ((raw + 7) / 8) * 8;
    }

    void validate() const {
        GECKO_CHECK(layers >= 1, "config: layers must be >= 1");
        GECKO_CHECK(chunk >= 1, "config: chunk must be >= 1");
        GECKO_CHECK(dim >= 1 && zdim >= 1 && vdim >= 1, "config: dims must be positive");
        GECKO_CHECK(norm_groups >= 1 && dim % norm_groups == 0,
                    "config: dim " << dim << " not divisible by norm_groups " << norm_groups);
        GECKO_CHECK(zdim % 2 == 0, "config: zdim must be even for RoPE, got " << zdim);
        GECKO_CHECK(vocab >= 1 && vocab <= 1u << 20, "config: bad vocab " << vocab);
        GECKO_CHECK(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
                    "config: beta1/beta2 must lie in [0, 1)");
        GECKO_CHECK(dtype == "f32" || dtype == "f64", "config: dtype must be f32 or f64");
        GECKO_CHECK(scan_chunk >= 1, "config: scan_chunk must be >= 1");
        GECKO_CHECK(train_seq % chunk == 0,
                    "config: train_seq " << train_seq << " must be a multiple of chunk " << chunk);
        GECKO_CHECK(train_batch >= 1, "config: train_batch must be >= 1");
    }

    NormConfig norm_config() const {
        NormConfig nc;
        nc.d = dim;
        nc.k = norm_groups;
        nc.beta1 = beta1;
        nc.beta2 = beta2;
        nc.eps = norm_eps;
        nc.variant = norm_variant;
        return nc;
    }
};

inline void to_json(nlohmann::json& j, const OptimConfig& o) {
    j = {{"lr", o.lr},
         {"beta1", o.beta1},
         {"beta2", o.beta2},
         {"eps", o.eps},
         {"weight_decay", o.weight_decay},
         {"clip", o.clip},
         {"warmup", o.warmup},
         {"final_lr_ratio", o.final_lr_ratio}};
}

inline void from_json(const nlohmann::json& j, OptimConfig& o) {
    o.lr = j.value("lr", o.lr);
    o.beta1 = j.value("beta1", o.beta1);
    o.beta2 = j.value("beta2", o.beta2);
    o.eps = j.value("eps", o.eps);
    o.weight_decay = j.value("weight_decay", o.weight_decay);
    o.clip = j.value("clip", o.clip);
    o.warmup = j.value("warmup", o.warmup);
    o.final_lr_ratio = j.value("final_lr_ratio", o.final_lr_ratio);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"layers", c.layers},
         {"dim", c.dim},
         {"zdim", c.zdim},
         {"vdim", c.vdim},
         {"cema_h", c.cema_h},
         {"chunk", c.chunk},
         {"scan_chunk", c.scan_chunk},
         {"norm_groups", c.norm_groups},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"norm_eps", c.norm_eps},
         {"vocab", c.vocab},
         {"seed", c.seed},
         {"dtype", c.dtype},
         {"pattern", pattern_name(c.pattern)},
         {"swa_window", c.swa_window},
         {"awm", c.awm},
         {"norm_variant", norm_variant_name(c.norm_variant)},
         {"output_gate", c.output_gate},
         {"tie_embeddings", c.tie_embeddings},
         {"reset_tsdn", c.reset_tsdn},
         {"reset_kv", c.reset_kv},
         {"reset_awm", c.reset_awm},
         {"train_seq", c.train_seq},
         {"train_batch", c.train_batch},
         {"optim", c.optim}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.layers = j.value("layers", c.layers);
    c.dim = j.value("dim", c.dim);
    c.zdim = j.value("zdim", c.zdim);
    c.vdim = j.value("vdim", c.vdim);
    c.cema_h = j.value("cema_h", c.cema_h);
    c.chunk = j.value("chunk", c.chunk);
    c.scan_chunk = j.value("scan_chunk", c.scan_chunk);
    c.norm_groups = j.value("norm_groups", c.norm_groups);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.norm_eps = j.value("norm_eps", c.norm_eps);
    c.vocab = j.value("vocab", c.vocab);
    c.seed = j.value("seed", c.seed);
    c.dtype = j.value("dtype", c.dtype);
    if (j.contains("pattern")) c.pattern = pattern_from_name(j.at("pattern").get<std::string>());
    c.swa_window = j.value("swa_window", c.swa_window);
    c.awm = j.value("awm", c.awm);
    if (j.contains("norm_variant"))
        c.norm_variant = norm_variant_from_name(j.at("norm_variant").get<std::string>());
    c.output_gate = j.value("output_gate", c.output_gate);
    c.tie_embeddings = j.value("tie_embeddings", c.tie_embeddings);
    c.reset_tsdn = j.value("reset_tsdn", c.reset_tsdn);
    c.reset_kv = j.value("reset_kv", c.reset_kv);
    c.reset_awm = j.value("reset_awm", c.reset_awm);
    c.train_seq = j.value("train_seq", c.train_seq);
    c.train_batch = j.value("train_batch", c.train_batch);
    if (j.contains("optim")) c.optim = j.at("optim").get<OptimConfig>();
}

}  // namespace gecko
