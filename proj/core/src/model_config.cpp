#include "peftlab/model_config.hpp"

#include "peftlab/tensor.hpp"

namespace peftlab {

std::string to_string(Architecture a) {
    return a == Architecture::encoder_decoder ? "encoder_decoder" : "encoder_only";
}

Architecture parse_architecture(const std::string& s) {
    if (s == "encoder_decoder") return Architecture::encoder_decoder;
    if (s == "encoder_only") return Architecture::encoder_only;
    throw ConfigError("unknown architecture '" + s + "'");
}

void ModelConfig::validate() const {
    if (layers == 0 || d_model == 0 || heads == 0 || d_ff == 0 || vocab == 0) {
        throw ConfigError("model dimensions must be positive");
    }
    if (d_model % heads != 0) {
        throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by " + std::to_string(heads) +
                          " heads");
    }
    if (arch == Architecture::encoder_only && num_classes == 0) throw ConfigError("num_classes must be positive");
    if (!(ln_eps > 0.0)) throw ConfigError("ln_eps must be positive");
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::bart_large() {
    ModelConfig c;
    c.layers = 12;
    c.d_model = 1024;
    c.heads = 16;
    c.d_ff = 4096;
    c.vocab = 50265;
    c.learned_positions = 1024;
    c.tie_embeddings = true;
    return c;
}

ModelConfig ModelConfig::roberta_base() {
    ModelConfig c;
    c.arch = Architecture::encoder_only;
    c.layers = 12;
    c.d_model = 768;
    c.heads = 12;
    c.d_ff = 3072;
    c.vocab = 50265;
    c.learned_positions = 514;
    c.tie_embeddings = true;
    return c;
}

}  // namespace peftlab
