#pragma once

#include <cstddef>
#include <string>

namespace peftlab {

enum class Architecture { encoder_decoder, encoder_only };

std::string to_string(Architecture a);
Architecture parse_architecture(const std::string& s);

/// Transformer hyperparameters. `layers` counts layers per stack: an
/// encoder-decoder model has `layers` encoder and `layers` decoder blocks.
struct ModelConfig {
    Architecture arch = Architecture::encoder_decoder;
    std::size_t layers = 2;
    std::size_t d_model = 32;
    std::size_t heads = 4;
    std::size_t d_ff = 128;
    std::size_t vocab = 32;
    std::size_t num_classes = 2;  // encoder-only classification head
    // 0 selects sinusoidal positions; otherwise a frozen learned table of
    // this many rows per stack.
    std::size_t learned_positions = 0;
    bool tie_embeddings = false;
    double ln_eps = 1e-5;

    std::size_t head_dim() const { return d_model / heads; }
    /// N_attn: attention sublayers per counted layer (encoder + decoder layer pair).
    std::size_t attn_sublayers_per_layer() const { return arch == Architecture::encoder_decoder ? 3 : 1; }
    /// N_ffn
    std::size_t ffn_sublayers_per_layer() const { return arch == Architecture::encoder_decoder ? 2 : 1; }

    void validate() const;

    /// L=2, d=32, N_h=4, d_m=128, vocab=32.
    static ModelConfig desk();
    /// BART-large dimensions (d=1024, d_m=4096, 12+12 layers, vocab 50265,
    /// 1024 learned positions, tied embeddings).
    static ModelConfig bart_large();
    /// RoBERTa-base dimensions (encoder-only, d=768, 12 layers).
    static ModelConfig roberta_base();
};

}  // namespace peftlab
