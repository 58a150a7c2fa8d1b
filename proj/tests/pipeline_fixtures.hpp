#pragma once

#include "surgimap/inference.hpp"
#include "surgimap/model.hpp"
#include "surgimap/taxonomy.hpp"
#include "surgimap/tokenizer.hpp"

#include <memory>

namespace surgimap::testing {

// Untrained model over the builtin taxonomy; enough to exercise decoding paths.
struct Pipeline {
    Taxonomy taxonomy = Taxonomy::builtin();
    Vocabulary vocab = build_vocab(taxonomy);
    Model model;
    std::unique_ptr<Predictor> predictor;

    explicit Pipeline(int feature_dim = 16, int dim = 16, std::uint64_t seed = 11) {
        ModelConfig c;
        c.layers = 1;
        c.heads = 2;
        c.dim = dim;
        c.instruction_slots = 6;
        c.feature_dim = feature_dim;
        c.vocab_size = static_cast<int>(vocab.size());
        c.output_size = static_cast<int>(vocab.annotation_size());
        c.max_components = max_generated_length(taxonomy);
        model = Model(c, seed, 0.5);
        predictor = std::make_unique<Predictor>(model, vocab, taxonomy);
    }
};

} // namespace surgimap::testing
