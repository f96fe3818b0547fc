#pragma once

#include "matte/toy_backend.hpp"

namespace matte::fixtures {

// A reference the toy model can represent exactly: "a photo of cat" in the coarse layers and
// "a photo" everywhere else, rendered noise-free.
inline Image planted_reference(const ToyBackend& backend, const std::string& object = "cat") {
    const ConditioningGrid grid =
        joint_grid(canonical_layer_partition(), canonical_stage_partition(), [&](const LayerSubset& s, const Stage&) {
            return CellPrompt(s.id == "coarse" ? "a photo of " + object : "a photo");
        });
    return backend.render(grid);
}

// Encodes a cell as the backend would have seen it with `embeddings` installed, then restores
// the current placeholder values.
inline Conditioning encode_with(ToyBackend& backend, const std::map<std::string, Vec>& embeddings, const CellPrompt& cell) {
    std::map<std::string, Vec> now;
    for (const auto& [tok, v] : embeddings) {
        now[tok] = backend.token_embedding(tok);
        backend.set_placeholder(tok, v);
    }
    Conditioning c = backend.encode_cell(cell);
    for (const auto& [tok, v] : now) backend.set_placeholder(tok, v);
    return c;
}

}  // namespace matte::fixtures
