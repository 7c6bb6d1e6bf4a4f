#pragma once

// Finite-difference check of a whole encoder-decoder on a two-sentence batch.

#include "thm/gradcheck.hpp"
#include "thm/model.hpp"

namespace thm {

/// Builds a model from `config` and `seed`, draws two random sentence pairs
/// and checks the gradient of the training loss (dropout on, fixed stream,
/// both corrupted source copies for THM).
GradCheckReport model_gradcheck(const ModelConfig& config, std::uint64_t seed,
                                const GradCheckOptions& options);

}  // namespace thm
