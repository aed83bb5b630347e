#pragma once

#include "clicktok/audio.hpp"
#include "clicktok/codec.hpp"
#include "clicktok/matm.hpp"

#include <cstdint>
#include <set>
#include <string>
#include <vector>

namespace clicktok {

// Settings for prompt-conditioned iterative decoding of one input source.
struct prompt_settings {
    int periodic_prompt = 0;   // keep every Nth column; 0 disables
    int onset_mask_width = 0;  // columns kept around each detected onset
    int steps = 12;
    double typical_mass = 1.0;  // locally-typical filtering mass
    double sample_cutoff = 1.0; // nucleus truncation mass
    double temperature = 1.0;
    uint64_t seed = 0;
};

// Built-in per-source presets; loadable/overridable from JSON by name.
std::vector<std::pair<std::string, prompt_settings>> builtin_prompt_presets();
prompt_settings lookup_prompt_preset(const std::string & source);

// Columns to KEEP unmasked: every Nth column plus a window of
// onset_mask_width columns centered on each onset column.
std::set<int64_t> build_prompt_mask(int64_t cols, const std::vector<int64_t> & onset_cols,
                                    const prompt_settings & s);

// Masks every column not in the keep set (all K rows).
token_grid apply_prompt_mask(const token_grid & g, const std::set<int64_t> & keep);

// Locally-typical filtering to mass tau, then nucleus truncation to mass p,
// then renormalization. Ties resolve by index.
std::vector<double> filter_logits(const std::vector<double> & probs, double typical_mass,
                                  double sample_cutoff);

struct decode_result {
    token_grid grid;
    std::vector<double> confidences; // confidence of each newly committed cell
};

// One parallel-decode step: sample candidates for every masked cell, keep
// the most confident ones per the cosine schedule, re-mask the rest.
// initial_masked is the MASK count at the start of decoding.
decode_result decode_step(const matm_params<float> & p, const lora_adapter<float> * lora,
                          const token_grid & g, const prompt_settings & s, int step_index,
                          int64_t initial_masked);

// Runs decode_step s.steps times (early exit once nothing is masked).
token_grid iterative_decode(const matm_params<float> & p, const lora_adapter<float> * lora,
                            const token_grid & g, const prompt_settings & s);

// resample -> normalize -> tokenize -> detect onsets -> prompt mask ->
// iterative decode -> detokenize.
waveform translate(const codec & c, const matm_params<float> & p,
                   const lora_adapter<float> * lora, const waveform & w,
                   const prompt_settings & s);

} // namespace clicktok
