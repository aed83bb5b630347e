#pragma once

#include "clicktok/audio.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace clicktok {

// A click is a short burst of internal pulses. Pulses share one noise-burst
// template whose peak is pinned to its first sample, so pulse k peaks exactly
// at k * round(ipi*sr) with amplitude decay^k.
struct click_params {
    int num_pulses = 3;
    double ipi_s = 0.0035;        // inter-pulse interval, seconds
    double decay = 0.7;           // per-pulse amplitude ratio, (0,1]
    double pulse_width_s = 0.001; // seconds
    double lowpass_hz = 0.0;      // 0 disables the lowpass
};

struct coda_spec {
    std::vector<double> icis_s; // inter-click intervals; clicks = icis+1
    click_params click;
    std::string label; // rhythm-type name
};

struct beep_spec {
    int64_t n_clicks = 0;
    double duration_s = 0.0;
    uint64_t seed = 0;
};

struct manifest_entry {
    std::string path; // relative to the manifest file
    std::map<std::string, std::string> labels;
    std::string split; // "train" | "test"
};

struct dataset_manifest {
    int sample_rate = 0;
    std::vector<manifest_entry> entries;
};

constexpr uint64_t default_click_seed = 0x5EEDC11C;

waveform synth_click(const click_params & p, int sr, uint64_t seed = default_click_seed);

// Returns the waveform plus the ground-truth onset sample of every click.
std::pair<waveform, std::vector<int64_t>> synth_coda(const coda_spec & c, int sr,
                                                     uint64_t seed = default_click_seed);

waveform synth_echolocation(int n, double ici_s, const click_params & p, int sr,
                            uint64_t seed = default_click_seed);

// Sparse unit impulses at seeded random positions; everything else is zero.
waveform synth_beeps(const beep_spec & b, int sr = 44100);

// Synthetic corpus with labels for the four probe tasks. "unit" classes vary
// click timbre, "vowel" classes vary the lowpass band, and detection
// negatives are noise-only clips (labelled "none" for the other tasks).
struct corpus_config {
    int sample_rate = 16000;
    uint64_t seed = 0;
    double clip_duration_s = 2.0;
    std::vector<std::pair<std::string, std::vector<double>>> rhythm_classes; // name -> ICIs
    std::vector<std::pair<std::string, click_params>> unit_classes;
    std::vector<std::pair<std::string, double>> vowel_classes; // name -> lowpass_hz
    int count_per_rhythm = 40;
    int noise_clips = 0;
    double click_amp = 0.8;
    double noise_level = 0.01; // uniform noise floor, keeps peak <= 1 by construction
    double ici_jitter = 0.05;  // relative
    double amp_jitter = 0.1;   // relative
    double test_fraction = 0.2;
};

// Fills in the five standard rhythm patterns, three click timbres and two
// lowpass bands used across the tools.
corpus_config default_corpus_config();

dataset_manifest build_corpus(const corpus_config & cfg, const std::string & out_dir);

void save_manifest(const dataset_manifest & m, const std::string & path);
dataset_manifest load_manifest(const std::string & path);

// Directory the entries' relative paths resolve against.
std::string manifest_dir(const std::string & manifest_path);

} // namespace clicktok
