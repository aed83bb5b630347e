#pragma once

#include "clicktok/audio.hpp"
#include "clicktok/codec.hpp"
#include "clicktok/matm.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace clicktok {

// A deterministic waveform -> fixed-length vector map.
struct embedding_model {
    std::string name;
    int dim = 0;
    std::function<Eigen::VectorXd(const waveform &)> embed;
};

struct gaussian_stats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
    int64_t n = 0;
};

// Sample mean and (by default unbiased) covariance, symmetrized.
gaussian_stats fit_gaussian(const std::vector<Eigen::VectorXd> & vectors, bool biased = false);

// ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2}); the matrix square root
// goes through a symmetric eigendecomposition of Sa^{1/2} Sb Sa^{1/2}.
// Eigenvalues below -1e-6 (relative) raise numeric_error; small negatives
// clamp to zero.
double frechet_distance(const gaussian_stats & a, const gaussian_stats & b);

// Divides every entry by the max. All-zero input sets `degenerate` and is
// returned unchanged.
std::map<std::string, double> normalize_fad(const std::map<std::string, double> & raw,
                                            bool & degenerate);

struct fad_entry {
    std::string set_a, set_b;
    double raw = 0.0;
    double normalized = 0.0;
};

struct fad_report {
    std::vector<fad_entry> entries;
    double baseline = 0.21; // documented natural-vs-natural reference level
    bool degenerate = false;
};

// Pairwise distances between named embedding sets (every unordered pair,
// each set also against itself when self_pairs is set).
fad_report make_fad_report(const std::vector<std::pair<std::string, std::vector<Eigen::VectorXd>>> & sets,
                           bool self_pairs = false, bool biased_cov = false);

// Appendix-style embedding calibration: d1 = FAD(originals, denoised),
// d2 = FAD(originals, noise components), ratio = d2/d1.
struct calibration_row {
    std::string model;
    double d1 = 0.0, d2 = 0.0, ratio = 0.0;
    bool infinite = false; // d1 == 0
};

std::vector<calibration_row> calibrate_embeddings(const std::vector<waveform> & originals,
                                                  const std::vector<waveform> & denoised,
                                                  const std::vector<embedding_model> & models);

// Per-frequency-bin normalized reconstruction error, averaged over fixed
// length chunks of every recording. Odd chunk lengths are zero-padded by one
// sample for the FFT, so the vector length is ceil(C/2)+1.
struct recon_error {
    std::vector<double> error;   // per bin; 0 where no chunk had energy
    std::vector<int64_t> counts; // energetic chunks per bin
    int chunk_len = 0;
    int sample_rate = 0;
};

using reconstruct_fn = std::function<waveform(const waveform &)>;

recon_error recon_error_study(const reconstruct_fn & reconstruct,
                              const std::vector<waveform> & corpus, double chunk_ms);
recon_error recon_error_study(const codec & c, const std::vector<waveform> & corpus,
                              double chunk_ms);

// Built-in embeddings: model-pooled, token-histogram, random-projection
// log-mel baseline, onset statistics, and a plain energy profile.
struct embedding_context {
    const codec * codec_model = nullptr;
    const matm_params<float> * matm_model = nullptr;
    const lora_adapter<float> * adapter = nullptr;
    int matm_layer = -1; // -1 = final layer
    uint64_t seed = 0;
};

embedding_model matm_embedding(const embedding_context & ctx);
embedding_model tokenizer_embedding(const embedding_context & ctx);
embedding_model random_projection_embedding(uint64_t seed, int dim = 128);
embedding_model onset_feature_embedding();
embedding_model energy_embedding();

// Everything constructible from the context, model-backed ones first.
std::vector<embedding_model> builtin_embeddings(const embedding_context & ctx);

// Two-layer probe (hidden ReLU + linear head) on frozen embeddings.
struct probe_config {
    int hidden = 128;
    double lr = 1e-4;
    int batch = 32;
    int epochs = 10;
    double split = 0.8; // stratified train fraction
    std::vector<uint64_t> seeds = {1, 2, 3};
    bool select_on_test = false; // default: epoch selection on a validation split
};

struct probe_result {
    std::vector<double> accuracy_per_seed;
    double mean = 0.0;
    double stderr_ = 0.0;
    double majority_baseline = 0.0;
};

probe_result train_probe(const std::vector<Eigen::VectorXd> & embeddings,
                         const std::vector<std::string> & labels, const probe_config & pc);

// Fleiss's kappa over an items x categories count matrix with constant row
// sums (raters per item).
double fleiss_kappa(const std::vector<std::vector<int64_t>> & counts);

} // namespace clicktok
