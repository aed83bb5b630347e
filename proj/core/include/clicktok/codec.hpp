#pragma once

#include "clicktok/audio.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace clicktok {

// Sentinel for masked grid entries; valid tokens are [0, vocab).
constexpr int32_t mask_token = -1;

// K codebooks by L time columns of token indices. Row-major, k*cols + t.
struct token_grid {
    int codebooks = 0;
    int64_t cols = 0;
    std::vector<int32_t> tokens;
    int sample_rate = 0;
    int hop = 0;

    int32_t & at(int k, int64_t t) { return tokens[(int64_t) k * cols + t]; }
    int32_t at(int k, int64_t t) const { return tokens[(int64_t) k * cols + t]; }

    int64_t mask_count() const;
    bool has_mask() const { return mask_count() > 0; }
};

token_grid make_grid(int codebooks, int64_t cols, int sample_rate = 0, int hop = 0);

struct codec_config {
    int codebooks = 14;  // K
    int vocab = 1024;    // |Sigma|
    int feature_dim = 96;
    int frame_len = 0;   // 0 -> same as hop (non-overlapping frames)
    int hop = 0;         // 0 -> round(2*sample_rate/120), i.e. 120 columns per 2 s
    int epochs = 4;
    int sample_rate = 16000;
    uint64_t seed = 0;

    int resolved_hop() const;
    int resolved_frame_len() const;
};

// Linear analysis/synthesis maps between frames and d-dim features
// (whitening PCA and its pseudo-inverse when trained).
struct frame_transform {
    int frame_len = 0;
    int hop = 0;
    int sample_rate = 0;
    Eigen::VectorXd mean;      // frame_len
    Eigen::MatrixXd analysis;  // d x frame_len
    Eigen::MatrixXd synthesis; // frame_len x d
};

// Residual codebook stack. Index 0 of every book is a fixed zero vector so
// that quantizing can never increase the residual norm.
struct codebook_set {
    int codebooks = 0;
    int vocab = 0;
    int dim = 0;
    std::vector<Eigen::MatrixXd> tables; // K of (vocab x dim)
};

struct codec {
    frame_transform transform;
    codebook_set books;
    codec_config config;
};

// Untrained codec with an orthonormal DCT analysis basis and small random
// codebooks. Correct geometry, no fitting; mostly useful for tests.
codec make_codec(const codec_config & cfg);

// Whitening PCA over corpus frames, then stage-by-stage residual k-means
// with EMA updates and dead-code reseeding. Per stage the best epoch
// snapshot (by mean quantization error) is kept.
codec train_codec(const std::vector<waveform> & corpus, const codec_config & cfg);

// Per-stage training error curves of the last train_codec call, one vector
// per codebook (running-best, non-increasing).
struct codec_train_report {
    std::vector<std::vector<double>> stage_errors;
};
codec train_codec(const std::vector<waveform> & corpus, const codec_config & cfg,
                  codec_train_report & report);

token_grid tokenize(const codec & c, const waveform & w);
waveform detokenize(const codec & c, const token_grid & g);

// Stage k quantizes the residual left by stages < k; nearest neighbor in
// Euclidean distance, ties broken by lowest index.
std::pair<std::vector<int32_t>, Eigen::VectorXd> residual_quantize(const Eigen::VectorXd & feature,
                                                                   const codebook_set & books);

void save_codec(const codec & c, const std::string & dir);
codec load_codec(const std::string & dir);

} // namespace clicktok
