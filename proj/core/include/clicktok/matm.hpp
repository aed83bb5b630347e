#pragma once

#include "clicktok/codec.hpp"
#include "clicktok/rng.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace clicktok {

template <typename T>
using mat_rm = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using vec_col = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Bidirectional masked-token transformer over K x L grids. The net is
// templated on the scalar so training runs in float while gradient checks
// instantiate the exact same code in double.
struct matm_config {
    int layers = 4;
    int model_dim = 128;
    int heads = 4;
    int ff_dim = 512;
    int max_len = 600;
    int vocab = 1024;
    int codebooks = 14;
    double dropout = 0.0;

    void validate() const;
};

template <typename T> struct matm_layer {
    mat_rm<T> wq, wk, wv, wo; // model_dim x model_dim
    vec_col<T> bq, bk, bv, bo;
    vec_col<T> ln1_g, ln1_b, ln2_g, ln2_b;
    mat_rm<T> w1, w2; // ff_dim x model_dim, model_dim x ff_dim
    vec_col<T> b1, b2;
};

template <typename T> struct matm_params {
    matm_config cfg;
    std::vector<mat_rm<T>> tok_embed; // K tables of (vocab+1) x model_dim; last row is MASK
    mat_rm<T> pos_embed;              // max_len x model_dim
    std::vector<matm_layer<T>> layers;
    vec_col<T> lnf_g, lnf_b;
    std::vector<mat_rm<T>> head_w; // K of vocab x model_dim
    std::vector<vec_col<T>> head_b;
};

// Low-rank deltas on the four attention projections of every layer; the
// adapted projection behaves as W + (alpha/rank) * B * A.
template <typename T> struct lora_layer {
    mat_rm<T> qa, qb, ka, kb, va, vb, oa, ob; // a: rank x dim, b: dim x rank
};

template <typename T> struct lora_adapter {
    int rank = 0;
    double alpha = 1.0;
    uint64_t base_hash = 0;
    std::vector<lora_layer<T>> layers;
};

template <typename T> struct tensor_view {
    std::string name;
    T * data = nullptr;
    int64_t rows = 0, cols = 0;

    int64_t size() const { return rows * cols; }
};

template <typename T> std::vector<tensor_view<T>> tensor_views(matm_params<T> & p);
template <typename T> std::vector<tensor_view<T>> tensor_views(lora_adapter<T> & a);

template <typename T> matm_params<T> matm_init(const matm_config & cfg, uint64_t seed);
template <typename T>
lora_adapter<T> lora_init(const matm_config & cfg, int rank, double alpha, uint64_t seed);

// Materializes adapted projections into a standalone copy of the weights.
template <typename T>
matm_params<T> merge_lora(const matm_params<T> & p, const lora_adapter<T> & a);

// FNV-1a over raw parameter bytes, in tensor order.
template <typename T> uint64_t weights_hash(const matm_params<T> & p);

template <typename T> struct matm_output {
    std::vector<mat_rm<T>> logits; // K of (L x vocab)
    std::vector<mat_rm<T>> hidden; // [0] = token-embedding sum (no positions), [j] = block j output
    mat_rm<T> final_hidden;        // after the final layer norm
};

template <typename T>
matm_output<T> matm_forward(const matm_params<T> & p, const lora_adapter<T> * lora,
                            const token_grid & g);

template <typename T> mat_rm<T> softmax_rows(const mat_rm<T> & logits);

struct loss_result {
    double loss = 0.0;
    int64_t masked_cells = 0;
};

// Mean cross-entropy over cells that are MASK in the inputs, with targets
// read from the parallel unmasked grids. Gradient destinations are optional;
// pass lora_grads to train only the adapter.
template <typename T>
loss_result matm_loss_and_grads(const matm_params<T> & p, const lora_adapter<T> * lora,
                                const std::vector<const token_grid *> & inputs,
                                const std::vector<const token_grid *> & targets,
                                matm_params<T> * grads, lora_adapter<T> * lora_grads,
                                rng * dropout_rng = nullptr);

// ceil(rate*L) distinct columns, all K rows set to MASK. Returns the masked
// grid and the chosen columns (ascending).
std::pair<token_grid, std::vector<int64_t>> mask_random_columns(const token_grid & g, double rate,
                                                                rng & r);

struct train_config {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    int batch_size = 6;
    double grad_clip = 1.0;
    int64_t iterations = 500;
    uint64_t seed = 0;
};

struct adamw_state {
    std::vector<std::vector<double>> m, v;
    int64_t step = 0;
};

struct step_result {
    double loss = 0.0;
    int64_t masked_cells = 0;
    bool applied = false; // false when the whole batch had nothing masked
};

// One cloze step: per grid, rate = cos(pi/2 * u) column masking, masked-only
// cross-entropy, global-norm clip, AdamW. Returns the pre-update loss.
step_result train_step(matm_params<float> & p, adamw_state & opt,
                       const std::vector<token_grid> & batch, const train_config & tc, rng & r);

step_result train_step_lora(const matm_params<float> & p, lora_adapter<float> & a,
                            adamw_state & opt, const std::vector<token_grid> & batch,
                            const train_config & tc, rng & r);

// LoRA finetuning loop over a grid corpus; base weights are never touched.
lora_adapter<float> finetune(const matm_params<float> & base,
                             const std::vector<token_grid> & corpus, int rank, double alpha,
                             const train_config & tc, std::vector<double> * loss_log = nullptr);

// Hidden states at the chosen layer, mean-pooled over time. Layer 0 is the
// token-embedding sum without positions; layer == cfg.layers is the final
// normalized state.
Eigen::VectorXd extract_embedding(const matm_params<float> & p, const lora_adapter<float> * lora,
                                  const token_grid & g, int layer);

void save_matm(const matm_params<float> & p, const std::string & dir);
matm_params<float> load_matm(const std::string & dir);

void save_adapter(const lora_adapter<float> & a, const matm_config & cfg, const std::string & dir);
lora_adapter<float> load_adapter(const std::string & dir, matm_config * cfg_out = nullptr);

} // namespace clicktok
