#include "clicktok/matm.hpp"

#include "clicktok/errors.hpp"
#include "tensor_io.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>

using json = nlohmann::json;

namespace clicktok {

void matm_config::validate() const {
    if (layers < 1) throw config_error("matm: layers must be >= 1");
    if (model_dim < 1 || heads < 1 || model_dim % heads != 0) {
        throw config_error("matm: model_dim must be divisible by heads");
    }
    if (ff_dim < 1) throw config_error("matm: ff_dim must be >= 1");
    if (max_len < 1) throw config_error("matm: max_len must be >= 1");
    if (vocab < 2) throw config_error("matm: vocab must be >= 2");
    if (codebooks < 1) throw config_error("matm: codebooks must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw config_error("matm: dropout must be in [0,1)");
}

// ---------------------------------------------------------------------------
// parameter containers

template <typename T> std::vector<tensor_view<T>> tensor_views(matm_params<T> & p) {
    std::vector<tensor_view<T>> v;
    auto add_m = [&v](const std::string & name, mat_rm<T> & m) {
        v.push_back({name, m.data(), m.rows(), m.cols()});
    };
    auto add_v = [&v](const std::string & name, vec_col<T> & x) {
        v.push_back({name, x.data(), x.size(), 1});
    };
    for (int k = 0; k < p.cfg.codebooks; ++k) add_m("tok_embed." + std::to_string(k), p.tok_embed[k]);
    add_m("pos_embed", p.pos_embed);
    for (int i = 0; i < p.cfg.layers; ++i) {
        const std::string pre = "layer." + std::to_string(i) + ".";
        matm_layer<T> & l = p.layers[i];
        add_m(pre + "wq", l.wq); add_v(pre + "bq", l.bq);
        add_m(pre + "wk", l.wk); add_v(pre + "bk", l.bk);
        add_m(pre + "wv", l.wv); add_v(pre + "bv", l.bv);
        add_m(pre + "wo", l.wo); add_v(pre + "bo", l.bo);
        add_v(pre + "ln1_g", l.ln1_g); add_v(pre + "ln1_b", l.ln1_b);
        add_v(pre + "ln2_g", l.ln2_g); add_v(pre + "ln2_b", l.ln2_b);
        add_m(pre + "w1", l.w1); add_v(pre + "b1", l.b1);
        add_m(pre + "w2", l.w2); add_v(pre + "b2", l.b2);
    }
    add_v("lnf_g", p.lnf_g);
    add_v("lnf_b", p.lnf_b);
    for (int k = 0; k < p.cfg.codebooks; ++k) {
        add_m("head_w." + std::to_string(k), p.head_w[k]);
        add_v("head_b." + std::to_string(k), p.head_b[k]);
    }
    return v;
}

template <typename T> std::vector<tensor_view<T>> tensor_views(lora_adapter<T> & a) {
    std::vector<tensor_view<T>> v;
    auto add_m = [&v](const std::string & name, mat_rm<T> & m) {
        v.push_back({name, m.data(), m.rows(), m.cols()});
    };
    for (size_t i = 0; i < a.layers.size(); ++i) {
        const std::string pre = "layer." + std::to_string(i) + ".";
        lora_layer<T> & l = a.layers[i];
        add_m(pre + "qa", l.qa); add_m(pre + "qb", l.qb);
        add_m(pre + "ka", l.ka); add_m(pre + "kb", l.kb);
        add_m(pre + "va", l.va); add_m(pre + "vb", l.vb);
        add_m(pre + "oa", l.oa); add_m(pre + "ob", l.ob);
    }
    return v;
}

template <typename T> matm_params<T> matm_init(const matm_config & cfg, uint64_t seed) {
    cfg.validate();
    rng r(derive_seed(seed, "matm-init"));
    auto gauss = [&r](mat_rm<T> & m, double sd) {
        for (int64_t i = 0; i < m.size(); ++i) m.data()[i] = (T) (sd * r.normal());
    };

    matm_params<T> p;
    p.cfg = cfg;
    const int d = cfg.model_dim;
    for (int k = 0; k < cfg.codebooks; ++k) {
        mat_rm<T> e(cfg.vocab + 1, d);
        gauss(e, 0.02);
        p.tok_embed.push_back(std::move(e));
    }
    p.pos_embed.resize(cfg.max_len, d);
    gauss(p.pos_embed, 0.02);

    for (int i = 0; i < cfg.layers; ++i) {
        matm_layer<T> l;
        l.wq.resize(d, d); l.wk.resize(d, d); l.wv.resize(d, d); l.wo.resize(d, d);
        gauss(l.wq, 0.02); gauss(l.wk, 0.02); gauss(l.wv, 0.02); gauss(l.wo, 0.02);
        l.bq = vec_col<T>::Zero(d); l.bk = vec_col<T>::Zero(d);
        l.bv = vec_col<T>::Zero(d); l.bo = vec_col<T>::Zero(d);
        l.ln1_g = vec_col<T>::Ones(d); l.ln1_b = vec_col<T>::Zero(d);
        l.ln2_g = vec_col<T>::Ones(d); l.ln2_b = vec_col<T>::Zero(d);
        l.w1.resize(cfg.ff_dim, d); gauss(l.w1, 0.02);
        l.w2.resize(d, cfg.ff_dim); gauss(l.w2, 0.02);
        l.b1 = vec_col<T>::Zero(cfg.ff_dim);
        l.b2 = vec_col<T>::Zero(d);
        p.layers.push_back(std::move(l));
    }
    p.lnf_g = vec_col<T>::Ones(d);
    p.lnf_b = vec_col<T>::Zero(d);
    for (int k = 0; k < cfg.codebooks; ++k) {
        mat_rm<T> h(cfg.vocab, d);
        gauss(h, 0.02);
        p.head_w.push_back(std::move(h));
        p.head_b.push_back(vec_col<T>::Zero(cfg.vocab));
    }
    return p;
}

template <typename T>
lora_adapter<T> lora_init(const matm_config & cfg, int rank, double alpha, uint64_t seed) {
    if (rank < 1 || rank > cfg.model_dim) {
        throw config_error("lora: rank must be in [1, model_dim]");
    }
    rng r(derive_seed(seed, "lora-init"));
    lora_adapter<T> a;
    a.rank = rank;
    a.alpha = alpha;
    const int d = cfg.model_dim;
    for (int i = 0; i < cfg.layers; ++i) {
        lora_layer<T> l;
        auto init_pair = [&](mat_rm<T> & am, mat_rm<T> & bm) {
            am.resize(rank, d);
            for (int64_t j = 0; j < am.size(); ++j) am.data()[j] = (T) (0.02 * r.normal());
            bm = mat_rm<T>::Zero(d, rank); // zero B: identity at init
        };
        init_pair(l.qa, l.qb);
        init_pair(l.ka, l.kb);
        init_pair(l.va, l.vb);
        init_pair(l.oa, l.ob);
        a.layers.push_back(std::move(l));
    }
    return a;
}

template <typename T>
matm_params<T> merge_lora(const matm_params<T> & p, const lora_adapter<T> & a) {
    if ((int) a.layers.size() != p.cfg.layers) throw config_error("merge_lora: layer count mismatch");
    matm_params<T> out = p;
    const T s = (T) (a.alpha / a.rank);
    for (int i = 0; i < p.cfg.layers; ++i) {
        out.layers[i].wq.noalias() += s * (a.layers[i].qb * a.layers[i].qa);
        out.layers[i].wk.noalias() += s * (a.layers[i].kb * a.layers[i].ka);
        out.layers[i].wv.noalias() += s * (a.layers[i].vb * a.layers[i].va);
        out.layers[i].wo.noalias() += s * (a.layers[i].ob * a.layers[i].oa);
    }
    return out;
}

template <typename T> uint64_t weights_hash(const matm_params<T> & p) {
    auto views = tensor_views(const_cast<matm_params<T> &>(p));
    uint64_t h = 0xCBF29CE484222325ull;
    for (const auto & v : views) {
        for (int64_t i = 0; i < v.size(); ++i) {
            const uint8_t * b = (const uint8_t *) (v.data + i);
            for (size_t j = 0; j < sizeof(T); ++j) {
                h ^= b[j];
                h *= 0x100000001B3ull;
            }
        }
    }
    return h;
}

// ---------------------------------------------------------------------------
// forward / backward

namespace {

template <typename T>
void layernorm_fwd(const mat_rm<T> & x, const vec_col<T> & g, const vec_col<T> & b,
                   mat_rm<T> & y, vec_col<T> & inv_std, mat_rm<T> & xhat) {
    const T eps = (T) 1e-5;
    const int64_t rows = x.rows(), d = x.cols();
    y.resize(rows, d);
    xhat.resize(rows, d);
    inv_std.resize(rows);
    for (int64_t i = 0; i < rows; ++i) {
        const T mu = x.row(i).mean();
        T var = 0;
        for (int64_t j = 0; j < d; ++j) {
            const T c = x(i, j) - mu;
            var += c * c;
        }
        var /= (T) d;
        const T is = (T) 1 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (int64_t j = 0; j < d; ++j) {
            xhat(i, j) = (x(i, j) - mu) * is;
            y(i, j) = xhat(i, j) * g[j] + b[j];
        }
    }
}

// returns dx; accumulates dg, db when given
template <typename T>
mat_rm<T> layernorm_bwd(const mat_rm<T> & dy, const mat_rm<T> & xhat, const vec_col<T> & inv_std,
                        const vec_col<T> & g, vec_col<T> * dg, vec_col<T> * db) {
    const int64_t rows = dy.rows(), d = dy.cols();
    mat_rm<T> dx(rows, d);
    for (int64_t i = 0; i < rows; ++i) {
        T mean_dxh = 0, mean_dxh_xh = 0;
        for (int64_t j = 0; j < d; ++j) {
            const T dxh = dy(i, j) * g[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xhat(i, j);
        }
        mean_dxh /= (T) d;
        mean_dxh_xh /= (T) d;
        for (int64_t j = 0; j < d; ++j) {
            const T dxh = dy(i, j) * g[j];
            dx(i, j) = inv_std[i] * (dxh - mean_dxh - xhat(i, j) * mean_dxh_xh);
        }
    }
    if (dg) {
        for (int64_t j = 0; j < d; ++j) {
            T acc_g = 0, acc_b = 0;
            for (int64_t i = 0; i < rows; ++i) {
                acc_g += dy(i, j) * xhat(i, j);
                acc_b += dy(i, j);
            }
            (*dg)[j] += acc_g;
            (*db)[j] += acc_b;
        }
    }
    return dx;
}

template <typename T> T gelu(T x) {
    return x * (T) 0.5 * ((T) 1 + std::erf(x * (T) M_SQRT1_2));
}

template <typename T> T gelu_grad(T x) {
    const T phi = (T) 0.5 * ((T) 1 + std::erf(x * (T) M_SQRT1_2));
    const T pdf = std::exp((T) -0.5 * x * x) * (T) 0.3989422804014327;
    return phi + x * pdf;
}

template <typename T> struct layer_tape {
    mat_rm<T> x_in;
    mat_rm<T> h1, h1_xhat;
    vec_col<T> is1;
    mat_rm<T> q, k, v;
    mat_rm<T> uq, uk, uv, uo; // lora intermediates (L x r)
    std::vector<mat_rm<T>> probs;
    mat_rm<T> ctx;
    mat_rm<T> drop1, drop2; // inverted dropout masks; empty when unused
    mat_rm<T> x_mid;
    mat_rm<T> h2, h2_xhat;
    vec_col<T> is2;
    mat_rm<T> u_ff, a_ff;
    mat_rm<T> x_out;
};

template <typename T> struct fwd_tape {
    mat_rm<T> embed_sum;
    mat_rm<T> x0, x0_xhat; // x0 reused as running input
    std::vector<layer_tape<T>> layers;
    mat_rm<T> y, y_xhat;
    vec_col<T> isf;
    std::vector<mat_rm<T>> logits;
};

template <typename T>
int embed_row(const matm_config & cfg, int32_t tok) {
    if (tok == mask_token) return cfg.vocab;
    if (tok < 0 || tok >= cfg.vocab) throw data_error("matm: token out of range");
    return tok;
}

template <typename T>
void forward_impl(const matm_params<T> & p, const lora_adapter<T> * lora, const token_grid & g,
                  fwd_tape<T> & tape, rng * dropout_rng) {
    const matm_config & cfg = p.cfg;
    if (g.codebooks != cfg.codebooks) throw config_error("matm: grid codebook count mismatch");
    if (g.cols > cfg.max_len) throw config_error("matm: grid longer than max_len");
    if (g.cols < 1) throw data_error("matm: empty grid");
    if (lora && (int) lora->layers.size() != cfg.layers) {
        throw config_error("matm: adapter layer count mismatch");
    }

    const int64_t L = g.cols;
    const int d = cfg.model_dim;
    const int H = cfg.heads;
    const int dh = d / H;
    const T inv_sqrt_dh = (T) (1.0 / std::sqrt((double) dh));
    const T lscale = lora ? (T) (lora->alpha / lora->rank) : (T) 0;
    const bool use_dropout = dropout_rng != nullptr && cfg.dropout > 0.0;

    tape.embed_sum = mat_rm<T>::Zero(L, d);
    for (int64_t t = 0; t < L; ++t) {
        for (int k = 0; k < cfg.codebooks; ++k) {
            tape.embed_sum.row(t) += p.tok_embed[k].row(embed_row<T>(cfg, g.at(k, t)));
        }
    }
    tape.x0 = tape.embed_sum;
    for (int64_t t = 0; t < L; ++t) tape.x0.row(t) += p.pos_embed.row(t);

    auto make_dropout = [&](int64_t rows, int64_t cols) -> mat_rm<T> {
        mat_rm<T> m(rows, cols);
        const T keep = (T) (1.0 - cfg.dropout);
        const T inv_keep = (T) 1 / keep;
        for (int64_t i = 0; i < m.size(); ++i) {
            m.data()[i] = dropout_rng->uniform() < cfg.dropout ? (T) 0 : inv_keep;
        }
        return m;
    };

    tape.layers.clear();
    tape.layers.resize(cfg.layers);
    mat_rm<T> x = tape.x0;
    for (int li = 0; li < cfg.layers; ++li) {
        const matm_layer<T> & l = p.layers[li];
        layer_tape<T> & lt = tape.layers[li];
        lt.x_in = x;

        layernorm_fwd(x, l.ln1_g, l.ln1_b, lt.h1, lt.is1, lt.h1_xhat);

        auto proj = [&](const mat_rm<T> & w, const vec_col<T> & b, const mat_rm<T> * a,
                        const mat_rm<T> * bm, mat_rm<T> & u_out) {
            mat_rm<T> y = lt.h1 * w.transpose();
            y.rowwise() += b.transpose();
            if (lora) {
                u_out.noalias() = lt.h1 * a->transpose();
                y.noalias() += lscale * (u_out * bm->transpose());
            }
            return y;
        };
        const lora_layer<T> * ll = lora ? &lora->layers[li] : nullptr;
        lt.q = proj(l.wq, l.bq, ll ? &ll->qa : nullptr, ll ? &ll->qb : nullptr, lt.uq);
        lt.k = proj(l.wk, l.bk, ll ? &ll->ka : nullptr, ll ? &ll->kb : nullptr, lt.uk);
        lt.v = proj(l.wv, l.bv, ll ? &ll->va : nullptr, ll ? &ll->vb : nullptr, lt.uv);

        lt.probs.resize(H);
        lt.ctx.resize(L, d);
        for (int h = 0; h < H; ++h) {
            auto qh = lt.q.middleCols(h * dh, dh);
            auto kh = lt.k.middleCols(h * dh, dh);
            auto vh = lt.v.middleCols(h * dh, dh);
            mat_rm<T> scores = (qh * kh.transpose()) * inv_sqrt_dh; // full bidirectional
            lt.probs[h] = softmax_rows(scores);
            lt.ctx.middleCols(h * dh, dh).noalias() = lt.probs[h] * vh;
        }

        mat_rm<T> attn = lt.ctx * l.wo.transpose();
        attn.rowwise() += l.bo.transpose();
        if (lora) {
            lt.uo.noalias() = lt.ctx * ll->oa.transpose();
            attn.noalias() += lscale * (lt.uo * ll->ob.transpose());
        }
        if (use_dropout) {
            lt.drop1 = make_dropout(L, d);
            attn.array() *= lt.drop1.array();
        }
        lt.x_mid = x + attn;

        layernorm_fwd(lt.x_mid, l.ln2_g, l.ln2_b, lt.h2, lt.is2, lt.h2_xhat);
        lt.u_ff.noalias() = lt.h2 * l.w1.transpose();
        lt.u_ff.rowwise() += l.b1.transpose();
        lt.a_ff.resize(L, cfg.ff_dim);
        for (int64_t i = 0; i < lt.u_ff.size(); ++i) lt.a_ff.data()[i] = gelu(lt.u_ff.data()[i]);
        mat_rm<T> ffn = lt.a_ff * l.w2.transpose();
        ffn.rowwise() += l.b2.transpose();
        if (use_dropout) {
            lt.drop2 = make_dropout(L, d);
            ffn.array() *= lt.drop2.array();
        }
        lt.x_out = lt.x_mid + ffn;
        x = lt.x_out;
    }

    layernorm_fwd(x, p.lnf_g, p.lnf_b, tape.y, tape.isf, tape.y_xhat);

    tape.logits.resize(cfg.codebooks);
    for (int k = 0; k < cfg.codebooks; ++k) {
        tape.logits[k].noalias() = tape.y * p.head_w[k].transpose();
        tape.logits[k].rowwise() += p.head_b[k].transpose();
    }
}

template <typename T> matm_params<T> zero_like(const matm_params<T> & p) {
    matm_params<T> z = p;
    for (auto & v : tensor_views(z)) {
        std::memset(v.data, 0, sizeof(T) * v.size());
    }
    return z;
}

template <typename T> lora_adapter<T> zero_like(const lora_adapter<T> & a) {
    lora_adapter<T> z = a;
    for (auto & v : tensor_views(z)) {
        std::memset(v.data, 0, sizeof(T) * v.size());
    }
    return z;
}

// backward for one grid; dlogits scaled by the caller
template <typename T>
void backward_impl(const matm_params<T> & p, const lora_adapter<T> * lora, const token_grid & g,
                   const fwd_tape<T> & tape, const std::vector<mat_rm<T>> & dlogits,
                   matm_params<T> * grads, lora_adapter<T> * lora_grads) {
    const matm_config & cfg = p.cfg;
    const int64_t L = g.cols;
    const int d = cfg.model_dim;
    const int H = cfg.heads;
    const int dh = d / H;
    const T inv_sqrt_dh = (T) (1.0 / std::sqrt((double) dh));
    const T lscale = lora ? (T) (lora->alpha / lora->rank) : (T) 0;

    mat_rm<T> dy = mat_rm<T>::Zero(L, d);
    for (int k = 0; k < cfg.codebooks; ++k) {
        dy.noalias() += dlogits[k] * p.head_w[k];
        if (grads) {
            grads->head_w[k].noalias() += dlogits[k].transpose() * tape.y;
            grads->head_b[k] += dlogits[k].colwise().sum().transpose();
        }
    }

    mat_rm<T> dx = layernorm_bwd(dy, tape.y_xhat, tape.isf, p.lnf_g,
                                 grads ? &grads->lnf_g : nullptr,
                                 grads ? &grads->lnf_b : nullptr);

    for (int li = cfg.layers - 1; li >= 0; --li) {
        const matm_layer<T> & l = p.layers[li];
        const layer_tape<T> & lt = tape.layers[li];
        const lora_layer<T> * ll = lora ? &lora->layers[li] : nullptr;
        matm_layer<T> * gl = grads ? &grads->layers[li] : nullptr;
        lora_layer<T> * glo = lora_grads ? &lora_grads->layers[li] : nullptr;

        // FFN segment: x_out = x_mid + drop2(w2 . gelu(w1 . ln2(x_mid)))
        mat_rm<T> dffn = dx;
        if (lt.drop2.size() > 0) dffn.array() *= lt.drop2.array();
        mat_rm<T> da = dffn * l.w2;
        if (gl) {
            gl->w2.noalias() += dffn.transpose() * lt.a_ff;
            gl->b2 += dffn.colwise().sum().transpose();
        }
        mat_rm<T> du(L, cfg.ff_dim);
        for (int64_t i = 0; i < du.size(); ++i) {
            du.data()[i] = da.data()[i] * gelu_grad(lt.u_ff.data()[i]);
        }
        if (gl) {
            gl->w1.noalias() += du.transpose() * lt.h2;
            gl->b1 += du.colwise().sum().transpose();
        }
        mat_rm<T> dh2 = du * l.w1;
        mat_rm<T> dx_mid = dx + layernorm_bwd(dh2, lt.h2_xhat, lt.is2, l.ln2_g,
                                              gl ? &gl->ln2_g : nullptr,
                                              gl ? &gl->ln2_b : nullptr);

        // attention segment: x_mid = x_in + drop1(wo . ctx)
        mat_rm<T> dattn = dx_mid;
        if (lt.drop1.size() > 0) dattn.array() *= lt.drop1.array();
        mat_rm<T> dctx = dattn * l.wo;
        if (gl) {
            gl->wo.noalias() += dattn.transpose() * lt.ctx;
            gl->bo += dattn.colwise().sum().transpose();
        }
        if (lora) {
            mat_rm<T> duo = lscale * (dattn * ll->ob);
            dctx.noalias() += duo * ll->oa;
            if (glo) {
                glo->oa.noalias() += duo.transpose() * lt.ctx;
                glo->ob.noalias() += lscale * (dattn.transpose() * lt.uo);
            }
        }

        mat_rm<T> dq(L, d), dk(L, d), dv(L, d);
        for (int h = 0; h < H; ++h) {
            auto qh = lt.q.middleCols(h * dh, dh);
            auto kh = lt.k.middleCols(h * dh, dh);
            auto vh = lt.v.middleCols(h * dh, dh);
            auto dctx_h = dctx.middleCols(h * dh, dh);
            const mat_rm<T> & probs = lt.probs[h];

            mat_rm<T> dprobs = dctx_h * vh.transpose();
            dv.middleCols(h * dh, dh).noalias() = probs.transpose() * dctx_h;

            // softmax backward per row
            mat_rm<T> dscores(L, L);
            for (int64_t i = 0; i < L; ++i) {
                T dot = 0;
                for (int64_t j = 0; j < L; ++j) dot += dprobs(i, j) * probs(i, j);
                for (int64_t j = 0; j < L; ++j) {
                    dscores(i, j) = probs(i, j) * (dprobs(i, j) - dot);
                }
            }
            dq.middleCols(h * dh, dh).noalias() = (dscores * kh) * inv_sqrt_dh;
            dk.middleCols(h * dh, dh).noalias() = (dscores.transpose() * qh) * inv_sqrt_dh;
        }

        mat_rm<T> dh1 = mat_rm<T>::Zero(L, d);
        auto proj_bwd = [&](const mat_rm<T> & dy_p, const mat_rm<T> & w, const mat_rm<T> * a,
                            const mat_rm<T> * bm, const mat_rm<T> & u, mat_rm<T> * gw,
                            vec_col<T> * gb, mat_rm<T> * ga, mat_rm<T> * gbm) {
            dh1.noalias() += dy_p * w;
            if (gw) {
                gw->noalias() += dy_p.transpose() * lt.h1;
                *gb += dy_p.colwise().sum().transpose();
            }
            if (lora) {
                mat_rm<T> du_l = lscale * (dy_p * (*bm));
                dh1.noalias() += du_l * (*a);
                if (ga) {
                    ga->noalias() += du_l.transpose() * lt.h1;
                    gbm->noalias() += lscale * (dy_p.transpose() * u);
                }
            }
        };
        proj_bwd(dq, l.wq, ll ? &ll->qa : nullptr, ll ? &ll->qb : nullptr, lt.uq,
                 gl ? &gl->wq : nullptr, gl ? &gl->bq : nullptr,
                 glo ? &glo->qa : nullptr, glo ? &glo->qb : nullptr);
        proj_bwd(dk, l.wk, ll ? &ll->ka : nullptr, ll ? &ll->kb : nullptr, lt.uk,
                 gl ? &gl->wk : nullptr, gl ? &gl->bk : nullptr,
                 glo ? &glo->ka : nullptr, glo ? &glo->kb : nullptr);
        proj_bwd(dv, l.wv, ll ? &ll->va : nullptr, ll ? &ll->vb : nullptr, lt.uv,
                 gl ? &gl->wv : nullptr, gl ? &gl->bv : nullptr,
                 glo ? &glo->va : nullptr, glo ? &glo->vb : nullptr);

        dx = dx_mid + layernorm_bwd(dh1, lt.h1_xhat, lt.is1, l.ln1_g,
                                    gl ? &gl->ln1_g : nullptr,
                                    gl ? &gl->ln1_b : nullptr);
    }

    if (grads) {
        for (int64_t t = 0; t < L; ++t) {
            grads->pos_embed.row(t) += dx.row(t);
            for (int k = 0; k < cfg.codebooks; ++k) {
                grads->tok_embed[k].row(embed_row<T>(cfg, g.at(k, t))) += dx.row(t);
            }
        }
    }
}

} // namespace

template <typename T> mat_rm<T> softmax_rows(const mat_rm<T> & logits) {
    mat_rm<T> out(logits.rows(), logits.cols());
    for (int64_t i = 0; i < logits.rows(); ++i) {
        const T m = logits.row(i).maxCoeff();
        T sum = 0;
        for (int64_t j = 0; j < logits.cols(); ++j) {
            const T e = std::exp(logits(i, j) - m);
            out(i, j) = e;
            sum += e;
        }
        out.row(i) /= sum;
    }
    return out;
}

template <typename T>
matm_output<T> matm_forward(const matm_params<T> & p, const lora_adapter<T> * lora,
                            const token_grid & g) {
    fwd_tape<T> tape;
    forward_impl(p, lora, g, tape, nullptr);

    matm_output<T> out;
    out.logits = std::move(tape.logits);
    out.hidden.reserve(p.cfg.layers + 1);
    out.hidden.push_back(std::move(tape.embed_sum));
    for (auto & lt : tape.layers) out.hidden.push_back(std::move(lt.x_out));
    out.final_hidden = std::move(tape.y);
    return out;
}

template <typename T>
loss_result matm_loss_and_grads(const matm_params<T> & p, const lora_adapter<T> * lora,
                                const std::vector<const token_grid *> & inputs,
                                const std::vector<const token_grid *> & targets,
                                matm_params<T> * grads, lora_adapter<T> * lora_grads,
                                rng * dropout_rng) {
    if (inputs.size() != targets.size() || inputs.empty()) {
        throw config_error("matm_loss_and_grads: batch mismatch");
    }

    int64_t total_masked = 0;
    for (const token_grid * in : inputs) total_masked += in->mask_count();

    loss_result res;
    res.masked_cells = total_masked;
    if (total_masked == 0) return res;

    const double w = 1.0 / (double) total_masked;
    double loss = 0.0;

    for (size_t bi = 0; bi < inputs.size(); ++bi) {
        const token_grid & in = *inputs[bi];
        const token_grid & tgt = *targets[bi];
        if (in.cols != tgt.cols || in.codebooks != tgt.codebooks) {
            throw config_error("matm_loss_and_grads: input/target shape mismatch");
        }
        if (in.mask_count() == 0) continue; // nothing to learn from this grid

        fwd_tape<T> tape;
        forward_impl(p, lora, in, tape, dropout_rng);

        std::vector<mat_rm<T>> dlogits(p.cfg.codebooks);
        for (int k = 0; k < p.cfg.codebooks; ++k) {
            dlogits[k] = mat_rm<T>::Zero(in.cols, p.cfg.vocab);
        }

        for (int k = 0; k < p.cfg.codebooks; ++k) {
            for (int64_t t = 0; t < in.cols; ++t) {
                if (in.at(k, t) != mask_token) continue;
                const int32_t target = tgt.at(k, t);
                if (target < 0 || target >= p.cfg.vocab) {
                    throw data_error("matm_loss_and_grads: target token out of range");
                }
                // stable log-softmax in double
                const auto row = tape.logits[k].row(t);
                double m = (double) row.maxCoeff();
                double sum = 0.0;
                for (int64_t j = 0; j < p.cfg.vocab; ++j) sum += std::exp((double) row[j] - m);
                const double log_z = m + std::log(sum);
                loss += w * (log_z - (double) row[target]);
                for (int64_t j = 0; j < p.cfg.vocab; ++j) {
                    double pj = std::exp((double) row[j] - log_z);
                    dlogits[k](t, j) = (T) (w * (pj - (j == target ? 1.0 : 0.0)));
                }
            }
        }

        if (grads || lora_grads) {
            backward_impl(p, lora, in, tape, dlogits, grads, lora_grads);
        }
    }

    res.loss = loss;
    return res;
}

// ---------------------------------------------------------------------------
// masking and training

std::pair<token_grid, std::vector<int64_t>> mask_random_columns(const token_grid & g, double rate,
                                                                rng & r) {
    if (rate < 0.0 || rate > 1.0) throw config_error("mask_random_columns: rate must be in [0,1]");
    const int64_t n = (int64_t) std::ceil(rate * (double) g.cols - 1e-9);

    token_grid masked = g;
    std::vector<int64_t> cols;
    if (n > 0) {
        cols = r.sample_without_replacement(g.cols, n);
        for (int64_t c : cols) {
            for (int k = 0; k < g.codebooks; ++k) masked.at(k, c) = mask_token;
        }
    }
    return {std::move(masked), std::move(cols)};
}

namespace {

void adamw_apply(std::vector<tensor_view<float>> params, std::vector<tensor_view<float>> grads,
                 adamw_state & st, const train_config & tc) {
    if (st.m.empty()) {
        st.m.resize(params.size());
        st.v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            st.m[i].assign(params[i].size(), 0.0);
            st.v[i].assign(params[i].size(), 0.0);
        }
    }

    double norm_sq = 0.0;
    for (const auto & g : grads) {
        for (int64_t i = 0; i < g.size(); ++i) norm_sq += (double) g.data[i] * g.data[i];
    }
    double scale = 1.0;
    if (tc.grad_clip > 0.0) {
        const double norm = std::sqrt(norm_sq);
        if (norm > tc.grad_clip) scale = tc.grad_clip / norm;
    }

    st.step += 1;
    const double bc1 = 1.0 - std::pow(tc.beta1, (double) st.step);
    const double bc2 = 1.0 - std::pow(tc.beta2, (double) st.step);
    for (size_t ti = 0; ti < params.size(); ++ti) {
        float * p = params[ti].data;
        const float * g = grads[ti].data;
        auto & m = st.m[ti];
        auto & v = st.v[ti];
        for (int64_t i = 0; i < params[ti].size(); ++i) {
            const double gi = (double) g[i] * scale;
            m[i] = tc.beta1 * m[i] + (1.0 - tc.beta1) * gi;
            v[i] = tc.beta2 * v[i] + (1.0 - tc.beta2) * gi * gi;
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            p[i] = (float) (p[i] - tc.lr * (mh / (std::sqrt(vh) + 1e-8) + tc.weight_decay * p[i]));
        }
    }
}

// cloze masking for one batch; returns false when nothing got masked
bool build_cloze_batch(const std::vector<token_grid> & batch, rng & r,
                       std::vector<token_grid> & masked,
                       std::vector<const token_grid *> & in_ptrs,
                       std::vector<const token_grid *> & tgt_ptrs) {
    masked.clear();
    in_ptrs.clear();
    tgt_ptrs.clear();
    masked.reserve(batch.size());
    bool any = false;
    for (const token_grid & g : batch) {
        const double rate = std::cos(M_PI_2 * r.uniform()); // biased toward heavy masking
        auto [m, cols] = mask_random_columns(g, rate, r);
        any = any || !cols.empty();
        masked.push_back(std::move(m));
    }
    for (size_t i = 0; i < batch.size(); ++i) {
        in_ptrs.push_back(&masked[i]);
        tgt_ptrs.push_back(&batch[i]);
    }
    return any;
}

} // namespace

step_result train_step(matm_params<float> & p, adamw_state & opt,
                       const std::vector<token_grid> & batch, const train_config & tc, rng & r) {
    if (batch.empty()) throw config_error("train_step: empty batch");

    std::vector<token_grid> masked;
    std::vector<const token_grid *> in_ptrs, tgt_ptrs;
    if (!build_cloze_batch(batch, r, masked, in_ptrs, tgt_ptrs)) {
        return {}; // whole batch unmasked: no-op, flagged by applied=false
    }

    matm_params<float> grads = zero_like(p);
    rng * drop = p.cfg.dropout > 0.0 ? &r : nullptr;
    loss_result lr = matm_loss_and_grads<float>(p, nullptr, in_ptrs, tgt_ptrs, &grads, nullptr, drop);

    adamw_apply(tensor_views(p), tensor_views(grads), opt, tc);
    return {lr.loss, lr.masked_cells, true};
}

step_result train_step_lora(const matm_params<float> & p, lora_adapter<float> & a,
                            adamw_state & opt, const std::vector<token_grid> & batch,
                            const train_config & tc, rng & r) {
    if (batch.empty()) throw config_error("train_step_lora: empty batch");

    std::vector<token_grid> masked;
    std::vector<const token_grid *> in_ptrs, tgt_ptrs;
    if (!build_cloze_batch(batch, r, masked, in_ptrs, tgt_ptrs)) {
        return {};
    }

    lora_adapter<float> grads = zero_like(a);
    rng * drop = p.cfg.dropout > 0.0 ? &r : nullptr;
    loss_result lr = matm_loss_and_grads<float>(p, &a, in_ptrs, tgt_ptrs, nullptr, &grads, drop);

    adamw_apply(tensor_views(a), tensor_views(grads), opt, tc);
    return {lr.loss, lr.masked_cells, true};
}

lora_adapter<float> finetune(const matm_params<float> & base,
                             const std::vector<token_grid> & corpus, int rank, double alpha,
                             const train_config & tc, std::vector<double> * loss_log) {
    if (corpus.empty()) throw data_error("finetune: empty corpus");

    lora_adapter<float> adapter = lora_init<float>(base.cfg, rank, alpha, tc.seed);
    adapter.base_hash = weights_hash(base);

    adamw_state opt;
    rng r(derive_seed(tc.seed, "finetune"));
    for (int64_t it = 0; it < tc.iterations; ++it) {
        std::vector<token_grid> batch;
        for (int b = 0; b < tc.batch_size; ++b) {
            batch.push_back(corpus[r.uniform_int((int64_t) corpus.size())]);
        }
        step_result sr = train_step_lora(base, adapter, opt, batch, tc, r);
        if (loss_log) loss_log->push_back(sr.applied ? sr.loss : std::nan(""));
    }
    return adapter;
}

Eigen::VectorXd extract_embedding(const matm_params<float> & p, const lora_adapter<float> * lora,
                                  const token_grid & g, int layer) {
    if (layer < 0 || layer > p.cfg.layers) throw config_error("extract_embedding: bad layer index");

    matm_output<float> out = matm_forward(p, lora, g);
    const mat_rm<float> & h = layer == p.cfg.layers ? out.final_hidden : out.hidden[layer];
    Eigen::VectorXd pooled = Eigen::VectorXd::Zero(p.cfg.model_dim);
    for (int64_t t = 0; t < h.rows(); ++t) {
        for (int j = 0; j < p.cfg.model_dim; ++j) pooled[j] += (double) h(t, j);
    }
    return pooled / (double) h.rows();
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

json config_to_json(const matm_config & cfg) {
    json j;
    j["layers"] = cfg.layers;
    j["model_dim"] = cfg.model_dim;
    j["heads"] = cfg.heads;
    j["ff_dim"] = cfg.ff_dim;
    j["max_len"] = cfg.max_len;
    j["vocab"] = cfg.vocab;
    j["codebooks"] = cfg.codebooks;
    j["dropout"] = cfg.dropout;
    return j;
}

matm_config config_from_json(const json & j) {
    matm_config cfg;
    cfg.layers = j.at("layers").get<int>();
    cfg.model_dim = j.at("model_dim").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.ff_dim = j.at("ff_dim").get<int>();
    cfg.max_len = j.at("max_len").get<int>();
    cfg.vocab = j.at("vocab").get<int>();
    cfg.codebooks = j.at("codebooks").get<int>();
    cfg.dropout = j.at("dropout").get<double>();
    return cfg;
}

std::vector<tensor_blob> views_to_blobs(const std::vector<tensor_view<float>> & views) {
    std::vector<tensor_blob> blobs;
    for (const auto & v : views) {
        tensor_blob b;
        b.name = v.name;
        b.shape = {v.rows, v.cols};
        b.data.assign(v.data, v.data + v.size());
        blobs.push_back(std::move(b));
    }
    return blobs;
}

void blobs_to_views(const std::vector<tensor_blob> & blobs,
                    const std::vector<tensor_view<float>> & views, const std::string & what) {
    for (const auto & v : views) {
        const tensor_blob * found = nullptr;
        for (const auto & b : blobs) {
            if (b.name == v.name) {
                found = &b;
                break;
            }
        }
        if (!found) throw data_error(what + ": missing tensor " + v.name);
        if (found->count() != v.size()) throw data_error(what + ": shape mismatch for " + v.name);
        std::memcpy(v.data, found->data.data(), sizeof(float) * v.size());
    }
}

} // namespace

void save_matm(const matm_params<float> & p, const std::string & dir) {
    auto views = tensor_views(const_cast<matm_params<float> &>(p));
    json meta;
    meta["config"] = config_to_json(p.cfg);
    meta["hash"] = weights_hash(p);
    write_checkpoint(dir, "matm", meta, views_to_blobs(views));
}

matm_params<float> load_matm(const std::string & dir) {
    std::vector<tensor_blob> blobs;
    json meta = read_checkpoint(dir, "matm", blobs);
    matm_params<float> p = matm_init<float>(config_from_json(meta.at("config")), 0);
    blobs_to_views(blobs, tensor_views(p), "load_matm");
    return p;
}

void save_adapter(const lora_adapter<float> & a, const matm_config & cfg, const std::string & dir) {
    auto views = tensor_views(const_cast<lora_adapter<float> &>(a));
    json meta;
    meta["config"] = config_to_json(cfg);
    meta["rank"] = a.rank;
    meta["alpha"] = a.alpha;
    meta["base_hash"] = a.base_hash;
    write_checkpoint(dir, "lora_adapter", meta, views_to_blobs(views));
}

lora_adapter<float> load_adapter(const std::string & dir, matm_config * cfg_out) {
    std::vector<tensor_blob> blobs;
    json meta = read_checkpoint(dir, "lora_adapter", blobs);
    matm_config cfg = config_from_json(meta.at("config"));
    lora_adapter<float> a = lora_init<float>(cfg, meta.at("rank").get<int>(),
                                             meta.at("alpha").get<double>(), 0);
    a.base_hash = meta.at("base_hash").get<uint64_t>();
    blobs_to_views(blobs, tensor_views(a), "load_adapter");
    if (cfg_out) *cfg_out = cfg;
    return a;
}

// ---------------------------------------------------------------------------
// explicit instantiations: float for production, double for gradient checks

template std::vector<tensor_view<float>> tensor_views(matm_params<float> &);
template std::vector<tensor_view<double>> tensor_views(matm_params<double> &);
template std::vector<tensor_view<float>> tensor_views(lora_adapter<float> &);
template std::vector<tensor_view<double>> tensor_views(lora_adapter<double> &);
template matm_params<float> matm_init<float>(const matm_config &, uint64_t);
template matm_params<double> matm_init<double>(const matm_config &, uint64_t);
template lora_adapter<float> lora_init<float>(const matm_config &, int, double, uint64_t);
template lora_adapter<double> lora_init<double>(const matm_config &, int, double, uint64_t);
template matm_params<float> merge_lora(const matm_params<float> &, const lora_adapter<float> &);
template matm_params<double> merge_lora(const matm_params<double> &, const lora_adapter<double> &);
template uint64_t weights_hash(const matm_params<float> &);
template uint64_t weights_hash(const matm_params<double> &);
template mat_rm<float> softmax_rows(const mat_rm<float> &);
template mat_rm<double> softmax_rows(const mat_rm<double> &);
template matm_output<float> matm_forward(const matm_params<float> &, const lora_adapter<float> *,
                                         const token_grid &);
template matm_output<double> matm_forward(const matm_params<double> &, const lora_adapter<double> *,
                                          const token_grid &);
template loss_result matm_loss_and_grads(const matm_params<float> &, const lora_adapter<float> *,
                                         const std::vector<const token_grid *> &,
                                         const std::vector<const token_grid *> &,
                                         matm_params<float> *, lora_adapter<float> *, rng *);
template loss_result matm_loss_and_grads(const matm_params<double> &, const lora_adapter<double> *,
                                         const std::vector<const token_grid *> &,
                                         const std::vector<const token_grid *> &,
                                         matm_params<double> *, lora_adapter<double> *, rng *);

} // namespace clicktok
