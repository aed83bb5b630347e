#include "clicktok/codec.hpp"

#include "clicktok/errors.hpp"
#include "clicktok/rng.hpp"
#include "tensor_io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>

using json = nlohmann::json;

namespace clicktok {

int64_t token_grid::mask_count() const {
    int64_t n = 0;
    for (int32_t t : tokens) n += (t == mask_token);
    return n;
}

token_grid make_grid(int codebooks, int64_t cols, int sample_rate, int hop) {
    token_grid g;
    g.codebooks = codebooks;
    g.cols = cols;
    g.sample_rate = sample_rate;
    g.hop = hop;
    g.tokens.assign((int64_t) codebooks * cols, 0);
    return g;
}

int codec_config::resolved_hop() const {
    if (hop > 0) return hop;
    return (int) std::lround(2.0 * sample_rate / 120.0);
}

int codec_config::resolved_frame_len() const {
    return frame_len > 0 ? frame_len : resolved_hop();
}

namespace {

void validate_config(const codec_config & cfg) {
    if (cfg.codebooks < 1) throw config_error("codec: codebooks must be >= 1");
    if (cfg.vocab < 2) throw config_error("codec: vocab must be >= 2");
    if (cfg.feature_dim < 1) throw config_error("codec: feature_dim must be >= 1");
    if (cfg.sample_rate <= 0) throw config_error("codec: sample_rate must be positive");
    if (cfg.epochs < 1) throw config_error("codec: epochs must be >= 1");
    if (cfg.resolved_hop() < 1) throw config_error("codec: hop resolves to zero");
    if (cfg.resolved_frame_len() < cfg.resolved_hop()) {
        throw config_error("codec: frame_len must be >= hop");
    }
}

// analysis frames of one waveform, one column per hop, zero-padded tail
Eigen::MatrixXd extract_frames(const waveform & w, int frame_len, int hop) {
    const int64_t cols = (w.size() + hop - 1) / hop; // ceil
    Eigen::MatrixXd frames(cols, frame_len);
    frames.setZero();
    for (int64_t t = 0; t < cols; ++t) {
        const int64_t start = t * hop;
        const int64_t take = std::min<int64_t>(frame_len, w.size() - start);
        for (int64_t i = 0; i < take; ++i) frames(t, i) = w.samples[start + i];
    }
    return frames;
}

int32_t nearest_code(const Eigen::MatrixXd & table, const Eigen::VectorXd & x) {
    int32_t best = 0;
    double best_d = (table.row(0).transpose() - x).squaredNorm();
    for (int32_t i = 1; i < (int32_t) table.rows(); ++i) {
        const double d = (table.row(i).transpose() - x).squaredNorm();
        if (d < best_d) { // ties keep the lowest index
            best_d = d;
            best = i;
        }
    }
    return best;
}

// batched nearest-neighbor over rows of X; ties keep the lowest index
void assign_codes(const Eigen::MatrixXd & X, const Eigen::MatrixXd & table,
                  std::vector<int32_t> & codes) {
    const int64_t n = X.rows();
    const int64_t v = table.rows();
    codes.resize(n);

    Eigen::VectorXd code_sq = table.rowwise().squaredNorm();
    // process in fixed-size blocks so memory stays bounded and reductions
    // are order-independent
    const int64_t block = 2048;
    Eigen::MatrixXd dots;
    for (int64_t b = 0; b < n; b += block) {
        const int64_t m = std::min(block, n - b);
        dots.noalias() = X.middleRows(b, m) * table.transpose();
        for (int64_t i = 0; i < m; ++i) {
            int32_t best = 0;
            double best_d = code_sq[0] - 2.0 * dots(i, 0);
            for (int64_t j = 1; j < v; ++j) {
                const double d = code_sq[j] - 2.0 * dots(i, j);
                if (d < best_d) {
                    best_d = d;
                    best = (int32_t) j;
                }
            }
            codes[b + i] = best;
        }
    }
}

double mean_stage_error(const Eigen::MatrixXd & residual, const Eigen::MatrixXd & table,
                        const std::vector<int32_t> & codes) {
    double acc = 0.0;
    for (int64_t i = 0; i < residual.rows(); ++i) {
        acc += (residual.row(i) - table.row(codes[i])).squaredNorm();
    }
    return acc / std::max<int64_t>(1, residual.rows());
}

} // namespace

codec make_codec(const codec_config & cfg) {
    validate_config(cfg);
    const int frame_len = cfg.resolved_frame_len();
    const int d = std::min(cfg.feature_dim, frame_len);

    codec c;
    c.config = cfg;
    c.transform.frame_len = frame_len;
    c.transform.hop = cfg.resolved_hop();
    c.transform.sample_rate = cfg.sample_rate;
    c.transform.mean = Eigen::VectorXd::Zero(frame_len);

    // orthonormal DCT-II rows as a fixed analysis basis
    Eigen::MatrixXd basis(d, frame_len);
    for (int k = 0; k < d; ++k) {
        const double scale = std::sqrt((k == 0 ? 1.0 : 2.0) / frame_len);
        for (int i = 0; i < frame_len; ++i) {
            basis(k, i) = scale * std::cos(M_PI * (i + 0.5) * k / frame_len);
        }
    }
    c.transform.analysis = basis;
    c.transform.synthesis = basis.transpose();

    c.books.codebooks = cfg.codebooks;
    c.books.vocab = cfg.vocab;
    c.books.dim = d;
    rng r(derive_seed(cfg.seed, "codec-init"));
    for (int k = 0; k < cfg.codebooks; ++k) {
        Eigen::MatrixXd table(cfg.vocab, d);
        for (int64_t i = 0; i < table.size(); ++i) {
            table.data()[i] = 0.01 * r.normal();
        }
        table.row(0).setZero(); // reserved zero code
        c.books.tables.push_back(std::move(table));
    }
    return c;
}

codec train_codec(const std::vector<waveform> & corpus, const codec_config & cfg) {
    codec_train_report report;
    return train_codec(corpus, cfg, report);
}

codec train_codec(const std::vector<waveform> & corpus, const codec_config & cfg,
                  codec_train_report & report) {
    validate_config(cfg);
    const int frame_len = cfg.resolved_frame_len();
    const int hop = cfg.resolved_hop();

    // gather frames
    int64_t total = 0;
    for (const auto & w : corpus) {
        if (w.sample_rate != cfg.sample_rate) {
            throw data_error("train_codec: corpus sample rate mismatch (caller resamples)");
        }
        total += (w.size() + hop - 1) / hop;
    }
    if (total < cfg.vocab) {
        throw data_error("train_codec: insufficient frames (need >= vocab)");
    }

    Eigen::MatrixXd frames(total, frame_len);
    int64_t row = 0;
    for (const auto & w : corpus) {
        Eigen::MatrixXd f = extract_frames(w, frame_len, hop);
        frames.middleRows(row, f.rows()) = f;
        row += f.rows();
    }
    if (!frames.allFinite()) throw data_error("train_codec: NaN/Inf in corpus frames");

    // whitening PCA
    codec c;
    c.config = cfg;
    c.transform.frame_len = frame_len;
    c.transform.hop = hop;
    c.transform.sample_rate = cfg.sample_rate;
    c.transform.mean = frames.colwise().mean().transpose();

    Eigen::MatrixXd centered = frames.rowwise() - c.transform.mean.transpose();
    Eigen::MatrixXd cov = centered.transpose() * centered / (double) total;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success) throw numeric_error("train_codec: PCA eigensolver failed");

    const int d = std::min(cfg.feature_dim, frame_len);
    const double lam_max = eig.eigenvalues().maxCoeff();
    const double lam_floor = std::max(lam_max, 0.0) * 1e-12 + 1e-30;

    // eigenvalues ascend; take the top d, largest first
    Eigen::MatrixXd analysis(d, frame_len);
    Eigen::MatrixXd synthesis(frame_len, d);
    for (int k = 0; k < d; ++k) {
        const int src = frame_len - 1 - k;
        const double lam = std::max(eig.eigenvalues()[src], 0.0) + lam_floor;
        const double s = std::sqrt(lam);
        analysis.row(k) = eig.eigenvectors().col(src).transpose() / s;
        synthesis.col(k) = eig.eigenvectors().col(src) * s;
    }
    c.transform.analysis = analysis;
    c.transform.synthesis = synthesis;

    // residual k-means, stage by stage
    Eigen::MatrixXd residual = centered * analysis.transpose(); // N x d
    c.books.codebooks = cfg.codebooks;
    c.books.vocab = cfg.vocab;
    c.books.dim = d;
    report.stage_errors.assign(cfg.codebooks, {});

    const double ema = 0.99;
    std::vector<int32_t> codes;
    for (int k = 0; k < cfg.codebooks; ++k) {
        rng r(derive_seed(cfg.seed, "codec-stage", (uint64_t) k));

        Eigen::MatrixXd table(cfg.vocab, d);
        table.row(0).setZero(); // reserved zero code, never updated
        {
            auto pick = r.sample_without_replacement(total, cfg.vocab - 1);
            for (int i = 1; i < cfg.vocab; ++i) table.row(i) = residual.row(pick[i - 1]);
        }

        Eigen::VectorXd ema_count = Eigen::VectorXd::Ones(cfg.vocab);
        Eigen::MatrixXd ema_sum = table;

        Eigen::MatrixXd best_table = table;
        double best_err = -1.0;

        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            assign_codes(residual, table, codes);

            const double err = mean_stage_error(residual, table, codes);
            if (best_err < 0.0 || err < best_err) {
                best_err = err;
                best_table = table;
            }
            report.stage_errors[k].push_back(best_err);

            // EMA accumulation of per-code sums and counts
            Eigen::VectorXd count = Eigen::VectorXd::Zero(cfg.vocab);
            Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(cfg.vocab, d);
            for (int64_t i = 0; i < total; ++i) {
                count[codes[i]] += 1.0;
                sum.row(codes[i]) += residual.row(i);
            }
            ema_count = ema * ema_count + (1.0 - ema) * count;
            ema_sum = ema * ema_sum + (1.0 - ema) * sum;

            rng reseed(derive_seed(cfg.seed, "codec-reseed", (uint64_t) k, (uint64_t) epoch));
            for (int i = 1; i < cfg.vocab; ++i) {
                if (count[i] == 0.0) { // dead code: restart from a random frame
                    const int64_t j = reseed.uniform_int(total);
                    table.row(i) = residual.row(j);
                    ema_count[i] = 1.0;
                    ema_sum.row(i) = residual.row(j);
                } else {
                    table.row(i) = ema_sum.row(i) / std::max(ema_count[i], 1e-9);
                }
            }
            table.row(0).setZero();
        }

        // final snapshot beats the last EMA state only if strictly better
        assign_codes(residual, table, codes);
        const double final_err = mean_stage_error(residual, table, codes);
        if (final_err < best_err) {
            best_err = final_err;
            best_table = table;
        }
        report.stage_errors[k].push_back(best_err);

        assign_codes(residual, best_table, codes);
        for (int64_t i = 0; i < total; ++i) {
            residual.row(i) -= best_table.row(codes[i]);
        }
        c.books.tables.push_back(std::move(best_table));
    }
    return c;
}

std::pair<std::vector<int32_t>, Eigen::VectorXd> residual_quantize(const Eigen::VectorXd & feature,
                                                                   const codebook_set & books) {
    if (feature.size() != books.dim) throw config_error("residual_quantize: dimension mismatch");

    std::vector<int32_t> indices(books.codebooks);
    Eigen::VectorXd recon = Eigen::VectorXd::Zero(books.dim);
    Eigen::VectorXd residual = feature;
    for (int k = 0; k < books.codebooks; ++k) {
        const int32_t idx = nearest_code(books.tables[k], residual);
        indices[k] = idx;
        recon += books.tables[k].row(idx).transpose();
        residual -= books.tables[k].row(idx).transpose();
    }
    return {std::move(indices), std::move(recon)};
}

token_grid tokenize(const codec & c, const waveform & w) {
    if (w.sample_rate != c.transform.sample_rate) {
        throw data_error("tokenize: sample rate mismatch (caller resamples)");
    }
    if (w.size() == 0) throw data_error("tokenize: empty waveform");

    const int hop = c.transform.hop;
    const int64_t cols = (w.size() + hop - 1) / hop;
    Eigen::MatrixXd frames = extract_frames(w, c.transform.frame_len, hop);

    Eigen::MatrixXd residual =
        (frames.rowwise() - c.transform.mean.transpose()) * c.transform.analysis.transpose();

    token_grid g = make_grid(c.books.codebooks, cols, w.sample_rate, hop);
    std::vector<int32_t> codes;
    for (int k = 0; k < g.codebooks; ++k) {
        assign_codes(residual, c.books.tables[k], codes);
        for (int64_t t = 0; t < cols; ++t) {
            g.at(k, t) = codes[t];
            residual.row(t) -= c.books.tables[k].row(codes[t]);
        }
    }
    return g;
}

waveform detokenize(const codec & c, const token_grid & g) {
    if (g.codebooks != c.books.codebooks) throw config_error("detokenize: codebook count mismatch");
    if (g.has_mask()) throw data_error("detokenize: grid contains MASK entries");

    const int hop = c.transform.hop;
    const int frame_len = c.transform.frame_len;
    const int64_t out_len = g.cols * hop;

    waveform w;
    w.sample_rate = c.transform.sample_rate;
    w.samples.assign(out_len, 0.0);
    std::vector<double> weight(out_len, 0.0);

    Eigen::VectorXd feat(c.books.dim);
    for (int64_t t = 0; t < g.cols; ++t) {
        feat.setZero();
        for (int k = 0; k < g.codebooks; ++k) {
            const int32_t idx = g.at(k, t);
            if (idx < 0 || idx >= c.books.vocab) throw data_error("detokenize: token out of range");
            feat += c.books.tables[k].row(idx).transpose();
        }
        Eigen::VectorXd frame = c.transform.synthesis * feat + c.transform.mean;
        const int64_t start = t * hop;
        for (int i = 0; i < frame_len; ++i) {
            const int64_t s = start + i;
            if (s >= out_len) break;
            w.samples[s] += frame[i];
            weight[s] += 1.0;
        }
    }
    for (int64_t i = 0; i < out_len; ++i) {
        if (weight[i] > 1.0) w.samples[i] /= weight[i];
    }
    return w;
}

void save_codec(const codec & c, const std::string & dir) {
    std::vector<tensor_blob> tensors;
    auto add = [&tensors](const std::string & name, const Eigen::MatrixXd & m) {
        tensor_blob t;
        t.name = name;
        t.shape = {m.rows(), m.cols()};
        t.data.resize(m.size());
        // row-major on disk
        for (int64_t i = 0; i < m.rows(); ++i) {
            for (int64_t j = 0; j < m.cols(); ++j) t.data[i * m.cols() + j] = (float) m(i, j);
        }
        tensors.push_back(std::move(t));
    };
    add("mean", c.transform.mean);
    add("analysis", c.transform.analysis);
    add("synthesis", c.transform.synthesis);
    for (int k = 0; k < c.books.codebooks; ++k) {
        add("codebook." + std::to_string(k), c.books.tables[k]);
    }

    json meta;
    meta["codebooks"] = c.config.codebooks;
    meta["vocab"] = c.config.vocab;
    meta["feature_dim"] = c.books.dim;
    meta["frame_len"] = c.transform.frame_len;
    meta["hop"] = c.transform.hop;
    meta["sample_rate"] = c.transform.sample_rate;
    meta["epochs"] = c.config.epochs;
    meta["seed"] = c.config.seed;
    write_checkpoint(dir, "codec", meta, tensors);
}

codec load_codec(const std::string & dir) {
    std::vector<tensor_blob> tensors;
    json meta = read_checkpoint(dir, "codec", tensors);

    codec c;
    c.config.codebooks = meta.at("codebooks").get<int>();
    c.config.vocab = meta.at("vocab").get<int>();
    c.config.feature_dim = meta.at("feature_dim").get<int>();
    c.config.frame_len = meta.at("frame_len").get<int>();
    c.config.hop = meta.at("hop").get<int>();
    c.config.sample_rate = meta.at("sample_rate").get<int>();
    c.config.epochs = meta.value("epochs", 1);
    c.config.seed = meta.value("seed", (uint64_t) 0);

    auto fetch = [&tensors](const std::string & name) -> Eigen::MatrixXd {
        for (const auto & t : tensors) {
            if (t.name == name) {
                Eigen::MatrixXd m(t.shape[0], t.shape[1]);
                for (int64_t i = 0; i < m.rows(); ++i) {
                    for (int64_t j = 0; j < m.cols(); ++j) m(i, j) = t.data[i * m.cols() + j];
                }
                return m;
            }
        }
        throw data_error("load_codec: missing tensor " + name);
    };

    c.transform.frame_len = c.config.frame_len;
    c.transform.hop = c.config.hop;
    c.transform.sample_rate = c.config.sample_rate;
    c.transform.mean = fetch("mean").col(0);
    c.transform.analysis = fetch("analysis");
    c.transform.synthesis = fetch("synthesis");

    c.books.codebooks = c.config.codebooks;
    c.books.vocab = c.config.vocab;
    c.books.dim = (int) c.transform.analysis.rows();
    for (int k = 0; k < c.books.codebooks; ++k) {
        c.books.tables.push_back(fetch("codebook." + std::to_string(k)));
    }
    return c;
}

} // namespace clicktok
