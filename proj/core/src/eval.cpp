#include "clicktok/eval.hpp"

#include "clicktok/errors.hpp"
#include "clicktok/rng.hpp"
#include "fft_util.hpp"

#include <algorithm>
#include <cmath>

namespace clicktok {

gaussian_stats fit_gaussian(const std::vector<Eigen::VectorXd> & vectors, bool biased) {
    if (vectors.size() < 2) throw data_error("fit_gaussian: need at least 2 vectors");
    const int64_t n = (int64_t) vectors.size();
    const int64_t d = vectors[0].size();
    for (const auto & v : vectors) {
        if (v.size() != d) throw data_error("fit_gaussian: dimension mismatch");
    }

    gaussian_stats s;
    s.n = n;
    s.mean = Eigen::VectorXd::Zero(d);
    for (const auto & v : vectors) s.mean += v;
    s.mean /= (double) n;

    s.cov = Eigen::MatrixXd::Zero(d, d);
    for (const auto & v : vectors) {
        Eigen::VectorXd c = v - s.mean;
        s.cov.noalias() += c * c.transpose();
    }
    s.cov /= (double) (biased ? n : n - 1);
    s.cov = 0.5 * (s.cov + s.cov.transpose().eval()); // exact symmetry
    if (!s.mean.allFinite() || !s.cov.allFinite()) {
        throw numeric_error("fit_gaussian: non-finite statistics");
    }
    return s;
}

namespace {

// PSD square root via symmetric eigendecomposition; negatives below the
// tolerance raise, small negatives clamp to zero.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd & m, const char * what) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
    if (eig.info() != Eigen::Success) throw numeric_error(std::string(what) + ": eigensolver failed");
    const double lam_max = std::max(eig.eigenvalues().maxCoeff(), 0.0);
    const double tol = 1e-6 * std::max(1.0, lam_max);
    Eigen::VectorXd lam = eig.eigenvalues();
    for (int64_t i = 0; i < lam.size(); ++i) {
        if (lam[i] < -tol) {
            throw numeric_error(std::string(what) + ": matrix has significant negative eigenvalues");
        }
        lam[i] = std::sqrt(std::max(lam[i], 0.0));
    }
    return eig.eigenvectors() * lam.asDiagonal() * eig.eigenvectors().transpose();
}

} // namespace

double frechet_distance(const gaussian_stats & a, const gaussian_stats & b) {
    if (a.mean.size() != b.mean.size()) throw config_error("frechet_distance: dimension mismatch");
    if (!a.mean.allFinite() || !b.mean.allFinite() || !a.cov.allFinite() || !b.cov.allFinite()) {
        throw numeric_error("frechet_distance: non-finite stats");
    }

    const double mean_term = (a.mean - b.mean).squaredNorm();

    // tr((Sa Sb)^{1/2}) via the symmetric form Sa^{1/2} Sb Sa^{1/2}
    Eigen::MatrixXd sqrt_a = psd_sqrt(a.cov, "frechet_distance: cov A");
    Eigen::MatrixXd inner = sqrt_a * b.cov * sqrt_a;
    inner = 0.5 * (inner + inner.transpose().eval());

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(inner);
    if (eig.info() != Eigen::Success) throw numeric_error("frechet_distance: eigensolver failed");
    const double lam_max = std::max(eig.eigenvalues().maxCoeff(), 0.0);
    const double tol = 1e-6 * std::max(1.0, lam_max);
    double trace_sqrt = 0.0;
    for (int64_t i = 0; i < eig.eigenvalues().size(); ++i) {
        const double lam = eig.eigenvalues()[i];
        if (lam < -tol) throw numeric_error("frechet_distance: negative eigenvalue beyond tolerance");
        trace_sqrt += std::sqrt(std::max(lam, 0.0));
    }

    const double d = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * trace_sqrt;
    return std::max(d, 0.0);
}

std::map<std::string, double> normalize_fad(const std::map<std::string, double> & raw,
                                            bool & degenerate) {
    if (raw.empty()) throw config_error("normalize_fad: empty map");
    double max_v = 0.0;
    for (const auto & [k, v] : raw) max_v = std::max(max_v, v);
    degenerate = max_v <= 0.0;
    if (degenerate) return raw;

    std::map<std::string, double> out;
    for (const auto & [k, v] : raw) out[k] = v / max_v;
    return out;
}

fad_report make_fad_report(const std::vector<std::pair<std::string, std::vector<Eigen::VectorXd>>> & sets,
                           bool self_pairs, bool biased_cov) {
    if (sets.size() < (self_pairs ? 1u : 2u)) throw config_error("make_fad_report: need >= 2 sets");

    std::vector<gaussian_stats> stats;
    for (const auto & [name, vecs] : sets) {
        (void) name;
        stats.push_back(fit_gaussian(vecs, biased_cov));
    }

    fad_report rep;
    std::map<std::string, double> raw;
    for (size_t i = 0; i < sets.size(); ++i) {
        for (size_t j = self_pairs ? i : i + 1; j < sets.size(); ++j) {
            if (!self_pairs && i == j) continue;
            fad_entry e;
            e.set_a = sets[i].first;
            e.set_b = sets[j].first;
            e.raw = frechet_distance(stats[i], stats[j]);
            rep.entries.push_back(e);
            raw[e.set_a + "|" + e.set_b] = e.raw;
        }
    }

    auto norm = normalize_fad(raw, rep.degenerate);
    for (auto & e : rep.entries) e.normalized = norm[e.set_a + "|" + e.set_b];
    return rep;
}

std::vector<calibration_row> calibrate_embeddings(const std::vector<waveform> & originals,
                                                  const std::vector<waveform> & denoised,
                                                  const std::vector<embedding_model> & models) {
    if (originals.size() != denoised.size() || originals.empty()) {
        throw data_error("calibrate_embeddings: parallel lists required");
    }

    // noise components x_i - xhat_i
    std::vector<waveform> noise(originals.size());
    for (size_t i = 0; i < originals.size(); ++i) {
        if (originals[i].size() != denoised[i].size() ||
            originals[i].sample_rate != denoised[i].sample_rate) {
            throw data_error("calibrate_embeddings: original/denoised geometry mismatch");
        }
        noise[i].sample_rate = originals[i].sample_rate;
        noise[i].samples.resize(originals[i].size());
        for (int64_t s = 0; s < originals[i].size(); ++s) {
            noise[i].samples[s] = originals[i].samples[s] - denoised[i].samples[s];
        }
    }

    std::vector<calibration_row> rows;
    for (const auto & model : models) {
        auto embed_all = [&model](const std::vector<waveform> & ws) {
            std::vector<Eigen::VectorXd> out;
            for (const auto & w : ws) out.push_back(model.embed(w));
            return out;
        };
        gaussian_stats g_orig = fit_gaussian(embed_all(originals));
        gaussian_stats g_den = fit_gaussian(embed_all(denoised));
        gaussian_stats g_noise = fit_gaussian(embed_all(noise));

        calibration_row row;
        row.model = model.name;
        row.d1 = frechet_distance(g_orig, g_den);
        row.d2 = frechet_distance(g_orig, g_noise);
        if (row.d1 <= 0.0) {
            row.infinite = true;
            row.ratio = std::numeric_limits<double>::infinity();
        } else {
            row.ratio = row.d2 / row.d1;
        }
        rows.push_back(std::move(row));
    }
    std::stable_sort(rows.begin(), rows.end(), [](const calibration_row & a, const calibration_row & b) {
        return a.ratio > b.ratio;
    });
    return rows;
}

recon_error recon_error_study(const reconstruct_fn & reconstruct,
                              const std::vector<waveform> & corpus, double chunk_ms) {
    if (corpus.empty()) throw data_error("recon_error_study: empty corpus");

    const int sr = corpus[0].sample_rate;
    const int chunk = (int) std::lround(chunk_ms * sr / 1000.0);
    if (chunk < 4) throw config_error("recon_error_study: chunk too short");
    const int fft_len = chunk + (chunk & 1); // odd chunks pad one zero
    const int bins = fft_len / 2 + 1;
    const double energy_eps = 1e-12;

    recon_error res;
    res.chunk_len = chunk;
    res.sample_rate = sr;
    res.error.assign(bins, 0.0);
    res.counts.assign(bins, 0);

    std::vector<double> xbuf(fft_len), ybuf(fft_len);
    for (const auto & w : corpus) {
        if (w.sample_rate != sr) throw data_error("recon_error_study: mixed sample rates");
        waveform rec = reconstruct(w);
        const int64_t len = std::min(w.size(), rec.size());
        const int64_t chunks = len / chunk;
        for (int64_t j = 0; j < chunks; ++j) {
            std::fill(xbuf.begin(), xbuf.end(), 0.0);
            std::fill(ybuf.begin(), ybuf.end(), 0.0);
            for (int i = 0; i < chunk; ++i) {
                xbuf[i] = w.samples[j * chunk + i];
                ybuf[i] = rec.samples[j * chunk + i];
            }
            auto xs = rfft(xbuf.data(), fft_len);
            auto ys = rfft(ybuf.data(), fft_len);
            for (int f = 0; f < bins; ++f) {
                const double mx = std::abs(xs[f]);
                if (mx * mx <= energy_eps) continue; // bins without energy are excluded
                const double my = std::abs(ys[f]);
                res.error[f] += (mx - my) * (mx - my) / (mx * mx + 1e-12);
                res.counts[f] += 1;
            }
        }
    }
    for (int f = 0; f < bins; ++f) {
        if (res.counts[f] > 0) res.error[f] /= (double) res.counts[f];
    }
    return res;
}

recon_error recon_error_study(const codec & c, const std::vector<waveform> & corpus,
                              double chunk_ms) {
    return recon_error_study(
        [&c](const waveform & w) { return detokenize(c, tokenize(c, w)); }, corpus, chunk_ms);
}

// ---------------------------------------------------------------------------
// built-in embeddings

namespace {

waveform to_rate(const waveform & w, int sr) {
    return w.sample_rate == sr ? w : resample(w, sr);
}

} // namespace

embedding_model matm_embedding(const embedding_context & ctx) {
    if (!ctx.codec_model || !ctx.matm_model) {
        throw config_error("matm_embedding: codec and model required");
    }
    const codec * c = ctx.codec_model;
    const matm_params<float> * m = ctx.matm_model;
    const lora_adapter<float> * a = ctx.adapter;
    const int layer = ctx.matm_layer < 0 ? m->cfg.layers : ctx.matm_layer;

    embedding_model e;
    e.name = "matm";
    e.dim = m->cfg.model_dim;
    e.embed = [c, m, a, layer](const waveform & w) {
        waveform prepped = normalize(to_rate(w, c->transform.sample_rate));
        return extract_embedding(*m, a, tokenize(*c, prepped), layer);
    };
    return e;
}

embedding_model tokenizer_embedding(const embedding_context & ctx) {
    if (!ctx.codec_model) throw config_error("tokenizer_embedding: codec required");
    const codec * c = ctx.codec_model;
    const int dim = 2048; // hashed token histogram

    embedding_model e;
    e.name = "tokenizer";
    e.dim = dim;
    e.embed = [c, dim](const waveform & w) {
        waveform prepped = normalize(to_rate(w, c->transform.sample_rate));
        token_grid g = tokenize(*c, prepped);
        Eigen::VectorXd v = Eigen::VectorXd::Zero(dim);
        for (int k = 0; k < g.codebooks; ++k) {
            for (int64_t t = 0; t < g.cols; ++t) {
                const uint64_t key = (uint64_t) k * (uint64_t) c->books.vocab + (uint64_t) g.at(k, t);
                v[(int64_t) (mix_u64(key) % (uint64_t) dim)] += 1.0;
            }
        }
        return Eigen::VectorXd(v / (double) g.cols);
    };
    return e;
}

embedding_model random_projection_embedding(uint64_t seed, int dim) {
    embedding_model e;
    e.name = "random";
    e.dim = dim;
    e.embed = [seed, dim](const waveform & w) {
        const int sr = 16000, n_mels = 40, win = 400, hop = 160;
        waveform x = to_rate(w, sr);
        if (x.size() < win) x.samples.resize(win, 0.0);
        spectrogram s = stft(x, win, hop);

        // triangular mel filterbank
        auto hz_to_mel = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
        auto mel_to_hz = [](double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); };
        const double mel_max = hz_to_mel(sr / 2.0);
        std::vector<double> centers(n_mels + 2);
        for (int i = 0; i < n_mels + 2; ++i) {
            centers[i] = mel_to_hz(mel_max * i / (n_mels + 1));
        }

        const int bins = s.bins();
        Eigen::MatrixXd logmel(s.num_frames, n_mels);
        for (int64_t t = 0; t < s.num_frames; ++t) {
            for (int mi = 0; mi < n_mels; ++mi) {
                double acc = 0.0;
                for (int f = 0; f < bins; ++f) {
                    const double hz = (double) f * sr / win;
                    double wgt = 0.0;
                    if (hz >= centers[mi] && hz <= centers[mi + 1]) {
                        wgt = (hz - centers[mi]) / std::max(centers[mi + 1] - centers[mi], 1e-9);
                    } else if (hz > centers[mi + 1] && hz <= centers[mi + 2]) {
                        wgt = (centers[mi + 2] - hz) / std::max(centers[mi + 2] - centers[mi + 1], 1e-9);
                    }
                    if (wgt > 0.0) acc += wgt * std::norm(s.at(f, t));
                }
                logmel(t, mi) = std::log(acc + 1e-10);
            }
        }

        // fixed seeded projection, frames mean-pooled
        rng r(derive_seed(seed, "random-projection"));
        Eigen::MatrixXd proj(dim, n_mels);
        for (int64_t i = 0; i < proj.size(); ++i) {
            proj.data()[i] = r.normal() / std::sqrt((double) n_mels);
        }
        Eigen::VectorXd pooled = logmel.colwise().mean().transpose();
        return Eigen::VectorXd(proj * pooled);
    };
    return e;
}

embedding_model onset_feature_embedding() {
    embedding_model e;
    e.name = "onset";
    e.dim = 8;
    e.embed = [](const waveform & w) {
        const int sr = 16000;
        waveform x = to_rate(w, sr);
        std::vector<int64_t> onsets = detect_onsets(x, 256, 64, 3.0);

        Eigen::VectorXd v = Eigen::VectorXd::Zero(8);
        const double dur = x.duration_s();
        v[0] = (double) onsets.size();
        v[5] = dur;
        v[6] = dur > 0.0 ? onsets.size() / dur : 0.0;
        v[7] = onsets.empty() ? 0.0 : onsets.front() / (double) sr;
        if (onsets.size() >= 2) {
            std::vector<double> iois;
            for (size_t i = 1; i < onsets.size(); ++i) {
                iois.push_back((onsets[i] - onsets[i - 1]) / (double) sr);
            }
            double mean = 0.0;
            for (double d : iois) mean += d;
            mean /= iois.size();
            double var = 0.0;
            for (double d : iois) var += (d - mean) * (d - mean);
            var /= iois.size();
            v[1] = mean;
            v[2] = std::sqrt(var);
            v[3] = *std::min_element(iois.begin(), iois.end());
            v[4] = *std::max_element(iois.begin(), iois.end());
        }
        return v;
    };
    return e;
}

embedding_model energy_embedding() {
    embedding_model e;
    e.name = "energy";
    e.dim = 4;
    e.embed = [](const waveform & w) {
        Eigen::VectorXd v = Eigen::VectorXd::Zero(4);
        double sum = 0.0, sum_sq = 0.0, peak = 0.0;
        for (double s : w.samples) {
            sum += std::abs(s);
            sum_sq += s * s;
            peak = std::max(peak, std::abs(s));
        }
        const double n = std::max<double>(1.0, (double) w.size());
        v[0] = sum_sq / n;            // power
        v[1] = std::sqrt(sum_sq / n); // rms
        v[2] = sum / n;               // mean |x|
        v[3] = peak;
        return v;
    };
    return e;
}

std::vector<embedding_model> builtin_embeddings(const embedding_context & ctx) {
    std::vector<embedding_model> models;
    if (ctx.codec_model && ctx.matm_model) models.push_back(matm_embedding(ctx));
    if (ctx.codec_model) models.push_back(tokenizer_embedding(ctx));
    models.push_back(random_projection_embedding(ctx.seed));
    models.push_back(onset_feature_embedding());
    models.push_back(energy_embedding());
    return models;
}

// ---------------------------------------------------------------------------

double fleiss_kappa(const std::vector<std::vector<int64_t>> & counts) {
    if (counts.empty() || counts[0].empty()) throw data_error("fleiss_kappa: empty matrix");
    const size_t items = counts.size();
    const size_t cats = counts[0].size();

    int64_t n = 0;
    for (int64_t c : counts[0]) n += c;
    if (n < 2) throw data_error("fleiss_kappa: need >= 2 raters per item");

    double p_bar = 0.0;
    std::vector<double> p_cat(cats, 0.0);
    for (const auto & row : counts) {
        if (row.size() != cats) throw data_error("fleiss_kappa: ragged matrix");
        int64_t row_sum = 0;
        double sq = 0.0;
        for (size_t j = 0; j < cats; ++j) {
            if (row[j] < 0) throw data_error("fleiss_kappa: negative count");
            row_sum += row[j];
            sq += (double) row[j] * row[j];
            p_cat[j] += (double) row[j];
        }
        if (row_sum != n) throw data_error("fleiss_kappa: inconsistent row sums");
        p_bar += (sq - n) / ((double) n * (n - 1));
    }
    p_bar /= (double) items;

    double p_e = 0.0;
    for (size_t j = 0; j < cats; ++j) {
        const double pj = p_cat[j] / ((double) items * n);
        p_e += pj * pj;
    }

    if (std::abs(1.0 - p_e) < 1e-15) {
        return 1.0; // all ratings in one category; agreement is perfect
    }
    return (p_bar - p_e) / (1.0 - p_e);
}

} // namespace clicktok
