#include "clicktok/vamp.hpp"

#include "clicktok/errors.hpp"
#include "clicktok/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace clicktok {

std::vector<std::pair<std::string, prompt_settings>> builtin_prompt_presets() {
    auto make = [](int pp, int omw, int steps, double tm, double sc) {
        prompt_settings s;
        s.periodic_prompt = pp;
        s.onset_mask_width = omw;
        s.steps = steps;
        s.typical_mass = tm;
        s.sample_cutoff = sc;
        return s;
    };
    return {
        {"codas", make(12, 21, 50, 0.102, 0.17)},
        {"beeps", make(12, 21, 50, 0.102, 0.17)},
        {"a_dolphin", make(16, 5, 74, 0.15, 0.39)},
        {"b_seal", make(7, 1, 70, 0.15, 0.44)},
        {"b_whale", make(7, 1, 70, 0.15, 0.44)},
        {"beluga", make(13, 13, 85, 0.15, 0.39)},
        {"walrus", make(18, 1, 107, 0.15, 0.33)},
        {"c_dolphin", make(12, 14, 72, 0.15, 0.25)},
        {"narwhal", make(6, 4, 39, 0.15, 0.21)},
        {"l_seal", make(6, 4, 46, 0.15, 0.39)},
        {"l_whale", make(15, 19, 57, 0.15, 0.42)},
        {"orca", make(13, 2, 46, 0.15, 0.39)},
        {"ross_seal", make(18, 3, 66, 0.15, 0.49)},
        {"risso", make(13, 13, 85, 0.15, 0.39)},
    };
}

prompt_settings lookup_prompt_preset(const std::string & source) {
    for (const auto & [name, s] : builtin_prompt_presets()) {
        if (name == source) return s;
    }
    throw config_error("unknown prompt preset: " + source);
}

std::set<int64_t> build_prompt_mask(int64_t cols, const std::vector<int64_t> & onset_cols,
                                    const prompt_settings & s) {
    std::set<int64_t> keep;
    if (s.periodic_prompt > 0) {
        for (int64_t t = 0; t < cols; t += s.periodic_prompt) keep.insert(t);
    }
    const int64_t half = s.onset_mask_width / 2;
    for (int64_t o : onset_cols) {
        if (o < 0 || o >= cols) throw config_error("build_prompt_mask: onset column out of range");
        if (s.onset_mask_width <= 0) continue;
        for (int64_t t = std::max<int64_t>(0, o - half); t <= std::min(cols - 1, o + half); ++t) {
            keep.insert(t);
        }
    }
    return keep;
}

token_grid apply_prompt_mask(const token_grid & g, const std::set<int64_t> & keep) {
    token_grid out = g;
    for (int64_t t = 0; t < g.cols; ++t) {
        if (keep.count(t)) continue;
        for (int k = 0; k < g.codebooks; ++k) out.at(k, t) = mask_token;
    }
    return out;
}

std::vector<double> filter_logits(const std::vector<double> & probs, double typical_mass,
                                  double sample_cutoff) {
    if (typical_mass <= 0.0 || typical_mass > 1.0 || sample_cutoff <= 0.0 || sample_cutoff > 1.0) {
        throw config_error("filter_logits: masses must be in (0,1]");
    }
    const size_t n = probs.size();
    double total = 0.0;
    for (double p : probs) total += p;
    if (!(total > 0.0)) throw numeric_error("filter_logits: degenerate all-zero distribution");

    // entropy of the full distribution
    double entropy = 0.0;
    for (double p : probs) {
        if (p > 0.0) entropy -= (p / total) * std::log(p / total);
    }

    // step 1: locally-typical filtering -- keep tokens closest to the
    // entropy in surprisal until the kept mass reaches typical_mass
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> atypicality(n);
    for (size_t i = 0; i < n; ++i) {
        const double p = probs[i] / total;
        atypicality[i] = p > 0.0 ? std::abs(-std::log(p) - entropy)
                                 : std::numeric_limits<double>::infinity();
    }
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return atypicality[a] < atypicality[b]; // stable: ties stay in index order
    });

    std::vector<char> kept(n, 0);
    double mass = 0.0;
    for (size_t i : order) {
        kept[i] = 1;
        mass += probs[i] / total;
        if (mass >= typical_mass - 1e-12) break;
    }

    // step 2: nucleus truncation inside the kept set
    std::vector<size_t> kept_idx;
    for (size_t i = 0; i < n; ++i) {
        if (kept[i]) kept_idx.push_back(i);
    }
    std::stable_sort(kept_idx.begin(), kept_idx.end(), [&](size_t a, size_t b) {
        return probs[a] > probs[b];
    });
    double kept_total = 0.0;
    for (size_t i : kept_idx) kept_total += probs[i];

    std::vector<double> out(n, 0.0);
    double cum = 0.0;
    double out_total = 0.0;
    for (size_t i : kept_idx) {
        out[i] = probs[i];
        out_total += probs[i];
        cum += probs[i] / kept_total;
        if (cum >= sample_cutoff - 1e-12) break;
    }
    for (double & p : out) p /= out_total;
    return out;
}

namespace {

struct masked_cell {
    int k;
    int64_t t;
};

// schedule: cells still masked after step t of S
int64_t schedule_remaining(int64_t initial_masked, int step_index, int steps) {
    const double frac = (double) (step_index + 1) / steps;
    return (int64_t) std::ceil(initial_masked * std::cos(M_PI_2 * frac) - 1e-12);
}

} // namespace

decode_result decode_step(const matm_params<float> & p, const lora_adapter<float> * lora,
                          const token_grid & g, const prompt_settings & s, int step_index,
                          int64_t initial_masked) {
    if (s.steps < 1) throw config_error("decode_step: steps must be >= 1");
    if (step_index < 0 || step_index >= s.steps) throw config_error("decode_step: bad step index");
    if (s.temperature <= 0.0) throw config_error("decode_step: temperature must be positive");

    std::vector<masked_cell> cells;
    for (int64_t t = 0; t < g.cols; ++t) {
        for (int k = 0; k < g.codebooks; ++k) {
            if (g.at(k, t) == mask_token) cells.push_back({k, t});
        }
    }
    if (cells.empty()) throw data_error("decode_step: grid has no masked cells");

    matm_output<float> out = matm_forward(p, lora, g);

    // commit enough cells to land on the cosine schedule, at least one
    int64_t target_remaining = schedule_remaining(initial_masked, step_index, s.steps);
    if (step_index == s.steps - 1) target_remaining = 0;
    int64_t commit = (int64_t) cells.size() - target_remaining;
    if (commit < 1) commit = 1;
    if (commit > (int64_t) cells.size()) commit = (int64_t) cells.size();

    // confidence noise anneals linearly from 1 to 0 across steps
    const double noise_scale = s.steps > 1 ? (double) (s.steps - 1 - step_index) / (s.steps - 1) : 0.0;

    struct candidate {
        int32_t token;
        double confidence;
        int64_t t;
        int k;
        size_t cell;
    };
    std::vector<candidate> cands(cells.size());

    std::vector<double> probs(p.cfg.vocab);
    for (size_t ci = 0; ci < cells.size(); ++ci) {
        const auto [k, t] = cells[ci];
        // temperature softmax in double
        const auto row = out.logits[k].row(t);
        double m = -1e300;
        for (int j = 0; j < p.cfg.vocab; ++j) m = std::max(m, (double) row[j]);
        double sum = 0.0;
        for (int j = 0; j < p.cfg.vocab; ++j) {
            probs[j] = std::exp(((double) row[j] - m) / s.temperature);
            sum += probs[j];
        }
        for (int j = 0; j < p.cfg.vocab; ++j) probs[j] /= sum;

        std::vector<double> filtered = filter_logits(probs, s.typical_mass, s.sample_cutoff);

        // per-cell counter-based stream: independent of evaluation order
        rng cr(derive_seed(s.seed, (uint64_t) step_index, (uint64_t) k, (uint64_t) t));
        const double u = cr.uniform();
        double cum = 0.0;
        int32_t tok = -1, last_supported = -1;
        for (int j = 0; j < p.cfg.vocab; ++j) {
            if (filtered[j] <= 0.0) continue;
            last_supported = j;
            cum += filtered[j];
            if (u < cum) {
                tok = j;
                break;
            }
        }
        if (tok < 0) tok = last_supported; // rounding tail

        const double gumbel = -std::log(-std::log(std::max(cr.uniform(), 1e-300)));
        cands[ci] = {tok, std::log(std::max(filtered[tok], 1e-300)) + noise_scale * gumbel, t, k, ci};
    }

    // keep the top `commit` by confidence; ties by (column, codebook)
    std::sort(cands.begin(), cands.end(), [](const candidate & a, const candidate & b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        if (a.t != b.t) return a.t < b.t;
        return a.k < b.k;
    });

    decode_result res;
    res.grid = g;
    res.confidences.reserve(commit);
    for (int64_t i = 0; i < commit; ++i) {
        res.grid.at(cands[i].k, cands[i].t) = cands[i].token;
        res.confidences.push_back(cands[i].confidence);
    }
    return res;
}

token_grid iterative_decode(const matm_params<float> & p, const lora_adapter<float> * lora,
                            const token_grid & g, const prompt_settings & s) {
    if (s.steps < 1) throw config_error("iterative_decode: steps must be >= 1");

    const int64_t initial_masked = g.mask_count();
    if (initial_masked == 0) return g;

    token_grid cur = g;
    for (int step = 0; step < s.steps; ++step) {
        if (cur.mask_count() == 0) break;
        cur = decode_step(p, lora, cur, s, step, initial_masked).grid;
    }
    if (cur.mask_count() != 0) {
        throw numeric_error("iterative_decode: schedule left masked cells");
    }
    return cur;
}

waveform translate(const codec & c, const matm_params<float> & p,
                   const lora_adapter<float> * lora, const waveform & w,
                   const prompt_settings & s) {
    waveform prepped = normalize(resample(w, c.transform.sample_rate));
    token_grid grid = tokenize(c, prepped);

    // onset columns from spectral flux on the prepped waveform
    const int frame = 256, hop = 64;
    std::vector<int64_t> onset_cols;
    for (int64_t sample : detect_onsets(prepped, frame, hop, 3.0)) {
        const int64_t col = sample / c.transform.hop;
        if (col < grid.cols && (onset_cols.empty() || onset_cols.back() != col)) {
            onset_cols.push_back(col);
        }
    }

    std::set<int64_t> keep = build_prompt_mask(grid.cols, onset_cols, s);
    token_grid masked = apply_prompt_mask(grid, keep);
    token_grid decoded = iterative_decode(p, lora, masked, s);
    return detokenize(c, decoded);
}

} // namespace clicktok
