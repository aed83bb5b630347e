#include "clicktok/synth.hpp"

#include "clicktok/errors.hpp"
#include "clicktok/rng.hpp"
#include "clicktok/threading.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace clicktok {

namespace {

double sinc(double x) {
    if (std::abs(x) < 1e-12) return 1.0;
    double px = M_PI * x;
    return std::sin(px) / px;
}

std::vector<double> fir_lowpass(const std::vector<double> & x, double cutoff_hz, int sr) {
    const int half = 24;
    const double fc = cutoff_hz / sr; // cycles per sample
    std::vector<double> h(2 * half + 1);
    double sum = 0.0;
    for (int i = -half; i <= half; ++i) {
        double win = 0.5 * (1.0 + std::cos(M_PI * i / (half + 1.0)));
        h[i + half] = 2.0 * fc * sinc(2.0 * fc * i) * win;
        sum += h[i + half];
    }
    for (double & v : h) v /= sum; // unit DC gain

    std::vector<double> y(x.size(), 0.0);
    for (size_t i = 0; i < x.size(); ++i) {
        double acc = 0.0;
        for (int j = -half; j <= half; ++j) {
            int64_t k = (int64_t) i + j;
            if (k < 0 || k >= (int64_t) x.size()) continue;
            acc += x[k] * h[j + half];
        }
        y[i] = acc;
    }
    return y;
}

// One noise burst with a falling half-Hann envelope. Sample 0 is pinned to
// 1.0 and strictly dominates the tail, so the template's argmax is always 0.
std::vector<double> click_template(const click_params & p, int sr, uint64_t seed) {
    const int width = (int) std::lround(p.pulse_width_s * sr);
    if (width < 2) throw config_error("synth_click: pulse_width too short for sample rate");

    rng r(derive_seed(seed, "click-template"));
    std::vector<double> n(width);
    for (double & v : n) v = r.uniform(-1.0, 1.0);
    if (p.lowpass_hz > 0.0 && p.lowpass_hz < sr / 2.0) {
        n = fir_lowpass(n, p.lowpass_hz, sr);
    }

    double tail_max = 0.0;
    for (int i = 1; i < width; ++i) tail_max = std::max(tail_max, std::abs(n[i]));
    const double tail_scale = tail_max > 1e-12 ? 0.92 / tail_max : 0.0;

    std::vector<double> t(width);
    t[0] = 1.0;
    for (int i = 1; i < width; ++i) {
        double env = 0.5 * (1.0 + std::cos(M_PI * i / width));
        t[i] = n[i] * tail_scale * env;
    }
    return t;
}

void validate_click(const click_params & p, int sr) {
    if (p.num_pulses < 1) throw config_error("click_params: num_pulses must be >= 1");
    if (p.decay <= 0.0 || p.decay > 1.0) throw config_error("click_params: decay must be in (0,1]");
    if (p.ipi_s * sr < 2.0) throw config_error("click_params: ipi too small for sample rate");
    if (p.ipi_s <= p.pulse_width_s) throw config_error("click_params: ipi must exceed pulse_width");
}

// adds template * amp at sample offset
void add_at(std::vector<double> & out, const std::vector<double> & tpl, int64_t offset, double amp) {
    for (size_t i = 0; i < tpl.size(); ++i) {
        int64_t k = offset + (int64_t) i;
        if (k < 0 || k >= (int64_t) out.size()) continue;
        out[k] += tpl[i] * amp;
    }
}

} // namespace

waveform synth_click(const click_params & p, int sr, uint64_t seed) {
    validate_click(p, sr);
    const std::vector<double> tpl = click_template(p, sr, seed);
    const int64_t spacing = std::lround(p.ipi_s * sr);
    if (p.num_pulses > 1 && spacing < (int64_t) tpl.size()) {
        throw config_error("synth_click: pulses would overlap (ipi too small)");
    }

    waveform w;
    w.sample_rate = sr;
    w.samples.assign((p.num_pulses - 1) * spacing + tpl.size(), 0.0);
    double amp = 1.0;
    for (int k = 0; k < p.num_pulses; ++k) {
        add_at(w.samples, tpl, k * spacing, amp);
        amp *= p.decay;
    }
    return w;
}

std::pair<waveform, std::vector<int64_t>> synth_coda(const coda_spec & c, int sr, uint64_t seed) {
    for (double ici : c.icis_s) {
        if (ici <= 0.0) throw config_error("synth_coda: all ICIs must be positive");
    }
    waveform click = synth_click(c.click, sr, seed);

    std::vector<int64_t> onsets(c.icis_s.size() + 1);
    onsets[0] = 0;
    for (size_t i = 0; i < c.icis_s.size(); ++i) {
        int64_t gap = std::lround(c.icis_s[i] * sr);
        if (gap < click.size()) throw config_error("synth_coda: clicks would overlap (ICI too small)");
        onsets[i + 1] = onsets[i] + gap;
    }

    const int64_t total = onsets.back() + click.size();
    if ((double) total / sr >= 2.0) {
        throw config_error("synth_coda: coda duration must stay under 2 s");
    }

    waveform w;
    w.sample_rate = sr;
    w.samples.assign(total, 0.0);
    for (int64_t o : onsets) add_at(w.samples, click.samples, o, 1.0);
    return {std::move(w), std::move(onsets)};
}

waveform synth_echolocation(int n, double ici_s, const click_params & p, int sr, uint64_t seed) {
    if (n < 1) throw config_error("synth_echolocation: need at least one click");
    if (ici_s <= 0.0) throw config_error("synth_echolocation: ICI must be positive");

    waveform click = synth_click(p, sr, seed);
    const int64_t spacing = std::lround(ici_s * sr);
    if (n > 1 && spacing < click.size()) {
        throw config_error("synth_echolocation: clicks would overlap (ICI too small)");
    }

    waveform w;
    w.sample_rate = sr;
    w.samples.assign((int64_t) (n - 1) * spacing + click.size(), 0.0);
    for (int k = 0; k < n; ++k) add_at(w.samples, click.samples, k * spacing, 1.0);
    return w;
}

waveform synth_beeps(const beep_spec & b, int sr) {
    if (b.duration_s <= 0.0) throw config_error("synth_beeps: duration must be positive");
    if (b.n_clicks < 0) throw config_error("synth_beeps: n_clicks must be >= 0");
    const int64_t n = std::lround(b.duration_s * sr);
    if (b.n_clicks > n) throw config_error("synth_beeps: more clicks than samples");

    waveform w;
    w.sample_rate = sr;
    w.samples.assign(n, 0.0);
    rng r(derive_seed(b.seed, "beeps"));
    for (int64_t i : r.sample_without_replacement(n, b.n_clicks)) {
        w.samples[i] = 1.0;
    }
    return w;
}

corpus_config default_corpus_config() {
    corpus_config cfg;
    cfg.rhythm_classes = {
        {"3R", {0.30, 0.30}},
        {"1+3", {0.35, 0.15, 0.15}},
        {"5R", {0.22, 0.22, 0.22, 0.22}},
        {"2+3", {0.15, 0.35, 0.15, 0.15}},
        {"1+4", {0.35, 0.15, 0.15, 0.15}},
    };
    click_params u0;
    u0.num_pulses = 3; u0.ipi_s = 0.0035; u0.decay = 0.70; u0.pulse_width_s = 0.0012;
    click_params u1;
    u1.num_pulses = 4; u1.ipi_s = 0.0040; u1.decay = 0.85; u1.pulse_width_s = 0.0008;
    click_params u2;
    u2.num_pulses = 2; u2.ipi_s = 0.0030; u2.decay = 0.55; u2.pulse_width_s = 0.0010;
    cfg.unit_classes = {{"u0", u0}, {"u1", u1}, {"u2", u2}};
    cfg.vowel_classes = {{"a", 2500.0}, {"i", 6500.0}};
    return cfg;
}

namespace {

void validate_corpus_config(const corpus_config & cfg) {
    if (cfg.sample_rate <= 0) throw config_error("build_corpus: bad sample rate");
    if (cfg.clip_duration_s <= 0.0) throw config_error("build_corpus: bad clip duration");
    if (cfg.rhythm_classes.size() < 2) throw config_error("build_corpus: need >= 2 rhythm classes");
    if (cfg.unit_classes.size() < 2) throw config_error("build_corpus: need >= 2 unit classes");
    if (cfg.vowel_classes.size() < 2) throw config_error("build_corpus: need >= 2 vowel classes");
    if (cfg.count_per_rhythm < 1) throw config_error("build_corpus: counts must be >= 1");
    if (cfg.noise_clips < 0) throw config_error("build_corpus: noise_clips must be >= 0");
    if (cfg.click_amp + cfg.noise_level > 1.0) {
        throw config_error("build_corpus: click_amp + noise_level must stay <= 1");
    }
    if (cfg.test_fraction <= 0.0 || cfg.test_fraction >= 1.0) {
        throw config_error("build_corpus: test_fraction must be in (0,1)");
    }
}

} // namespace

dataset_manifest build_corpus(const corpus_config & cfg, const std::string & out_dir) {
    validate_corpus_config(cfg);
    fs::create_directories(out_dir);

    const int n_rhythm = (int) cfg.rhythm_classes.size();
    const int n_unit = (int) cfg.unit_classes.size();
    const int n_vowel = (int) cfg.vowel_classes.size();
    const int64_t n_coda = (int64_t) n_rhythm * cfg.count_per_rhythm;
    const int64_t n_total = n_coda + cfg.noise_clips;
    const int64_t clip_len = std::lround(cfg.clip_duration_s * cfg.sample_rate);

    dataset_manifest m;
    m.sample_rate = cfg.sample_rate;
    m.entries.resize(n_total);

    parallel_for(0, n_total, [&](int64_t i) {
        rng r(derive_seed(cfg.seed, "corpus-entry", (uint64_t) i));
        char name[32];
        std::snprintf(name, sizeof(name), "clip_%05lld.wav", (long long) i);

        waveform clip;
        clip.sample_rate = cfg.sample_rate;
        clip.samples.resize(clip_len);
        for (double & v : clip.samples) v = r.uniform(-cfg.noise_level, cfg.noise_level);

        manifest_entry e;
        e.path = name;

        if (i < n_coda) {
            const int ri = (int) (i / cfg.count_per_rhythm);
            const int j = (int) (i % cfg.count_per_rhythm);
            const int ui = (int) (i % n_unit);
            const int vi = (int) ((i / n_unit) % n_vowel);

            coda_spec spec;
            spec.label = cfg.rhythm_classes[ri].first;
            spec.click = cfg.unit_classes[ui].second;
            spec.click.lowpass_hz = cfg.vowel_classes[vi].second;
            for (double ici : cfg.rhythm_classes[ri].second) {
                spec.icis_s.push_back(ici * (1.0 + cfg.ici_jitter * r.uniform(-1.0, 1.0)));
            }

            auto [coda, onsets] = synth_coda(spec, cfg.sample_rate, r.next_u64());
            (void) onsets;
            double amp = cfg.click_amp * (1.0 + cfg.amp_jitter * r.uniform(-1.0, 1.0));
            amp = std::min(amp, 1.0 - cfg.noise_level);

            const int64_t slack = clip_len - coda.size();
            if (slack < 0) throw config_error("build_corpus: coda longer than clip");
            const int64_t offset = slack > 0 ? r.uniform_int(slack) : 0;
            for (int64_t s = 0; s < coda.size(); ++s) {
                clip.samples[offset + s] += coda.samples[s] * amp;
            }

            e.labels = {{"detection", "coda"},
                        {"rhythm", spec.label},
                        {"unit", cfg.unit_classes[ui].first},
                        {"vowel", cfg.vowel_classes[vi].first}};
            e.split = j < (int) std::lround(cfg.count_per_rhythm * (1.0 - cfg.test_fraction)) ? "train" : "test";
        } else {
            const int64_t j = i - n_coda;
            e.labels = {{"detection", "noise"},
                        {"rhythm", "none"},
                        {"unit", "none"},
                        {"vowel", "none"}};
            e.split = j < (int64_t) std::lround(cfg.noise_clips * (1.0 - cfg.test_fraction)) ? "train" : "test";
        }

        save_wav((fs::path(out_dir) / name).string(), clip, wav_encoding::float32);
        m.entries[i] = std::move(e);
    });

    save_manifest(m, (fs::path(out_dir) / "manifest.json").string());
    return m;
}

void save_manifest(const dataset_manifest & m, const std::string & path) {
    json j;
    j["sample_rate"] = m.sample_rate;
    j["entries"] = json::array();
    for (const auto & e : m.entries) {
        json je;
        je["path"] = e.path;
        je["labels"] = e.labels;
        je["split"] = e.split;
        j["entries"].push_back(std::move(je));
    }
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw data_error("save_manifest: cannot write " + path);
    f << j.dump(2) << "\n";
}

dataset_manifest load_manifest(const std::string & path) {
    std::ifstream f(path);
    if (!f) throw data_error("load_manifest: cannot open " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception & ex) {
        throw data_error("load_manifest: bad JSON in " + path + ": " + ex.what());
    }

    dataset_manifest m;
    m.sample_rate = j.at("sample_rate").get<int>();
    std::map<std::string, bool> seen;
    for (const auto & je : j.at("entries")) {
        manifest_entry e;
        e.path = je.at("path").get<std::string>();
        e.split = je.at("split").get<std::string>();
        for (auto & [k, v] : je.at("labels").items()) e.labels[k] = v.get<std::string>();
        if (seen.count(e.path)) throw data_error("load_manifest: duplicate path " + e.path);
        seen[e.path] = true;
        m.entries.push_back(std::move(e));
    }
    return m;
}

std::string manifest_dir(const std::string & manifest_path) {
    return fs::path(manifest_path).parent_path().string();
}

} // namespace clicktok
