#include "cli_commands.hpp"

#include "clicktok/audio.hpp"
#include "clicktok/codec.hpp"
#include "clicktok/errors.hpp"
#include "clicktok/eval.hpp"
#include "clicktok/matm.hpp"
#include "clicktok/rng.hpp"
#include "clicktok/synth.hpp"
#include "clicktok/threading.hpp"
#include "clicktok/vamp.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace clicktok::cli {

namespace {

// ---------------------------------------------------------------------------
// resolved run configuration

struct run_config {
    uint64_t seed = 42;
    int threads = 1;
    std::string out_dir = "out";
    corpus_config synth = default_corpus_config();
    codec_config codec;
    matm_config matm;
    train_config train;
    int lora_rank = 8;
    double lora_alpha = 16.0;
    std::vector<std::pair<std::string, prompt_settings>> prompts = builtin_prompt_presets();
    probe_config probe;
};

void check_keys(const json & j, const std::set<std::string> & allowed, const std::string & where) {
    for (auto & [key, value] : j.items()) {
        (void) value;
        if (!allowed.count(key)) {
            throw config_error("config: unknown key '" + key + "' in " + where);
        }
    }
}

click_params click_from_json(const json & j, const std::string & where) {
    check_keys(j, {"num_pulses", "ipi_s", "decay", "pulse_width_s", "lowpass_hz"}, where);
    click_params p;
    p.num_pulses = j.value("num_pulses", p.num_pulses);
    p.ipi_s = j.value("ipi_s", p.ipi_s);
    p.decay = j.value("decay", p.decay);
    p.pulse_width_s = j.value("pulse_width_s", p.pulse_width_s);
    p.lowpass_hz = j.value("lowpass_hz", p.lowpass_hz);
    return p;
}

json click_to_json(const click_params & p) {
    return {{"num_pulses", p.num_pulses},
            {"ipi_s", p.ipi_s},
            {"decay", p.decay},
            {"pulse_width_s", p.pulse_width_s},
            {"lowpass_hz", p.lowpass_hz}};
}

void apply_synth_json(const json & j, corpus_config & c) {
    check_keys(j,
               {"sample_rate", "clip_duration_s", "count_per_rhythm", "noise_clips", "click_amp",
                "noise_level", "ici_jitter", "amp_jitter", "test_fraction", "rhythm_classes",
                "unit_classes", "vowel_classes"},
               "synth");
    c.sample_rate = j.value("sample_rate", c.sample_rate);
    c.clip_duration_s = j.value("clip_duration_s", c.clip_duration_s);
    c.count_per_rhythm = j.value("count_per_rhythm", c.count_per_rhythm);
    c.noise_clips = j.value("noise_clips", c.noise_clips);
    c.click_amp = j.value("click_amp", c.click_amp);
    c.noise_level = j.value("noise_level", c.noise_level);
    c.ici_jitter = j.value("ici_jitter", c.ici_jitter);
    c.amp_jitter = j.value("amp_jitter", c.amp_jitter);
    c.test_fraction = j.value("test_fraction", c.test_fraction);
    if (j.contains("rhythm_classes")) {
        c.rhythm_classes.clear();
        for (auto & [name, icis] : j.at("rhythm_classes").items()) {
            c.rhythm_classes.emplace_back(name, icis.get<std::vector<double>>());
        }
    }
    if (j.contains("unit_classes")) {
        c.unit_classes.clear();
        for (auto & [name, cp] : j.at("unit_classes").items()) {
            c.unit_classes.emplace_back(name, click_from_json(cp, "synth.unit_classes." + name));
        }
    }
    if (j.contains("vowel_classes")) {
        c.vowel_classes.clear();
        for (auto & [name, hz] : j.at("vowel_classes").items()) {
            c.vowel_classes.emplace_back(name, hz.get<double>());
        }
    }
}

void apply_codec_json(const json & j, codec_config & c) {
    check_keys(j, {"codebooks", "vocab", "feature_dim", "frame_len", "hop", "epochs", "sample_rate"},
               "codec");
    c.codebooks = j.value("codebooks", c.codebooks);
    c.vocab = j.value("vocab", c.vocab);
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.frame_len = j.value("frame_len", c.frame_len);
    c.hop = j.value("hop", c.hop);
    c.epochs = j.value("epochs", c.epochs);
    c.sample_rate = j.value("sample_rate", c.sample_rate);
}

void apply_matm_json(const json & j, matm_config & c) {
    check_keys(j, {"layers", "model_dim", "heads", "ff_dim", "max_len", "vocab", "codebooks", "dropout"},
               "matm");
    c.layers = j.value("layers", c.layers);
    c.model_dim = j.value("model_dim", c.model_dim);
    c.heads = j.value("heads", c.heads);
    c.ff_dim = j.value("ff_dim", c.ff_dim);
    c.max_len = j.value("max_len", c.max_len);
    c.vocab = j.value("vocab", c.vocab);
    c.codebooks = j.value("codebooks", c.codebooks);
    c.dropout = j.value("dropout", c.dropout);
}

void apply_train_json(const json & j, train_config & c) {
    check_keys(j, {"lr", "beta1", "beta2", "weight_decay", "batch_size", "grad_clip", "iterations"},
               "train");
    c.lr = j.value("lr", c.lr);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.iterations = j.value("iterations", c.iterations);
}

void apply_probe_json(const json & j, probe_config & c) {
    check_keys(j, {"hidden", "lr", "batch", "epochs", "split", "seeds", "select_on_test"}, "probe");
    c.hidden = j.value("hidden", c.hidden);
    c.lr = j.value("lr", c.lr);
    c.batch = j.value("batch", c.batch);
    c.epochs = j.value("epochs", c.epochs);
    c.split = j.value("split", c.split);
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<uint64_t>>();
    c.select_on_test = j.value("select_on_test", c.select_on_test);
}

void apply_prompt_json(const json & j, std::vector<std::pair<std::string, prompt_settings>> & table) {
    for (auto & [name, jp] : j.items()) {
        check_keys(jp,
                   {"periodic_prompt", "onset_mask_width", "steps", "typical_mass", "sample_cutoff",
                    "temperature"},
                   "prompts." + name);
        prompt_settings s;
        for (auto & [n, existing] : table) {
            if (n == name) s = existing;
        }
        s.periodic_prompt = jp.value("periodic_prompt", s.periodic_prompt);
        s.onset_mask_width = jp.value("onset_mask_width", s.onset_mask_width);
        s.steps = jp.value("steps", s.steps);
        s.typical_mass = jp.value("typical_mass", s.typical_mass);
        s.sample_cutoff = jp.value("sample_cutoff", s.sample_cutoff);
        s.temperature = jp.value("temperature", s.temperature);
        bool found = false;
        for (auto & [n, existing] : table) {
            if (n == name) {
                existing = s;
                found = true;
            }
        }
        if (!found) table.emplace_back(name, s);
    }
}

run_config resolve_config(const cli_options & opt) {
    run_config cfg;
    if (!opt.config_path.empty()) {
        std::ifstream f(opt.config_path);
        if (!f) throw config_error("cannot open config file " + opt.config_path);
        json j;
        try {
            f >> j;
        } catch (const json::exception & ex) {
            throw config_error(std::string("bad config JSON: ") + ex.what());
        }
        check_keys(j,
                   {"seed", "threads", "out_dir", "synth", "codec", "matm", "train", "lora",
                    "prompts", "probe"},
                   "top level");
        cfg.seed = j.value("seed", cfg.seed);
        cfg.threads = j.value("threads", cfg.threads);
        cfg.out_dir = j.value("out_dir", cfg.out_dir);
        if (j.contains("synth")) apply_synth_json(j.at("synth"), cfg.synth);
        if (j.contains("codec")) apply_codec_json(j.at("codec"), cfg.codec);
        if (j.contains("matm")) apply_matm_json(j.at("matm"), cfg.matm);
        if (j.contains("train")) apply_train_json(j.at("train"), cfg.train);
        if (j.contains("lora")) {
            check_keys(j.at("lora"), {"rank", "alpha"}, "lora");
            cfg.lora_rank = j.at("lora").value("rank", cfg.lora_rank);
            cfg.lora_alpha = j.at("lora").value("alpha", cfg.lora_alpha);
        }
        if (j.contains("prompts")) apply_prompt_json(j.at("prompts"), cfg.prompts);
        if (j.contains("probe")) apply_probe_json(j.at("probe"), cfg.probe);
    }
    // flags win
    if (opt.seed) cfg.seed = *opt.seed;
    if (opt.threads) cfg.threads = *opt.threads;
    if (opt.out_dir) cfg.out_dir = *opt.out_dir;

    set_thread_count(cfg.threads);
    return cfg;
}

json config_to_json(const run_config & cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["threads"] = cfg.threads;
    j["out_dir"] = cfg.out_dir;

    json js;
    js["sample_rate"] = cfg.synth.sample_rate;
    js["clip_duration_s"] = cfg.synth.clip_duration_s;
    js["count_per_rhythm"] = cfg.synth.count_per_rhythm;
    js["noise_clips"] = cfg.synth.noise_clips;
    js["click_amp"] = cfg.synth.click_amp;
    js["noise_level"] = cfg.synth.noise_level;
    js["ici_jitter"] = cfg.synth.ici_jitter;
    js["amp_jitter"] = cfg.synth.amp_jitter;
    js["test_fraction"] = cfg.synth.test_fraction;
    js["rhythm_classes"] = json::object();
    for (auto & [name, icis] : cfg.synth.rhythm_classes) js["rhythm_classes"][name] = icis;
    js["unit_classes"] = json::object();
    for (auto & [name, cp] : cfg.synth.unit_classes) js["unit_classes"][name] = click_to_json(cp);
    js["vowel_classes"] = json::object();
    for (auto & [name, hz] : cfg.synth.vowel_classes) js["vowel_classes"][name] = hz;
    j["synth"] = std::move(js);

    j["codec"] = {{"codebooks", cfg.codec.codebooks}, {"vocab", cfg.codec.vocab},
                  {"feature_dim", cfg.codec.feature_dim}, {"frame_len", cfg.codec.frame_len},
                  {"hop", cfg.codec.hop}, {"epochs", cfg.codec.epochs},
                  {"sample_rate", cfg.codec.sample_rate}};
    j["matm"] = {{"layers", cfg.matm.layers}, {"model_dim", cfg.matm.model_dim},
                 {"heads", cfg.matm.heads}, {"ff_dim", cfg.matm.ff_dim},
                 {"max_len", cfg.matm.max_len}, {"vocab", cfg.matm.vocab},
                 {"codebooks", cfg.matm.codebooks}, {"dropout", cfg.matm.dropout}};
    j["train"] = {{"lr", cfg.train.lr}, {"beta1", cfg.train.beta1}, {"beta2", cfg.train.beta2},
                  {"weight_decay", cfg.train.weight_decay}, {"batch_size", cfg.train.batch_size},
                  {"grad_clip", cfg.train.grad_clip}, {"iterations", cfg.train.iterations}};
    j["lora"] = {{"rank", cfg.lora_rank}, {"alpha", cfg.lora_alpha}};
    j["prompts"] = json::object();
    for (auto & [name, s] : cfg.prompts) {
        j["prompts"][name] = {{"periodic_prompt", s.periodic_prompt},
                              {"onset_mask_width", s.onset_mask_width},
                              {"steps", s.steps},
                              {"typical_mass", s.typical_mass},
                              {"sample_cutoff", s.sample_cutoff},
                              {"temperature", s.temperature}};
    }
    j["probe"] = {{"hidden", cfg.probe.hidden}, {"lr", cfg.probe.lr}, {"batch", cfg.probe.batch},
                  {"epochs", cfg.probe.epochs}, {"split", cfg.probe.split},
                  {"seeds", cfg.probe.seeds}, {"select_on_test", cfg.probe.select_on_test}};
    return j;
}

void write_resolved_config(const run_config & cfg, const std::string & command,
                           const json & extra = json::object()) {
    fs::create_directories(cfg.out_dir);
    json j = config_to_json(cfg);
    j["command"] = command;
    if (!extra.empty()) j["args"] = extra;
    std::ofstream f(fs::path(cfg.out_dir) / (command + ".config.json"), std::ios::trunc);
    if (!f) throw data_error("cannot write resolved config in " + cfg.out_dir);
    f << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// shared loading helpers

std::string fmt_g(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

struct corpus_files {
    std::vector<std::string> paths; // absolute
    std::vector<manifest_entry> entries;
    int sample_rate = 0;
};

// a corpus argument is either a manifest.json (or its directory) or a plain
// directory of WAVs
corpus_files load_corpus_files(const std::string & arg) {
    if (arg.empty()) throw config_error("missing --corpus");
    corpus_files out;

    fs::path p(arg);
    fs::path manifest;
    if (fs::is_directory(p) && fs::exists(p / "manifest.json")) {
        manifest = p / "manifest.json";
    } else if (fs::is_regular_file(p) && p.extension() == ".json") {
        manifest = p;
    }

    if (!manifest.empty()) {
        dataset_manifest m = load_manifest(manifest.string());
        out.sample_rate = m.sample_rate;
        const fs::path base = manifest.parent_path();
        for (auto & e : m.entries) {
            out.paths.push_back((base / e.path).string());
            out.entries.push_back(e);
        }
        return out;
    }

    if (!fs::is_directory(p)) throw data_error("corpus not found: " + arg);
    for (const auto & de : fs::directory_iterator(p)) {
        if (de.path().extension() == ".wav") out.paths.push_back(de.path().string());
    }
    std::sort(out.paths.begin(), out.paths.end());
    if (out.paths.empty()) throw data_error("no .wav files in " + arg);
    return out;
}

waveform load_prepped(const std::string & path, int sr) {
    return normalize(resample(load_wav(path), sr));
}

std::vector<waveform> load_prepped_all(const std::vector<std::string> & paths, int sr) {
    std::vector<waveform> out(paths.size());
    parallel_for(0, (int64_t) paths.size(), [&](int64_t i) { out[i] = load_prepped(paths[i], sr); });
    return out;
}

std::vector<token_grid> tokenize_all(const codec & c, const std::vector<waveform> & ws) {
    std::vector<token_grid> out(ws.size());
    parallel_for(0, (int64_t) ws.size(), [&](int64_t i) { out[i] = tokenize(c, ws[i]); });
    return out;
}

prompt_settings find_prompt(const run_config & cfg, const std::string & source) {
    for (const auto & [name, s] : cfg.prompts) {
        if (name == source) return s;
    }
    throw config_error("unknown prompt source '" + source + "'");
}

embedding_model pick_embedding(const std::string & name, const embedding_context & ctx) {
    if (name == "matm") return matm_embedding(ctx);
    if (name == "tokenizer") return tokenizer_embedding(ctx);
    if (name == "random") return random_projection_embedding(ctx.seed);
    if (name == "onset") return onset_feature_embedding();
    if (name == "energy") return energy_embedding();
    throw config_error("unknown embedding '" + name + "'");
}

std::vector<Eigen::VectorXd> embed_all(const embedding_model & m,
                                       const std::vector<std::string> & paths) {
    std::vector<Eigen::VectorXd> out(paths.size());
    parallel_for(0, (int64_t) paths.size(),
                 [&](int64_t i) { out[i] = m.embed(load_wav(paths[i])); });
    return out;
}

// denoise one recording: profile from non-onset regions, then subtraction
waveform denoise(const waveform & w) {
    const int win = 512, hop = 128;
    std::vector<std::pair<int64_t, int64_t>> exclusions;
    for (int64_t o : detect_onsets(w, 256, 64, 3.0)) {
        exclusions.emplace_back(std::max<int64_t>(0, o - 800), std::min(w.size(), o + 800));
    }
    noise_profile prof;
    try {
        prof = estimate_noise_profile(w, exclusions, win, hop);
    } catch (const data_error &) {
        prof = estimate_noise_profile(w, {}, win, hop); // everything excluded: use it all
    }
    return spectral_subtract(w, prof, 0.02);
}

} // namespace

// ---------------------------------------------------------------------------
// subcommands

int run_synth(const cli_options & opt) {
    run_config cfg = resolve_config(opt);
    write_resolved_config(cfg, "synth");

    corpus_config sc = cfg.synth;
    sc.seed = derive_seed(cfg.seed, "synth");
    const std::string dir = (fs::path(cfg.out_dir) / "corpus").string();
    dataset_manifest m = build_corpus(sc, dir);
    std::printf("synth: wrote %zu clips to %s\n", m.entries.size(), dir.c_str());
    return 0;
}

int run_train_codec(const cli_options & opt) {
    run_config cfg = resolve_config(opt);
    write_resolved_config(cfg, "train-codec", {{"corpus", opt.corpus}});

    corpus_files files = load_corpus_files(opt.corpus);
    std::vector<std::string> train_paths;
    for (size_t i = 0; i < files.paths.size(); ++i) {
        if (files.entries.empty() || files.entries[i].split == "train") {
            train_paths.push_back(files.paths[i]);
        }
    }

    codec_config cc = cfg.codec;
    cc.seed = derive_seed(cfg.seed, "codec");
    std::vector<waveform> corpus = load_prepped_all(train_paths, cc.sample_rate);

    codec_train_report report;
    codec c = train_codec(corpus, cc, report);
    const std::string dir = (fs::path(cfg.out_dir) / "codec").string();
    save_codec(c, dir);

    std::ofstream csv(fs::path(cfg.out_dir) / "codec_training.csv", std::ios::trunc);
    csv << "stage,epoch,error\n";
    for (size_t k = 0; k < report.stage_errors.size(); ++k) {
        for (size_t e = 0; e < report.stage_errors[k].size(); ++e) {
            csv << k << "," << e << "," << fmt_g(report.stage_errors[k][e]) << "\n";
        }
    }
    std::printf("train-codec: %zu clips, checkpoint at %s\n", corpus.size(), dir.c_str());
    return 0;
}

int run_train_matm(const cli_options & opt) {
    run_config cfg = resolve_config(opt);
    write_resolved_config(cfg, "train-matm", {{"corpus", opt.corpus}, {"codec", opt.codec_dir}});

    if (opt.codec_dir.empty()) throw config_error("missing --codec");
    codec c = load_codec(opt.codec_dir);

    corpus_files files = load_corpus_files(opt.corpus);
    std::vector<std::string> train_paths;
    for (size_t i = 0; i < files.paths.size(); ++i) {
        if (files.entries.empty() || files.entries[i].split == "train") {
            train_paths.push_back(files.paths[i]);
        }
    }
    std::vector<waveform> corpus = load_prepped_all(train_paths, c.transform.sample_rate);
    std::vector<token_grid> grids = tokenize_all(c, corpus);

    matm_config mc = cfg.matm;
    mc.vocab = c.books.vocab;
    mc.codebooks = c.books.codebooks;
    matm_params<float> model = matm_init<float>(mc, derive_seed(cfg.seed, "matm-init"));

    train_config tc = cfg.train;
    tc.seed = derive_seed(cfg.seed, "matm-train");
    rng r(tc.seed);
    adamw_state optst;

    std::ofstream csv(fs::path(cfg.out_dir) / "matm_loss.csv", std::ios::trunc);
    csv << "step,loss,masked_cells\n";
    for (int64_t it = 0; it < tc.iterations; ++it) {
        std::vector<token_grid> batch;
        for (int b = 0; b < tc.batch_size; ++b) {
            batch.push_back(grids[r.uniform_int((int64_t) grids.size())]);
        }
        step_result sr = train_step(model, optst, batch, tc, r);
        csv << it << "," << (sr.applied ? fmt_g(sr.loss) : "nan") << "," << sr.masked_cells << "\n";
    }

    const std::string dir = (fs::path(cfg.out_dir) / "matm").string();
    save_matm(model, dir);
    std::printf("train-matm: %lld steps on %zu grids, checkpoint at %s\n",
                (long long) tc.iterations, grids.size(), dir.c_str());
    return 0;
}

int run_finetune(const cli_options & opt) {
    run_config cfg = resolve_config(opt);
    write_resolved_config(cfg, "finetune",
                          {{"corpus", opt.corpus}, {"codec", opt.codec_dir},
                           {"matm", opt.matm_dir}, {"phase", opt.phase},
                           {"merge_adapter", opt.merge_adapter_dir}});

    if (opt.phase != "domain" && opt.phase != "species") {
        throw config_error("--phase must be 'domain' or 'species'");
    }
    if (opt.codec_dir.empty() || opt.matm_dir.empty()) {
        throw config_error("missing --codec or --matm");
    }

    codec c = load_codec(opt.codec_dir);
    matm_params<float> base = load_matm(opt.matm_dir);
    if (!opt.merge_adapter_dir.empty()) {
        // earlier-phase adapter folds into the base before this phase trains
        base = merge_lora(base, load_adapter(opt.merge_adapter_dir));
    }

    corpus_files files = load_corpus_files(opt.corpus);
    std::vector<std::string> train_paths;
    for (size_t i = 0; i < files.paths.size(); ++i) {
        if (files.entries.empty() || files.entries[i].split == "train") {
            train_paths.push_back(files.paths[i]);
        }
    }
    std::vector<waveform> corpus = load_prepped_all(train_paths, c.transform.sample_rate);
    std::vector<token_grid> grids = tokenize_all(c, corpus);

    train_config tc = cfg.train;
    tc.seed = derive_seed(cfg.seed, opt.phase == "domain" ? "finetune-domain" : "finetune-species");

    std::vector<double> losses;
    lora_adapter<float> adapter = finetune(base, grids, cfg.lora_rank, cfg.lora_alpha, tc, &losses);

    const std::string dir = (fs::path(cfg.out_dir) / ("adapter_" + opt.phase)).string();
    save_adapter(adapter, base.cfg, dir);

    std::ofstream csv(fs::path(cfg.out_dir) / ("finetune_" + opt.phase + "_loss.csv"),
                      std::ios::trunc);
    csv << "step,loss\n";
    for (size_t i = 0; i < losses.size(); ++i) {
        csv << i << "," << (std::isnan(losses[i]) ? "nan" : fmt_g(losses[i])) << "\n";
    }
    std::printf("finetune(%s): adapter at %s\n", opt.phase.c_str(), dir.c_str());
    return 0;
}

int run_translate(const cli_options & opt) {
    run_config cfg = resolve_config(opt);
    write_resolved_config(cfg, "translate",
                          {{"input", opt.input}, {"output", opt.output}, {"source", opt.source},
                           {"codec", opt.codec_dir}, {"matm", opt.matm_dir},
                           {"adapter", opt.adapter_dir}});

    if (opt.input.empty() || opt.output.empty()) throw config_error("missing --input or --output");
    if (opt.codec_dir.empty() || opt.matm_dir.empty()) {
        throw config_error("missing --codec or --matm");
    }

    codec c = load_codec(opt.codec_dir);
    matm_params<float> model = load_matm(opt.matm_dir);
    std::optional<lora_adapter<float>> adapter;
    if (!opt.adapter_dir.empty()) adapter = load_adapter(opt.adapter_dir);

    prompt_settings s = find_prompt(cfg, opt.source);
    s.seed = derive_seed(cfg.seed, "translate");

    waveform in = load_wav(opt.input);
    waveform out = translate(c, model, adapter ? &*adapter : nullptr, in, s);
    save_wav(opt.output, out, wav_encoding::float32);
    std::printf("translate: %s -> %s (%s preset, %d steps)\n", opt.input.c_str(),
                opt.output.c_str(), opt.source.c_str(), s.steps);
    return 0;
}

int run_eval_fad(const cli_options & opt) {
    run_config cfg = resolve_config(opt);
    json args = {{"embedding", opt.embedding}, {"self_pairs", opt.self_pairs}};
    args["sets"] = opt.sets;
    write_resolved_config(cfg, "eval-fad", args);

    if (opt.sets.size() < (opt.self_pairs ? 1u : 2u)) {
        throw config_error("need at least two --set name=dir arguments");
    }

    codec c;
    matm_params<float> model;
    std::optional<lora_adapter<float>> adapter;
    embedding_context ctx;
    ctx.seed = derive_seed(cfg.seed, "embedding");
    if (!opt.codec_dir.empty()) {
        c = load_codec(opt.codec_dir);
        ctx.codec_model = &c;
    }
    if (!opt.matm_dir.empty()) {
        model = load_matm(opt.matm_dir);
        ctx.matm_model = &model;
    }
    if (!opt.adapter_dir.empty()) {
        adapter = load_adapter(opt.adapter_dir);
        ctx.adapter = &*adapter;
    }
    embedding_model emb = pick_embedding(opt.embedding, ctx);

    std::vector<std::pair<std::string, std::vector<Eigen::VectorXd>>> sets;
    for (const std::string & spec : opt.sets) {
        const size_t eq = spec.find('=');
        if (eq == std::string::npos) throw config_error("--set must look like name=dir");
        const std::string name = spec.substr(0, eq);
        corpus_files files = load_corpus_files(spec.substr(eq + 1));
        sets.emplace_back(name, embed_all(emb, files.paths));
    }

    fad_report rep = make_fad_report(sets, opt.self_pairs);

    json jr;
    jr["embedding"] = emb.name;
    jr["baseline"] = rep.baseline;
    jr["degenerate"] = rep.degenerate;
    jr["pairs"] = json::array();
    std::ofstream csv(fs::path(cfg.out_dir) / "fad.csv", std::ios::trunc);
    csv << "set_a,set_b,raw,normalized\n";
    for (const auto & e : rep.entries) {
        csv << e.set_a << "," << e.set_b << "," << fmt_g(e.raw) << "," << fmt_g(e.normalized) << "\n";
        jr["pairs"].push_back({{"set_a", e.set_a}, {"set_b", e.set_b}, {"raw", e.raw},
                               {"normalized", e.normalized}});
        std::printf("fad %s|%s raw=%s normalized=%s\n", e.set_a.c_str(), e.set_b.c_str(),
                    fmt_g(e.raw).c_str(), fmt_g(e.normalized).c_str());
    }
    std::ofstream jf(fs::path(cfg.out_dir) / "fad.json", std::ios::trunc);
    jf << jr.dump(2) << "\n";
    return 0;
}

int run_calibrate(const cli_options & opt) {
    run_config cfg = resolve_config(opt);
    write_resolved_config(cfg, "calibrate", {{"corpus", opt.corpus}});

    corpus_files files = load_corpus_files(opt.corpus);
    const int sr = files.sample_rate > 0 ? files.sample_rate : 16000;

    std::vector<waveform> originals(files.paths.size());
    std::vector<waveform> denoised(files.paths.size());
    parallel_for(0, (int64_t) files.paths.size(), [&](int64_t i) {
        originals[i] = resample(load_wav(files.paths[i]), sr);
        denoised[i] = denoise(originals[i]);
    });

    codec c;
    matm_params<float> model;
    std::optional<lora_adapter<float>> adapter;
    embedding_context ctx;
    ctx.seed = derive_seed(cfg.seed, "embedding");
    if (!opt.codec_dir.empty()) {
        c = load_codec(opt.codec_dir);
        ctx.codec_model = &c;
    }
    if (!opt.matm_dir.empty()) {
        model = load_matm(opt.matm_dir);
        ctx.matm_model = &model;
    }
    if (!opt.adapter_dir.empty()) {
        adapter = load_adapter(opt.adapter_dir);
        ctx.adapter = &*adapter;
    }

    auto rows = calibrate_embeddings(originals, denoised, builtin_embeddings(ctx));

    std::ofstream csv(fs::path(cfg.out_dir) / "calibration.csv", std::ios::trunc);
    csv << "model,d1,d2,ratio\n";
    for (const auto & row : rows) {
        csv << row.model << "," << fmt_g(row.d1) << "," << fmt_g(row.d2) << ","
            << (row.infinite ? "inf" : fmt_g(row.ratio)) << "\n";
        std::printf("calibrate %s: d1=%s d2=%s ratio=%s\n", row.model.c_str(), fmt_g(row.d1).c_str(),
                    fmt_g(row.d2).c_str(), row.infinite ? "inf" : fmt_g(row.ratio).c_str());
    }
    return 0;
}

int run_eval_recon(const cli_options & opt) {
    run_config cfg = resolve_config(opt);
    write_resolved_config(cfg, "eval-recon",
                          {{"corpus", opt.corpus}, {"codec", opt.codec_dir},
                           {"chunk_ms", opt.chunk_ms}});

    if (opt.codec_dir.empty()) throw config_error("missing --codec");
    codec c = load_codec(opt.codec_dir);

    corpus_files files = load_corpus_files(opt.corpus);
    std::vector<waveform> corpus = load_prepped_all(files.paths, c.transform.sample_rate);

    recon_error res = recon_error_study(c, corpus, opt.chunk_ms);

    char fname[64];
    std::snprintf(fname, sizeof(fname), "recon_%.4gms.csv", opt.chunk_ms);
    std::ofstream csv(fs::path(cfg.out_dir) / fname, std::ios::trunc);
    csv << "bin_hz,error,count\n";
    const int fft_len = res.chunk_len + (res.chunk_len & 1);
    for (size_t f = 0; f < res.error.size(); ++f) {
        const double hz = (double) f * res.sample_rate / fft_len;
        csv << fmt_g(hz) << "," << fmt_g(res.error[f]) << "," << res.counts[f] << "\n";
    }
    std::printf("eval-recon: chunk %.4g ms, %zu bins -> %s\n", opt.chunk_ms, res.error.size(),
                fname);
    return 0;
}

int run_eval_probe(const cli_options & opt) {
    run_config cfg = resolve_config(opt);
    write_resolved_config(cfg, "eval-probe",
                          {{"corpus", opt.corpus}, {"task", opt.task},
                           {"embedding", opt.embedding}});

    corpus_files files = load_corpus_files(opt.corpus);
    if (files.entries.empty()) throw data_error("eval-probe needs a labelled manifest corpus");

    codec c;
    matm_params<float> model;
    std::optional<lora_adapter<float>> adapter;
    embedding_context ctx;
    ctx.seed = derive_seed(cfg.seed, "embedding");
    if (!opt.codec_dir.empty()) {
        c = load_codec(opt.codec_dir);
        ctx.codec_model = &c;
    }
    if (!opt.matm_dir.empty()) {
        model = load_matm(opt.matm_dir);
        ctx.matm_model = &model;
    }
    if (!opt.adapter_dir.empty()) {
        adapter = load_adapter(opt.adapter_dir);
        ctx.adapter = &*adapter;
    }
    embedding_model emb = pick_embedding(opt.embedding, ctx);

    // entries labelled "none" for this task (e.g. noise clips outside the
    // detection task) are skipped
    std::vector<std::string> paths;
    std::vector<std::string> labels;
    for (size_t i = 0; i < files.entries.size(); ++i) {
        auto it = files.entries[i].labels.find(opt.task);
        if (it == files.entries[i].labels.end()) {
            throw data_error("task '" + opt.task + "' not labelled in manifest");
        }
        if (it->second == "none") continue;
        paths.push_back(files.paths[i]);
        labels.push_back(it->second);
    }
    if (paths.empty()) throw data_error("no entries for task '" + opt.task + "'");

    std::vector<Eigen::VectorXd> embeddings = embed_all(emb, paths);
    probe_result res = train_probe(embeddings, labels, cfg.probe);

    char fname[128];
    std::snprintf(fname, sizeof(fname), "probe_%s_%s.csv", opt.task.c_str(), emb.name.c_str());
    std::ofstream csv(fs::path(cfg.out_dir) / fname, std::ios::trunc);
    csv << "seed,accuracy\n";
    for (size_t i = 0; i < res.accuracy_per_seed.size(); ++i) {
        csv << cfg.probe.seeds[i] << "," << fmt_g(res.accuracy_per_seed[i]) << "\n";
    }
    csv << "mean," << fmt_g(res.mean) << "\n";
    csv << "stderr," << fmt_g(res.stderr_) << "\n";
    csv << "majority," << fmt_g(res.majority_baseline) << "\n";

    std::printf("probe %s/%s: mean=%.3f stderr=%.3f majority=%.3f (%zu samples)\n",
                opt.task.c_str(), emb.name.c_str(), res.mean, res.stderr_, res.majority_baseline,
                paths.size());
    return 0;
}

int run_kappa(const cli_options & opt) {
    run_config cfg = resolve_config(opt);
    if (opt.ratings.empty()) throw config_error("missing --ratings");

    std::ifstream f(opt.ratings);
    if (!f) throw data_error("cannot open ratings file " + opt.ratings);
    std::vector<std::vector<int64_t>> counts;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<int64_t> row;
        size_t pos = 0;
        while (pos < line.size()) {
            size_t comma = line.find(',', pos);
            if (comma == std::string::npos) comma = line.size();
            const std::string cell = line.substr(pos, comma - pos);
            try {
                row.push_back(std::stoll(cell));
            } catch (const std::exception &) {
                throw data_error("ratings file: non-integer cell '" + cell + "'");
            }
            pos = comma + 1;
        }
        counts.push_back(std::move(row));
    }

    const double kappa = fleiss_kappa(counts);
    write_resolved_config(cfg, "kappa", {{"ratings", opt.ratings}});
    std::ofstream out(fs::path(cfg.out_dir) / "kappa.json", std::ios::trunc);
    out << json{{"kappa", kappa}}.dump(2) << "\n";
    std::printf("kappa=%s\n", fmt_g(kappa).c_str());
    return 0;
}

} // namespace clicktok::cli
