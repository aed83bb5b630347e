#include "cli_commands.hpp"

#include "clicktok/errors.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <functional>

using namespace clicktok;
using namespace clicktok::cli;

int main(int argc, char ** argv) {
    CLI::App app{"click-train acoustic token modeling: synthesis, tokenizer/model training, "
                 "prompted generation and evaluation"};
    app.require_subcommand(1);

    cli_options opt;
    uint64_t seed_flag = 0;
    int threads_flag = 0;
    std::string out_dir_flag;

    auto add_common = [&](CLI::App * cmd) {
        cmd->add_option("--config", opt.config_path, "JSON config file");
        cmd->add_option("--seed", seed_flag, "master seed (overrides config)")
            ->each([&](const std::string &) { opt.seed = seed_flag; });
        cmd->add_option("--threads", threads_flag, "worker threads; 1 = bit-deterministic")
            ->each([&](const std::string &) { opt.threads = threads_flag; });
        cmd->add_option("--out-dir", out_dir_flag, "output directory")
            ->each([&](const std::string &) { opt.out_dir = out_dir_flag; });
    };

    std::function<int()> action;

    CLI::App * synth = app.add_subcommand("synth", "generate a labelled synthetic corpus");
    add_common(synth);
    synth->callback([&] { action = [&] { return run_synth(opt); }; });

    CLI::App * tcodec = app.add_subcommand("train-codec", "fit the acoustic tokenizer");
    add_common(tcodec);
    tcodec->add_option("--corpus", opt.corpus, "manifest or directory of WAVs")->required();
    tcodec->callback([&] { action = [&] { return run_train_codec(opt); }; });

    CLI::App * tmatm = app.add_subcommand("train-matm", "train the masked token model");
    add_common(tmatm);
    tmatm->add_option("--corpus", opt.corpus)->required();
    tmatm->add_option("--codec", opt.codec_dir, "codec checkpoint dir")->required();
    tmatm->callback([&] { action = [&] { return run_train_matm(opt); }; });

    CLI::App * ft = app.add_subcommand("finetune", "LoRA finetuning (domain or species phase)");
    add_common(ft);
    ft->add_option("--corpus", opt.corpus)->required();
    ft->add_option("--codec", opt.codec_dir)->required();
    ft->add_option("--matm", opt.matm_dir)->required();
    ft->add_option("--phase", opt.phase, "domain | species");
    ft->add_option("--merge-adapter", opt.merge_adapter_dir,
                   "fold this adapter into the base first");
    ft->callback([&] { action = [&] { return run_finetune(opt); }; });

    CLI::App * tr = app.add_subcommand("translate", "prompt-conditioned generation from a WAV");
    add_common(tr);
    tr->add_option("--input", opt.input)->required();
    tr->add_option("--output", opt.output)->required();
    tr->add_option("--source", opt.source, "prompt preset name (default codas)");
    tr->add_option("--codec", opt.codec_dir)->required();
    tr->add_option("--matm", opt.matm_dir)->required();
    tr->add_option("--adapter", opt.adapter_dir);
    tr->callback([&] { action = [&] { return run_translate(opt); }; });

    CLI::App * fad = app.add_subcommand("eval-fad", "pairwise embedding distances between sets");
    add_common(fad);
    fad->add_option("--set", opt.sets, "name=dir (repeatable)")->required();
    fad->add_option("--embedding", opt.embedding, "matm|tokenizer|random|onset|energy");
    fad->add_option("--codec", opt.codec_dir);
    fad->add_option("--matm", opt.matm_dir);
    fad->add_option("--adapter", opt.adapter_dir);
    fad->add_flag("--self-pairs", opt.self_pairs, "also compare each set with itself");
    fad->callback([&] { action = [&] { return run_eval_fad(opt); }; });

    CLI::App * cal = app.add_subcommand("calibrate", "noise-vs-structure embedding calibration");
    add_common(cal);
    cal->add_option("--corpus", opt.corpus)->required();
    cal->add_option("--codec", opt.codec_dir);
    cal->add_option("--matm", opt.matm_dir);
    cal->add_option("--adapter", opt.adapter_dir);
    cal->callback([&] { action = [&] { return run_calibrate(opt); }; });

    CLI::App * rec = app.add_subcommand("eval-recon", "tokenizer reconstruction error by frequency");
    add_common(rec);
    rec->add_option("--corpus", opt.corpus)->required();
    rec->add_option("--codec", opt.codec_dir)->required();
    rec->add_option("--chunk-ms", opt.chunk_ms, "chunk length in milliseconds");
    rec->callback([&] { action = [&] { return run_eval_recon(opt); }; });

    CLI::App * probe = app.add_subcommand("eval-probe", "downstream classification probes");
    add_common(probe);
    probe->add_option("--corpus", opt.corpus)->required();
    probe->add_option("--task", opt.task, "detection|rhythm|unit|vowel");
    probe->add_option("--embedding", opt.embedding, "matm|tokenizer|random|onset|energy");
    probe->add_option("--codec", opt.codec_dir);
    probe->add_option("--matm", opt.matm_dir);
    probe->add_option("--adapter", opt.adapter_dir);
    probe->callback([&] { action = [&] { return run_eval_probe(opt); }; });

    CLI::App * kap = app.add_subcommand("kappa", "Fleiss's kappa from a ratings count CSV");
    add_common(kap);
    kap->add_option("--ratings", opt.ratings, "items x categories CSV of counts")->required();
    kap->callback([&] { action = [&] { return run_kappa(opt); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError & e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 1; // config error
    }

    try {
        return action();
    } catch (const config_error & e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const data_error & e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const numeric_error & e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 3;
    } catch (const std::exception & e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
