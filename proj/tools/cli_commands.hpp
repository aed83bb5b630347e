#pragma once

#include <optional>
#include <string>
#include <vector>

namespace clicktok::cli {

// Parsed command line; flags override the JSON config ("flags win").
struct cli_options {
    std::string config_path;
    std::optional<uint64_t> seed;
    std::optional<int> threads;
    std::optional<std::string> out_dir;

    std::string corpus;        // manifest path or directory of WAVs
    std::string codec_dir;
    std::string matm_dir;
    std::string adapter_dir;
    std::string merge_adapter_dir;
    std::string input;
    std::string output;
    std::string source = "codas";
    std::string phase = "species"; // domain | species
    std::vector<std::string> sets; // name=dir
    double chunk_ms = 22.7;
    std::string task = "rhythm";
    std::string embedding = "matm";
    std::string ratings;
    bool self_pairs = false;
};

int run_synth(const cli_options & opt);
int run_train_codec(const cli_options & opt);
int run_train_matm(const cli_options & opt);
int run_finetune(const cli_options & opt);
int run_translate(const cli_options & opt);
int run_eval_fad(const cli_options & opt);
int run_calibrate(const cli_options & opt);
int run_eval_recon(const cli_options & opt);
int run_eval_probe(const cli_options & opt);
int run_kappa(const cli_options & opt);

} // namespace clicktok::cli
