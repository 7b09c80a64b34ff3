#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "ssmtad/checkpoint.hpp"
#include "ssmtad/trainer.hpp"

using namespace ssmtad;

namespace {

RunConfig load_or_default(const std::string& path) {
    return path.empty() ? default_run_config() : load_run_config(path);
}

DType parse_dtype(const std::string& s) {
    if (s == "f32") return DType::f32;
    if (s == "f64") return DType::f64;
    throw ConfigError("--dtype must be f32 or f64, got '" + s + "'");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"selective state-space temporal action detection toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_path, dtype_str = "f32", fault, eval_source, oracle_suite = "all";
    uint64_t seed = 0;
    bool have_seed = false, force = false, e2e = false;
    std::vector<int64_t> lengths = {1024, 2048, 4096};
    std::vector<std::string> evaluators = {"recurrent", "parallel", "dense", "dmbss"};
    int64_t reps = 3;

    auto add_common = [&](CLI::App* c, bool with_out) {
        c->add_option("--config", config_path, "run config JSON (defaults when omitted)");
        c->add_option("--seed", seed, "override train and synth seeds")
            ->each([&](const std::string&) { have_seed = true; });
        c->add_flag("--e2e", e2e, "run with the frozen backbone + adapters in front");
        if (with_out) c->add_option("--out", out_path, "output directory")->required();
    };

    CLI::App* c_synth = app.add_subcommand("synth", "generate the synthetic dataset splits");
    add_common(c_synth, true);
    c_synth->add_flag("--force", force, "overwrite a non-empty output directory");

    CLI::App* c_train = app.add_subcommand("train", "train the detector");
    add_common(c_train, true);
    c_train->add_option("--dtype", dtype_str, "parameter dtype: f32 or f64");

    CLI::App* c_eval = app.add_subcommand("eval", "score a checkpoint or a results file");
    c_eval->add_option("source", eval_source, "checkpoint dir or results JSON")->required();
    add_common(c_eval, true);

    CLI::App* c_bench = app.add_subcommand("bench", "time the scan kernels and the full block");
    c_bench->add_option("--lengths", lengths, "sequence lengths");
    c_bench->add_option("--evaluators", evaluators, "recurrent|parallel|dense|dmbss");
    c_bench->add_option("--reps", reps, "timed repetitions per row");
    c_bench->add_option("--out", out_path, "CSV output path");

    CLI::App* c_oracle = app.add_subcommand("oracle", "run the verification suites");
    c_oracle->add_option("suite", oracle_suite,
                         "all|scan-equivalence|lti|mask|grad|palindrome|ap|bins");
    c_oracle->add_option("--break", fault, "inject a fault: scan|diag-mask|ap");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        RunConfig cfg;
        bool need_cfg = c_synth->parsed() || c_train->parsed() || c_eval->parsed();
        if (need_cfg) {
            if (c_eval->parsed() && config_path.empty()) {
                // fall back to the snapshot stored inside the checkpoint
                namespace fs = std::filesystem;
                if (fs::is_directory(eval_source)) {
                    Checkpoint c = checkpoint_load(eval_source);
                    if (c.config_json.empty())
                        throw ConfigError("eval: checkpoint has no config snapshot; pass --config");
                    cfg = parse_run_config(c.config_json);
                } else {
                    throw ConfigError("eval: scoring a results file needs --config for data paths");
                }
            } else {
                cfg = load_or_default(config_path);
            }
            if (have_seed) {
                cfg.train.seed = seed;
                cfg.synth.base.seed = seed;
            }
            if (e2e) cfg.mode = RunMode::e2e;
            cfg.validate();
        }

        if (c_synth->parsed()) {
            cmd_synth(cfg, out_path, force);
        } else if (c_train->parsed()) {
            cmd_train(cfg, out_path, parse_dtype(dtype_str));
        } else if (c_eval->parsed()) {
            cmd_eval(eval_source, cfg, out_path);
        } else if (c_bench->parsed()) {
            cmd_bench(lengths, evaluators, reps, out_path);
        } else if (c_oracle->parsed()) {
            OracleOptions opt;
            opt.fault = fault;
            bool ok = print_oracle_report(run_oracles(oracle_suite, opt));
            if (!ok) {
                std::fprintf(stderr, "oracle: at least one suite failed\n");
                return 3;
            }
        }
        return 0;
    } catch (const NonFiniteError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const ValueError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
