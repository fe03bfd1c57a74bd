// Command-line driver: profile / train-teacher / incubate / sample / inspect /
// gen-data. One JSON config describes one reproducible run; --seed overrides
// every seed in the config at once.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "asdm/pipeline.hpp"

#include "CLI11.hpp"

namespace {

asdm::Json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw asdm::IoError(asdm::msg("cannot open config ", path));
    try {
        return asdm::Json::parse(f);
    } catch (const asdm::Json::exception& e) {
        throw asdm::ConfigError(asdm::msg(path, ": invalid JSON: ", e.what()));
    }
}

asdm::RunConfig load_config(const std::string& path, const std::optional<std::uint64_t>& seed_override) {
    asdm::RunConfig cfg = path.empty() ? asdm::RunConfig{} : asdm::RunConfig::from_json(read_json_file(path));
    if (seed_override) {
        cfg.seed = *seed_override;
        cfg.sampler.seed = *seed_override;
        cfg.distill.seed = *seed_override;
        cfg.data.seed = *seed_override;
    }
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"latent-diffusion compression toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_dir = ".";
    std::optional<std::uint64_t> seed_override;
    app.add_option("--config", config_path, "run configuration (JSON)");
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--seed", seed_override, "override all seeds in the config");

    auto* profile = app.add_subcommand("profile", "parameter and FLOP census of the configured model");
    std::string compare_path;
    profile->add_option("--compare", compare_path, "second config to diff against");

    auto* train_teacher = app.add_subcommand("train-teacher", "pretrain the teacher on synthetic data");
    auto* incubate = app.add_subcommand("incubate", "two-stage compression and distillation run");
    auto* sample = app.add_subcommand("sample", "DDIM sampling from checkpoints");
    auto* inspect = app.add_subcommand("inspect", "list the contents of a checkpoint");
    std::string ckpt_path;
    inspect->add_option("checkpoint", ckpt_path, "checkpoint file")->required();
    auto* gen_data = app.add_subcommand("gen-data", "emit the synthetic dataset");

    CLI11_PARSE(app, argc, argv);

    try {
        if (inspect->parsed()) {
            std::cout << asdm::cmd_inspect(ckpt_path);
            return 0;
        }
        asdm::RunConfig cfg = load_config(config_path, seed_override);
        if (profile->parsed()) {
            std::optional<asdm::UNetSpec> other;
            if (!compare_path.empty())
                other = asdm::RunConfig::from_json(read_json_file(compare_path)).architecture;
            asdm::Json report = asdm::cmd_profile(cfg, other ? &*other : nullptr);
            asdm::detail::ensure_dir(out_dir);
            asdm::detail::write_text(out_dir + "/profile.json", report.dump(2) + "\n");
            std::cout << asdm::profile(cfg.architecture).to_table();
            if (report.contains("speedup"))
                std::cout << "unet flop reduction: " << report["speedup"]["unet_flop_reduction"]
                          << "\npipeline reduction:  " << report["speedup"]["pipeline_reduction"] << "\n";
        } else if (train_teacher->parsed()) {
            auto log = asdm::cmd_train_teacher(cfg, out_dir);
            std::cout << "trained " << log.size() << " steps, final task loss "
                      << (log.empty() ? 0.0 : log.back().task) << "\n";
        } else if (incubate->parsed()) {
            auto art = asdm::cmd_incubate(cfg, out_dir);
            std::cout << "divergence before " << art.result.divergence_before.output_mse << ", after "
                      << art.result.divergence_after.output_mse << "\n";
        } else if (sample->parsed()) {
            auto art = asdm::cmd_sample(cfg, out_dir);
            std::cout << "sampled " << art.result.trace.size() << " steps, final latent norm "
                      << art.result.trace.back().latent_norm << "\n";
        } else if (gen_data->parsed()) {
            auto ds = asdm::cmd_gen_data(cfg, out_dir);
            std::cout << "wrote " << ds.size() << " samples\n";
        }
    } catch (const asdm::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
