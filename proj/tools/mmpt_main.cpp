// Command-line front end: pre-training, evaluation protocols, data
// generation and the gradient suite. Exit codes: 0 ok, 1 usage, 2 numeric
// failure, 3 io failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mmpt/eval.hpp"
#include "mmpt/gradsuite.hpp"
#include "mmpt/mmpt.hpp"

namespace {

namespace fs = std::filesystem;

mmpt::Dataset eval_dataset(const mmpt::TrainConfig& cfg, std::size_t per_class,
                           std::uint64_t data_seed) {
    if (per_class == 0)
        return mmpt::build_dataset(cfg.per_class, cfg.n_points, cfg.noise_sigma, cfg.frac_train,
                                   cfg.frac_val, cfg.frac_test, cfg.seed);
    return mmpt::build_dataset(per_class, cfg.n_points, cfg.noise_sigma, cfg.frac_train,
                               cfg.frac_val, cfg.frac_test, data_seed);
}

void dump_first_views(const mmpt::Trainer& trainer, const std::string& dir) {
    fs::create_directories(dir);
    const auto pc = trainer.config().pipeline();
    mmpt::Rng rng(trainer.config().seed);
    const std::size_t count = std::min<std::size_t>(4, trainer.dataset().size());
    for (std::size_t i = 0; i < count; ++i) {
        const auto views =
            mmpt::render_views(trainer.dataset().clouds[i], pc.n_views, pc.view_res, pc.view_res, rng);
        for (std::size_t v = 0; v < views.size(); ++v) {
            char name[64];
            std::snprintf(name, sizeof(name), "cloud%zu_view%zu.pgm", i, v);
            mmpt::write_pgm(views[v], dir + "/" + name);
        }
    }
}

int run_pretrain(const std::string& config_path, const std::string& out_dir,
                 const std::string& tasks, bool weights_grid, const std::string& dump_views_dir) {
    mmpt::TrainConfig cfg =
        config_path.empty() ? mmpt::TrainConfig::desk() : mmpt::TrainConfig::from_file(config_path);
    if (tasks == "tlr") {
        cfg.enable_tlr = true;
        cfg.enable_plr = false;
        cfg.enable_mcl = false;
    } else if (tasks == "tlr+plr") {
        cfg.enable_tlr = true;
        cfg.enable_plr = true;
        cfg.enable_mcl = false;
    } else if (tasks == "tlr+mcl") {
        cfg.enable_tlr = true;
        cfg.enable_plr = false;
        cfg.enable_mcl = true;
    } else if (tasks != "all") {
        throw mmpt::InvalidArgument("unknown --tasks value: " + tasks);
    }

    fs::create_directories(out_dir);

    std::vector<double> grid{1.0};
    if (weights_grid) grid = {1.0, 0.5, 0.2, 0.1, 0.01};
    for (double w : grid) {
        mmpt::TrainConfig run_cfg = cfg;
        std::string subdir = out_dir;
        if (weights_grid) {
            run_cfg.w_contrast = w;
            char tag[48];
            std::snprintf(tag, sizeof(tag), "w_1_1_%g", w);
            subdir = out_dir + "/" + tag;
            fs::create_directories(subdir);
            std::cout << "=== weights 1:1:" << w << " ===\n";
        }
        mmpt::Trainer trainer = mmpt::Trainer::fresh(run_cfg);
        if (!dump_views_dir.empty()) dump_first_views(trainer, dump_views_dir);
        std::ofstream log(subdir + "/train_log.txt");
        if (!log) throw mmpt::IoError("cannot write train log in " + subdir);
        const auto entries = trainer.run(0, &log);
        for (const auto& e : entries) std::cout << mmpt::format_log_line(e) << "\n";
        mmpt::save_checkpoint(trainer, subdir + "/checkpoint.mmck");
        std::ofstream cfg_out(subdir + "/config.txt");
        cfg_out << run_cfg.to_text();
        if (weights_grid) {
            const double acc = mmpt::linear_probe(trainer, trainer.dataset(), run_cfg.probe_epochs);
            std::printf("weights 1:1:%g  linear_probe=%.4f\n", w, acc);
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MMPT multi-modal multi-task point cloud pre-training"};
    app.require_subcommand(1);

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "run joint pre-training");
    std::string config_path, out_dir = "out", tasks = "all", dump_views_dir;
    bool weights_grid = false;
    pre->add_option("--config", config_path, "config file (key = value lines)");
    pre->add_option("--out", out_dir, "output directory")->required();
    pre->add_option("--tasks", tasks, "all | tlr | tlr+plr | tlr+mcl");
    pre->add_flag("--weights-grid", weights_grid, "run the 1:1:{1,0.5,0.2,0.1,0.01} weight grid");
    pre->add_option("--dump-views", dump_views_dir, "write first rendered views as PGM files");

    // probe
    auto* probe = app.add_subcommand("probe", "linear probe a checkpoint");
    std::string ckpt_path;
    std::size_t probe_epochs = 0, probe_per_class = 0;
    std::uint64_t data_seed = 777;
    probe->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    probe->add_option("--epochs", probe_epochs, "probe training iterations (0 = config)");
    probe->add_option("--per-class", probe_per_class, "evaluation dataset size (0 = training dataset)");
    probe->add_option("--data-seed", data_seed, "seed for a fresh evaluation dataset");

    // fewshot
    auto* fewshot = app.add_subcommand("fewshot", "k-way m-shot episodes on a checkpoint");
    std::size_t way = 5, shot = 10, episodes = 10, fs_per_class = 30;
    std::uint64_t fs_seed = 2024;
    fewshot->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    fewshot->add_option("--way", way, "classes per episode");
    fewshot->add_option("--shot", shot, "support samples per class");
    fewshot->add_option("--episodes", episodes, "episode count");
    fewshot->add_option("--seed", fs_seed, "episode sampling seed");
    fewshot->add_option("--per-class", fs_per_class, "evaluation dataset size per class");
    fewshot->add_option("--data-seed", data_seed, "seed for the evaluation dataset");

    // recon-eval
    auto* recon = app.add_subcommand("recon-eval", "masked reconstruction metric table");
    recon->add_option("--ckpt", ckpt_path, "checkpoint file")->required();

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    double gc_tol = 1e-4;
    gc->add_option("--tol", gc_tol, "max relative error tolerance");

    // embed
    auto* embed = app.add_subcommand("embed", "dump projected features per sample");
    std::string embed_out;
    embed->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    embed->add_option("--out", embed_out, "output file")->required();

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate and export a synthetic dataset");
    std::string gen_out;
    std::size_t gen_per_class = 10, gen_points = 512;
    std::uint64_t gen_seed = 42;
    double gen_noise = 0.02;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--per-class", gen_per_class, "samples per class");
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--points", gen_points, "points per cloud");
    gen->add_option("--noise", gen_noise, "surface noise sigma");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (pre->parsed()) return run_pretrain(config_path, out_dir, tasks, weights_grid, dump_views_dir);

        if (probe->parsed()) {
            mmpt::Trainer trainer = mmpt::load_checkpoint(ckpt_path);
            const auto data = eval_dataset(trainer.config(), probe_per_class, data_seed);
            const std::size_t epochs = probe_epochs ? probe_epochs : trainer.config().probe_epochs;
            const double acc = mmpt::linear_probe(trainer, data, epochs);
            std::printf("linear_probe accuracy=%.4f (test n=%zu)\n", acc,
                        data.indices_of(mmpt::Split::Test).size());
            return 0;
        }

        if (fewshot->parsed()) {
            mmpt::Trainer trainer = mmpt::load_checkpoint(ckpt_path);
            const auto data = eval_dataset(trainer.config(), fs_per_class, data_seed);
            const auto res = mmpt::few_shot_eval(trainer, data, way, shot, episodes, fs_seed);
            std::printf("%zu-way %zu-shot over %zu episodes: %.4f +/- %.4f\n", way, shot, episodes,
                        res.mean, res.stddev);
            return 0;
        }

        if (recon->parsed()) {
            mmpt::Trainer trainer = mmpt::load_checkpoint(ckpt_path);
            const auto table = mmpt::recon_eval(trainer, trainer.dataset());
            std::printf("%-10s %6s %14s %14s %12s\n", "class", "n", "CD-l1 x1e3", "CD-l2 x1e3",
                        "F@1%");
            for (const auto& row : table.rows)
                std::printf("%-10s %6zu %14.4f %14.4f %12.4f\n", row.name.c_str(), row.count,
                            row.cd_l1_x1e3, row.cd_l2_x1e3, row.fscore_at_1pct);
            return 0;
        }

        if (gc->parsed()) {
            const auto suite = mmpt::run_gradient_suite(1e-5, gc_tol);
            for (const auto& e : suite.entries)
                std::printf("[%s] %-18s max_rel_err=%.3e (tol %.1e)\n", e.pass ? "PASS" : "FAIL",
                            e.name.c_str(), e.max_rel_err, e.tol);
            if (!suite.all_pass) return 2;
            return 0;
        }

        if (embed->parsed()) {
            mmpt::Trainer trainer = mmpt::load_checkpoint(ckpt_path);
            mmpt::embed_dump(trainer, trainer.dataset(), embed_out);
            std::printf("wrote %zu embedding lines to %s\n", trainer.dataset().size(),
                        embed_out.c_str());
            return 0;
        }

        if (gen->parsed()) {
            const auto ds = mmpt::build_dataset(gen_per_class, gen_points, gen_noise, 0.8, 0.1, 0.1,
                                                gen_seed);
            mmpt::save_dataset(ds, gen_out);
            std::printf("wrote %zu clouds + manifest to %s\n", ds.size(), gen_out.c_str());
            return 0;
        }
    } catch (const mmpt::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 2;
    } catch (const mmpt::IoError& e) {
        std::cerr << "io failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
