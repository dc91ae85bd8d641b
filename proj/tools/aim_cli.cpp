// aim_cli.cpp — command-line entry point.
//
// Subcommands: gen-data, train, eval, epg, export-masks, compare. Runs are
// described by a JSON config (--config), tweakable with repeated
// --set key.path=value overrides plus --seed / --variant shortcuts. eval-side
// commands read the config snapshot embedded in the checkpoint, with the same
// override flags applied on top.

#include <cstdio>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "aim/evaluator.hpp"
#include "aim/trainer.hpp"

namespace {

struct CommonFlags {
    std::string config_path;
    std::vector<std::string> overrides;
    int64_t seed = -1;
    std::string variant;

    void attach(CLI::App* cmd, bool config_required) {
        auto* c = cmd->add_option("--config", config_path, "JSON run configuration");
        if (config_required) c->required();
        cmd->add_option("--set", overrides, "key.path=value override (repeatable)");
        cmd->add_option("--seed", seed, "override the run seed");
        cmd->add_option("--variant", variant,
                        "model variant: topdown|bottom_up|single_estimator|baseline");
    }

    // Folds the shortcut flags into the --set override list.
    std::vector<std::string> all_overrides() const {
        std::vector<std::string> out = overrides;
        if (seed >= 0) out.push_back("seed=" + std::to_string(seed));
        if (!variant.empty()) out.push_back("topdown.variant=" + variant);
        return out;
    }

    aim::RunConfig load() const { return aim::load_run_config(config_path, all_overrides()); }

    // Config for checkpoint-consuming commands: the embedded snapshot plus
    // any overrides given on the command line.
    aim::RunConfig from_checkpoint(const aim::CheckpointData& ck) const {
        nlohmann::json j = config_path.empty() ? ck.config : aim::read_json_file(config_path);
        for (const auto& kv : all_overrides()) aim::apply_override(j, kv);
        return aim::parse_run_config(j);
    }
};

void print_report(const aim::EvalReport& rep, const std::string& split) {
    std::printf("split %s: %lld samples\n", split.c_str(),
                static_cast<long long>(rep.samples));
    std::printf("  accuracy        %.4f\n", rep.accuracy);
    std::printf("  worst-group     %.4f\n", rep.worst_group);
    for (const auto& [gid, acc] : rep.groups.per_group) {
        std::printf("    group %lld: %.4f (%lld samples)\n", static_cast<long long>(gid), acc,
                    static_cast<long long>(rep.groups.group_sizes.at(gid)));
    }
    for (int64_t gid : rep.groups.empty_groups) {
        std::printf("    group %lld: empty (excluded)\n", static_cast<long long>(gid));
    }
    std::printf("  loss total %.6f | final %.6f | stage %.6f | mask %.6f | tau %.4f\n",
                rep.loss_total, rep.loss_final, rep.loss_stage, rep.loss_mask, rep.tau);
    for (const auto& [stage, r] : rep.active) {
        std::printf("  stage %lld mean active ratio %.4f\n", static_cast<long long>(stage), r);
    }
    if (rep.has_epg) {
        if (rep.mask_epg_count > 0) {
            std::printf("  mask-EPG     %.4f over %lld samples (%lld degenerate)\n",
                        rep.mask_epg_mean, static_cast<long long>(rep.mask_epg_count),
                        static_cast<long long>(rep.mask_epg_degenerate));
        }
        if (rep.gradcam_epg_count > 0) {
            std::printf("  GradCAM-EPG  %.4f over %lld samples (%lld degenerate)\n",
                        rep.gradcam_epg_mean, static_cast<long long>(rep.gradcam_epg_count),
                        static_cast<long long>(rep.gradcam_epg_degenerate));
        }
        if (rep.missing_masks > 0) {
            std::printf("  %lld samples had no ground-truth mask (EPG skipped)\n",
                        static_cast<long long>(rep.missing_masks));
        }
    }
}

nlohmann::json report_json(const aim::EvalReport& rep) {
    nlohmann::json j;
    j["samples"] = rep.samples;
    j["accuracy"] = rep.accuracy;
    j["worst_group"] = rep.worst_group;
    nlohmann::json pg = nlohmann::json::object();
    for (const auto& [gid, acc] : rep.groups.per_group) pg[std::to_string(gid)] = acc;
    j["per_group"] = pg;
    j["empty_groups"] = rep.groups.empty_groups;
    j["loss"] = {{"total", rep.loss_total},
                 {"final", rep.loss_final},
                 {"stage", rep.loss_stage},
                 {"mask", rep.loss_mask}};
    j["tau"] = rep.tau;
    nlohmann::json act = nlohmann::json::object();
    for (const auto& [stage, r] : rep.active) act[std::to_string(stage)] = r;
    j["active_ratios"] = act;
    if (rep.has_epg) {
        j["epg"] = {{"mask_mean", rep.mask_epg_mean},
                    {"mask_count", rep.mask_epg_count},
                    {"mask_degenerate", rep.mask_epg_degenerate},
                    {"gradcam_mean", rep.gradcam_epg_mean},
                    {"gradcam_count", rep.gradcam_epg_count},
                    {"gradcam_degenerate", rep.gradcam_epg_degenerate},
                    {"missing_masks", rep.missing_masks}};
    }
    return j;
}

aim::Manifest manifest_for(const aim::RunConfig& cfg) {
    return aim::load_manifest(
        (std::filesystem::path(cfg.data_root) / "manifest.csv").string());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"aim: masked top-down image classification on synthetic spurious data"};
    app.require_subcommand(1);

    CommonFlags gen_flags, train_flags, eval_flags, epg_flags, export_flags, compare_flags;

    CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
    gen_flags.attach(gen, /*config_required=*/false);

    CLI::App* train = app.add_subcommand("train", "train a model");
    train_flags.attach(train, /*config_required=*/false);

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    std::string eval_ckpt, eval_split = "test", eval_out;
    bool eval_no_epg = false;
    eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
    eval_cmd->add_option("--split", eval_split, "train|val|test (default test)");
    eval_cmd->add_option("--out", eval_out, "also write the report as JSON");
    eval_cmd->add_flag("--no-epg", eval_no_epg, "skip attribution scoring");
    eval_flags.attach(eval_cmd, false);

    CLI::App* epg_cmd = app.add_subcommand("epg", "attribution (EPG) report for a checkpoint");
    std::string epg_ckpt, epg_split = "test";
    epg_cmd->add_option("--checkpoint", epg_ckpt, "checkpoint file")->required();
    epg_cmd->add_option("--split", epg_split, "train|val|test (default test)");
    epg_flags.attach(epg_cmd, false);

    CLI::App* exp = app.add_subcommand("export-masks", "write mask/attribution images");
    std::string exp_ckpt, exp_split = "test", exp_dir = "mask_export";
    int64_t exp_count = 8;
    exp->add_option("--checkpoint", exp_ckpt, "checkpoint file")->required();
    exp->add_option("--split", exp_split, "train|val|test (default test)");
    exp->add_option("--out-dir", exp_dir, "output directory");
    exp->add_option("--count", exp_count, "number of samples (default 8)");
    export_flags.attach(exp, false);

    CLI::App* cmp = app.add_subcommand("compare", "paired per-sample EPG table for two runs");
    std::string cmp_base, cmp_aim, cmp_split = "test", cmp_out = "epg_compare.csv";
    cmp->add_option("baseline", cmp_base, "baseline checkpoint")->required();
    cmp->add_option("aim", cmp_aim, "AIM checkpoint")->required();
    cmp->add_option("--split", cmp_split, "train|val|test (default test)");
    cmp->add_option("--out", cmp_out, "output CSV path");
    compare_flags.attach(cmp, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << "\n";
        return 2;
    }

    try {
        if (gen->parsed()) {
            aim::RunConfig cfg = gen_flags.load();
            aim::Manifest m = aim::generate_spurious_dataset(cfg.data, cfg.seed, cfg.data_root);
            std::printf("wrote %zu records under %s\n", m.records.size(), cfg.data_root.c_str());
            return 0;
        }
        if (train->parsed()) {
            aim::RunConfig cfg = train_flags.load();
            aim::TrainResult res = aim::train_run(cfg);
            std::printf("run dir: %s\n", res.run_dir.c_str());
            std::printf("best epoch %lld (val worst-group %.4f, accuracy %.4f), checkpoints: "
                        "%s, %s\n",
                        static_cast<long long>(res.best_epoch), res.best_selection.first,
                        res.best_selection.second, res.best_checkpoint.c_str(),
                        res.last_checkpoint.c_str());
            return 0;
        }
        if (eval_cmd->parsed()) {
            aim::CheckpointData ck = aim::load_checkpoint(eval_ckpt);
            aim::RunConfig cfg = eval_flags.from_checkpoint(ck);
            auto model = std::make_unique<aim::Model<float>>(cfg.model, cfg.seed);
            aim::restore_params(*model, ck.params);
            aim::EvalReport rep = aim::evaluate_split(*model, manifest_for(cfg), eval_split, cfg,
                                                      ck.epoch, !eval_no_epg);
            print_report(rep, eval_split);
            if (!eval_out.empty()) {
                std::ofstream f(eval_out);
                AIM_CHECK(f.good(), aim::IoError, "cannot open " << eval_out);
                f << report_json(rep).dump(2) << "\n";
            }
            return 0;
        }
        if (epg_cmd->parsed()) {
            aim::CheckpointData ck = aim::load_checkpoint(epg_ckpt);
            aim::RunConfig cfg = epg_flags.from_checkpoint(ck);
            auto model = std::make_unique<aim::Model<float>>(cfg.model, cfg.seed);
            aim::restore_params(*model, ck.params);
            aim::EvalReport rep = aim::evaluate_split(*model, manifest_for(cfg), epg_split, cfg,
                                                      ck.epoch, /*with_epg=*/true);
            if (rep.mask_epg_count > 0) {
                std::printf("mask-EPG    %.6f (%lld samples, %lld degenerate)\n",
                            rep.mask_epg_mean, static_cast<long long>(rep.mask_epg_count),
                            static_cast<long long>(rep.mask_epg_degenerate));
            }
            std::printf("GradCAM-EPG %.6f (%lld samples, %lld degenerate)\n",
                        rep.gradcam_epg_mean, static_cast<long long>(rep.gradcam_epg_count),
                        static_cast<long long>(rep.gradcam_epg_degenerate));
            if (rep.missing_masks > 0) {
                std::printf("%lld samples had no ground-truth mask\n",
                            static_cast<long long>(rep.missing_masks));
            }
            return 0;
        }
        if (exp->parsed()) {
            aim::CheckpointData ck = aim::load_checkpoint(exp_ckpt);
            aim::RunConfig cfg = export_flags.from_checkpoint(ck);
            auto model = std::make_unique<aim::Model<float>>(cfg.model, cfg.seed);
            aim::restore_params(*model, ck.params);
            const auto files = aim::export_masks(*model, manifest_for(cfg), exp_split, cfg,
                                                 exp_count, exp_dir);
            std::printf("wrote %zu files under %s\n", files.size(), exp_dir.c_str());
            return 0;
        }
        if (cmp->parsed()) {
            aim::CheckpointData ck_base = aim::load_checkpoint(cmp_base);
            aim::CheckpointData ck_aim = aim::load_checkpoint(cmp_aim);
            aim::RunConfig cfg_base = compare_flags.from_checkpoint(ck_base);
            aim::RunConfig cfg_aim = compare_flags.from_checkpoint(ck_aim);
            auto base_model = std::make_unique<aim::Model<float>>(cfg_base.model, cfg_base.seed);
            aim::restore_params(*base_model, ck_base.params);
            auto aim_model = std::make_unique<aim::Model<float>>(cfg_aim.model, cfg_aim.seed);
            aim::restore_params(*aim_model, ck_aim.params);
            aim::CompareResult res =
                aim::compare_runs(*base_model, cfg_base, *aim_model, cfg_aim,
                                  manifest_for(cfg_aim), cmp_split, ck_aim.epoch);
            aim::write_epg_scatter(cmp_out, res.records);
            std::printf("wrote %zu paired rows to %s (%lld skipped)\n", res.records.size(),
                        cmp_out.c_str(), static_cast<long long>(res.skipped));
            std::printf("mean EPG: baseline %.6f vs aim %.6f\n", res.mean_epg_baseline,
                        res.mean_epg_aim);
            return 0;
        }
    } catch (const aim::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
