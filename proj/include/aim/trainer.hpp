// trainer.hpp — the training loop: AdamW with two learning-rate groups and
// decoupled weight decay, per-epoch cosine decay and τ annealing, metrics
// logging, NaN diagnostics, and best/last checkpointing.

#ifndef AIM_TRAINER_HPP
#define AIM_TRAINER_HPP

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "aim/evaluator.hpp"

namespace aim {

// Adam with decoupled weight decay. Moments are kept per parameter name;
// decay applies only to parameters flagged for it (conv/linear weights).
class AdamW {
  public:
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    void step(const std::vector<std::pair<Param<float>*, Tensor<float>>>& grads,
              double lr_backbone, double lr_topdown, double weight_decay) {
        ++step_count_;
        const double bc1 = 1.0 - std::pow(beta1, double(step_count_));
        const double bc2 = 1.0 - std::pow(beta2, double(step_count_));
        for (const auto& [p, g] : grads) {
            const double lr = p->group == ParamGroup::kBackbone ? lr_backbone : lr_topdown;
            Tensor<float>& m = moment(m_, *p);
            Tensor<float>& v = moment(v_, *p);
            for (int64_t i = 0; i < g.size(); ++i) {
                const double gi = double(g[i]);
                const double mi = beta1 * double(m[i]) + (1.0 - beta1) * gi;
                const double vi = beta2 * double(v[i]) + (1.0 - beta2) * gi * gi;
                m[i] = float(mi);
                v[i] = float(vi);
                double upd = (mi / bc1) / (std::sqrt(vi / bc2) + eps);
                if (p->decay) upd += weight_decay * double(p->value[i]);
                p->value[i] = float(double(p->value[i]) - lr * upd);
            }
        }
    }

    int64_t step_count() const { return step_count_; }

    std::vector<std::pair<std::string, Tensor<float>>> snapshot_m() const { return dump(m_); }
    std::vector<std::pair<std::string, Tensor<float>>> snapshot_v() const { return dump(v_); }

    void restore(int64_t steps, const std::vector<std::pair<std::string, Tensor<float>>>& m,
                 const std::vector<std::pair<std::string, Tensor<float>>>& v) {
        step_count_ = steps;
        m_.clear();
        v_.clear();
        for (const auto& [name, t] : m) m_.emplace(name, t.clone());
        for (const auto& [name, t] : v) v_.emplace(name, t.clone());
    }

  private:
    Tensor<float>& moment(std::map<std::string, Tensor<float>>& store, const Param<float>& p) {
        auto it = store.find(p.name);
        if (it == store.end()) {
            it = store.emplace(p.name, Tensor<float>::zeros(p.value.shape())).first;
        }
        return it->second;
    }

    static std::vector<std::pair<std::string, Tensor<float>>> dump(
        const std::map<std::string, Tensor<float>>& store) {
        std::vector<std::pair<std::string, Tensor<float>>> out;
        for (const auto& [name, t] : store) out.emplace_back(name, t);
        return out;
    }

    int64_t step_count_ = 0;
    std::map<std::string, Tensor<float>> m_, v_;
};

// Per-epoch cosine decay from the base rate to 0 over the run.
inline double cosine_lr(double base, int64_t epoch, int64_t total_epochs, bool enabled) {
    if (!enabled) return base;
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * double(epoch) / double(total_epochs)));
}

// ---------------------------------------------------------------------------
// Metrics table
// ---------------------------------------------------------------------------

// One row per (epoch, split). The active_s<i> columns are empty for stages
// without a mask so every variant emits the same schema.
class MetricsWriter {
  public:
    MetricsWriter() = default;

    MetricsWriter(const std::string& path, int64_t num_stages) : num_stages_(num_stages) {
        f_.open(path, std::ios::binary);
        AIM_CHECK(f_.good(), IoError, "cannot open " << path << " for writing");
        f_ << "epoch,split,loss_total,loss_final,loss_stage,loss_mask,accuracy,worst_group,tau";
        for (int64_t s = 0; s < num_stages_; ++s) f_ << ",active_s" << s;
        f_ << "\n";
        f_.flush();
    }

    void row(int64_t epoch, const std::string& split, const EvalReport& rep) {
        f_ << epoch << "," << split;
        for (double v : {rep.loss_total, rep.loss_final, rep.loss_stage, rep.loss_mask,
                         rep.accuracy, rep.worst_group, rep.tau}) {
            f_ << "," << fmt(v);
        }
        for (int64_t s = 0; s < num_stages_; ++s) {
            f_ << ",";
            const auto it = rep.active.find(s);
            if (it != rep.active.end()) f_ << fmt(it->second);
        }
        f_ << "\n";
        f_.flush();
        AIM_CHECK(f_.good(), IoError, "failed writing metrics table");
    }

  private:
    static std::string fmt(double v) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return buf;
    }

    std::ofstream f_;
    int64_t num_stages_ = 0;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainResult {
    std::string run_dir;
    std::string metrics_csv;
    std::string best_checkpoint, last_checkpoint;
    int64_t best_epoch = -1;
    // Selection key at best_epoch: val worst-group, ties broken by overall
    // accuracy so a 0-worst-group plateau still tracks the strongest model.
    std::pair<double, double> best_selection{-1.0, -1.0};
    EvalReport final_val;
};

namespace detail {

// In-memory split: undecoded 8-bit images to keep 4k samples affordable.
struct TrainSplit {
    std::vector<Tensor<uint8_t>> images;
    std::vector<int64_t> labels, groups;
};

inline TrainSplit load_train_split(const Manifest& m) {
    TrainSplit s;
    for (size_t i : split_indices(m, "train")) {
        const ManifestRecord& rec = m.records[i];
        s.images.push_back(read_ppm((std::filesystem::path(m.root) / rec.image).string()));
        s.labels.push_back(rec.label);
        s.groups.push_back(group_of(rec.label, rec.background));
    }
    AIM_CHECK(!s.images.empty(), ArgError, "train: no training records in manifest");
    return s;
}

// Assemble a float batch with optional horizontal flips; images whose source
// is larger than the model input are center-cropped.
inline Tensor<float> assemble_batch(const TrainSplit& split, const std::vector<int64_t>& order,
                                    size_t lo, size_t hi, int64_t input, bool hflip, Rng& aug) {
    const int64_t B = int64_t(hi - lo);
    Tensor<float> x({B, 3, input, input});
    for (size_t k = lo; k < hi; ++k) {
        const Tensor<uint8_t>& src = split.images[size_t(order[k])];
        const int64_t H = src.dim(1), W = src.dim(2);
        const int64_t y0 = (H - input) / 2, x0 = (W - input) / 2;
        AIM_CHECK(y0 >= 0 && x0 >= 0, ConfigError,
                  "train: image " << H << "x" << W << " smaller than input " << input);
        const bool flip = hflip && aug.uniform() < 0.5;
        const int64_t b = int64_t(k - lo);
        for (int64_t c = 0; c < 3; ++c) {
            for (int64_t y = 0; y < input; ++y) {
                for (int64_t xx = 0; xx < input; ++xx) {
                    const int64_t sx = flip ? (input - 1 - xx) : xx;
                    x[((b * 3 + c) * input + y) * input + xx] =
                        float(src[(c * H + y0 + y) * W + x0 + sx]) / 255.0f;
                }
            }
        }
    }
    return x;
}

}  // namespace detail

// Runs the full training loop described by the config. The run directory gets
// config.json (with the model-selection rule recorded), metrics.csv, and
// best/last checkpoints.
inline TrainResult train_run(const RunConfig& cfg) {
    cfg.validate();
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(cfg.train.out_dir, ec);
    AIM_CHECK(!ec, IoError, "cannot create " << cfg.train.out_dir << ": " << ec.message());

    const Manifest manifest = load_manifest(
        (fs::path(cfg.data_root) / "manifest.csv").string());
    detail::TrainSplit train_split = detail::load_train_split(manifest);
    const int64_t n_train = int64_t(train_split.images.size());
    const int64_t num_stages = cfg.model.backbone.num_stages();

    nlohmann::json snapshot = to_json(cfg);
    snapshot["model_selection"] = "best validation worst-group accuracy, ties broken by overall "
                                  "accuracy (worst-group equals overall when a split has a "
                                  "single group)";
    {
        std::ofstream f((fs::path(cfg.train.out_dir) / "config.json").string());
        AIM_CHECK(f.good(), IoError, "cannot write config snapshot");
        f << snapshot.dump(2) << "\n";
    }

    Model<float> model(cfg.model, cfg.seed);
    AdamW opt;
    Rng gate_rng = Rng::child(cfg.seed, 0x6A7E);
    Rng shuffle_rng = Rng::child(cfg.seed, 0x5F1E);
    Rng aug_rng = Rng::child(cfg.seed, 0xA06);
    MetricsWriter metrics((fs::path(cfg.train.out_dir) / "metrics.csv").string(), num_stages);

    TrainResult result;
    result.run_dir = cfg.train.out_dir;
    result.metrics_csv = (fs::path(cfg.train.out_dir) / "metrics.csv").string();
    result.best_checkpoint = (fs::path(cfg.train.out_dir) / "best.ckpt").string();
    result.last_checkpoint = (fs::path(cfg.train.out_dir) / "last.ckpt").string();

    std::vector<int64_t> order(static_cast<size_t>(n_train));
    for (int64_t i = 0; i < n_train; ++i) order[size_t(i)] = i;

    auto save = [&](const std::string& path, int64_t epoch) {
        CheckpointData ck;
        ck.epoch = epoch;
        ck.config = snapshot;
        ck.params = snapshot_params(model);
        ck.opt_step = opt.step_count();
        ck.opt_m = opt.snapshot_m();
        ck.opt_v = opt.snapshot_v();
        ck.rng_states["gate"] = gate_rng.state();
        ck.rng_states["shuffle"] = shuffle_rng.state();
        ck.rng_states["augment"] = aug_rng.state();
        save_checkpoint(path, ck);
    };

    for (int64_t epoch = 0; epoch < cfg.optimizer.epochs; ++epoch) {
        const double lr_b = cosine_lr(cfg.optimizer.lr_backbone, epoch, cfg.optimizer.epochs,
                                      cfg.optimizer.cosine);
        const double lr_t = cosine_lr(cfg.optimizer.lr_topdown, epoch, cfg.optimizer.epochs,
                                      cfg.optimizer.cosine);
        shuffle_rng.shuffle(order);

        EvalReport train_rep;
        train_rep.tau = anneal_tau(epoch, cfg.anneal);
        std::map<int64_t, double> ratio_sums;
        int64_t batch_index = 0;
        for (size_t lo = 0; lo < size_t(n_train); lo += size_t(cfg.optimizer.batch_size)) {
            const size_t hi = std::min(size_t(n_train), lo + size_t(cfg.optimizer.batch_size));
            Tensor<float> x = detail::assemble_batch(train_split, order, lo, hi,
                                                     cfg.model.backbone.input_size,
                                                     cfg.train.hflip, aug_rng);
            std::vector<int64_t> labels, groups;
            for (size_t k = lo; k < hi; ++k) {
                labels.push_back(train_split.labels[size_t(order[k])]);
                groups.push_back(train_split.groups[size_t(order[k])]);
            }
            auto out = model.forward(x, Mode::kTrain, &gate_rng);
            Graph<float>& g = *out.graph;
            LossBreakdown<float> bd =
                build_total_loss(g, out, labels, cfg.loss, epoch, cfg.anneal);
            if (!std::isfinite(bd.total_value())) {
                std::ostringstream terms;
                terms << "final_cls=" << bd.final_cls;
                for (const auto& [s, v] : bd.stage_cls) terms << " stage" << s << "_cls=" << v;
                for (const auto& [s, v] : bd.mask) terms << " stage" << s << "_mask=" << v;
                AIM_THROW(NumericError, "train: non-finite loss at epoch "
                                            << epoch << " batch " << batch_index << " ("
                                            << terms.str() << ")");
            }
            g.tape.backward(bd.total.id);
            std::vector<std::pair<Param<float>*, Tensor<float>>> grads;
            for (const auto& [p, id] : g.bound) grads.emplace_back(p, g.param_grad(*p));
            opt.step(grads, lr_b, lr_t, cfg.optimizer.weight_decay);

            const int64_t B = int64_t(hi - lo);
            train_rep.loss_total += bd.total_value() * double(B);
            train_rep.loss_final += bd.final_cls * double(B);
            for (const auto& [s, v] : bd.stage_cls) train_rep.loss_stage += v * double(B);
            for (const auto& [s, v] : bd.mask) train_rep.loss_mask += v * double(B);
            const Tensor<float>& logits = out.final_logits.val();
            for (int64_t b = 0; b < B; ++b) {
                int64_t arg = 0;
                for (int64_t c = 1; c < cfg.model.num_classes; ++c) {
                    if (logits.at(b, c) > logits.at(b, arg)) arg = c;
                }
                train_rep.predictions.push_back(arg);
                train_rep.labels.push_back(labels[size_t(b)]);
                train_rep.group_ids.push_back(groups[size_t(b)]);
            }
            for (const auto& [stage, ratios] : out.active_ratios) {
                for (double r : ratios) ratio_sums[stage] += r;
            }
            ++batch_index;
        }
        train_rep.samples = n_train;
        train_rep.loss_total /= double(n_train);
        train_rep.loss_final /= double(n_train);
        train_rep.loss_stage /= double(n_train);
        train_rep.loss_mask /= double(n_train);
        train_rep.groups = worst_group_accuracy(train_rep.predictions, train_rep.labels,
                                                train_rep.group_ids,
                                                all_groups(cfg.model.num_classes));
        train_rep.accuracy = train_rep.groups.overall;
        train_rep.worst_group = train_rep.groups.per_group.size() > 1 ? train_rep.groups.worst
                                                                      : train_rep.accuracy;
        for (const auto& [stage, sum] : ratio_sums) {
            train_rep.active[stage] = sum / double(n_train);
        }
        metrics.row(epoch, "train", train_rep);

        EvalReport val = evaluate_split(model, manifest, "val", cfg, epoch, /*with_epg=*/false);
        metrics.row(epoch, "val", val);
        result.final_val = val;

        const std::pair<double, double> selection{val.worst_group, val.accuracy};
        if (selection > result.best_selection) {
            result.best_selection = selection;
            result.best_epoch = epoch;
            save(result.best_checkpoint, epoch);
        }
    }
    save(result.last_checkpoint, cfg.optimizer.epochs - 1);
    return result;
}

}  // namespace aim

#endif  // AIM_TRAINER_HPP
