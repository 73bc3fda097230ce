#pragma once

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "mmpt/config.hpp"
#include "mmpt/optim.hpp"
#include "mmpt/synthetic.hpp"
#include "mmpt/tasks.hpp"

namespace mmpt {

namespace detail {
constexpr std::uint64_t kStepSalt = 0x57e9000000000000ull;
constexpr std::uint64_t kEpochSalt = 0xe90c000000000000ull;
constexpr std::uint64_t kInitSalt = 0x1417000000000000ull;
}  // namespace detail

struct TrainLogEntry {
    std::size_t step = 0;  // 1-based in logs
    double lr = 0.0;
    LossReport losses;
};

inline std::string format_log_line(const TrainLogEntry& e) {
    char buf[320];
    std::snprintf(buf, sizeof(buf),
                  "step=%zu lr=%.10g rec_cd=%.10g rec_bce=%.10g moco=%.10g iml=%.10g cml=%.10g "
                  "joint=%.10g",
                  e.step, e.lr, e.losses.rec_cd, e.losses.rec_bce, e.losses.moco, e.losses.iml,
                  e.losses.cml, e.losses.joint);
    return buf;
}

// Joint multi-task pre-training. All per-step randomness derives from
// (seed, step), so a resumed trainer replays the exact remaining schedule.
class Trainer {
  public:
    static Trainer fresh(const TrainConfig& cfg) {
        cfg.require_valid();
        if (!cfg.enable_tlr && !cfg.enable_plr && !cfg.enable_mcl)
            throw InvalidArgument("Trainer: all tasks disabled");
        Trainer t;
        t.cfg_ = cfg;
        t.data_ = build_dataset(cfg.per_class, cfg.n_points, cfg.noise_sigma, cfg.frac_train,
                                cfg.frac_val, cfg.frac_test, cfg.seed);
        t.train_indices_ = t.data_.indices_of(Split::Train);
        if (t.train_indices_.size() < cfg.batch_size)
            throw InvalidArgument("Trainer: train split smaller than one batch");
        Rng init_rng = Rng::substream(cfg.seed ^ detail::kInitSalt, 0);
        t.model_ = Model::register_params(t.state_, cfg.model_cfg(), init_rng);
        t.keys_ = MomentumKeys::init(t.state_, cfg.model_cfg(), cfg.moco_momentum,
                                     cfg.queue_capacity);
        t.key_model_ = Model::bind_key_scope(t.keys_.key_state, cfg.model_cfg());
        t.opt_ = AdamW(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
        t.opt_.init(t.state_.params());
        return t;
    }

    std::size_t steps_per_epoch() const { return train_indices_.size() / cfg_.batch_size; }

    std::size_t total_planned_steps() const {
        return cfg_.max_steps > 0 ? cfg_.max_steps : cfg_.epochs * steps_per_epoch();
    }

    std::size_t step_count() const { return step_; }
    const TrainConfig& config() const { return cfg_; }
    const Dataset& dataset() const { return data_; }
    ModelState& state() { return state_; }
    const ModelState& state() const { return state_; }
    const Model& model() const { return model_; }
    MomentumKeys& keys() { return keys_; }
    const MomentumKeys& keys() const { return keys_; }
    AdamW& optimizer() { return opt_; }
    const AdamW& optimizer() const { return opt_; }
    void set_step_count(std::size_t s) { step_ = s; }

    // One optimization step over the next batch.
    TrainLogEntry step_once() {
        const std::size_t spe = steps_per_epoch();
        const std::size_t epoch = step_ / spe;
        const std::size_t pos = step_ % spe;
        std::vector<std::size_t> order = train_indices_;
        Rng epoch_rng = Rng::substream(cfg_.seed ^ detail::kEpochSalt, epoch);
        epoch_rng.shuffle(order);
        std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(pos * cfg_.batch_size),
                                       order.begin() + static_cast<std::ptrdiff_t>((pos + 1) * cfg_.batch_size));

        Rng rng = Rng::substream(cfg_.seed ^ detail::kStepSalt, step_);
        const PipelineConfig pc = cfg_.pipeline();
        const LossWeights w = cfg_.weights();
        const double lr_t = cosine_lr(cfg_.lr, step_, total_planned_steps(), cfg_.lr_floor);

        Graph g;
        Var zero = g.constant_scalar(0.0);
        Var cd = zero, bce = zero, moco = zero, iml = zero, cml = zero;
        std::vector<Var> s3d_rows, z3d_rows, z2d_rows;
        std::vector<Tensor> key_rows;
        const bool need_s3d = cfg_.enable_plr || cfg_.enable_mcl;

        for (std::size_t bi = 0; bi < batch.size(); ++bi) {
            const PointCloud& cloud = data_.clouds[batch[bi]];
            if (cfg_.enable_tlr) {
                TlrForward t = tlr_forward(g, model_, cloud, pc, rng, true);
                cd = g.add(cd, t.cd_loss);
            }
            if (need_s3d) {
                PlrForward p = plr_forward(g, model_, cloud, pc, rng, true);
                if (cfg_.enable_plr) {
                    Var q = cfg_.focal ? lossops::query_focal(g, p.probs,
                                                              g.constant(p.queries.labels),
                                                              cfg_.focal_gamma, cfg_.focal_alpha)
                                       : p.bce;
                    bce = g.add(bce, q);
                }
                s3d_rows.push_back(p.s3d);
            }
            if (cfg_.enable_plr) {
                Graph kg;  // value-only pass through the momentum copy
                Var ks = masked_cls_s3d(kg, key_model_, cloud, pc, rng, true);
                key_rows.push_back(kg.value(ks));
            }
            if (cfg_.enable_mcl) {
                PointCloud view1 = augment(cloud, pc.aug, rng);
                PointCloud view2 = augment(cloud, pc.aug, rng);
                z3d_rows.push_back(mcl_project_views(g, model_, view1, view2, pc, rng, true));
                z2d_rows.push_back(mcl_project_images(
                    g, model_, render_views(cloud, pc.n_views, pc.view_res, pc.view_res, rng)));
            }
        }

        const double inv_b = 1.0 / static_cast<double>(batch.size());
        if (cfg_.enable_tlr) cd = g.scale(cd, inv_b);
        if (cfg_.enable_plr) bce = g.scale(bce, inv_b);
        Var s3{};
        if (need_s3d) s3 = lossops::center_rows(g, g.concat_rows(s3d_rows));
        if (cfg_.enable_plr) {
            Tensor keys_pos({key_rows.size(), cfg_.proj_dim});
            for (std::size_t i = 0; i < key_rows.size(); ++i)
                for (std::size_t j = 0; j < cfg_.proj_dim; ++j)
                    keys_pos.data[i * cfg_.proj_dim + j] = key_rows[i].data[j];
            center_key_batch(keys_pos);
            moco = lossops::moco_loss(g, s3, g.constant(keys_pos), g.constant(keys_.snapshot()),
                                      pc.tau);
            key_rows.clear();
            for (std::size_t i = 0; i < keys_pos.rows(); ++i) {
                Tensor row({1, cfg_.proj_dim});
                for (std::size_t j = 0; j < cfg_.proj_dim; ++j) row.data[j] = keys_pos.at(i, j);
                key_rows.push_back(std::move(row));
            }
        }
        if (cfg_.enable_mcl) {
            Var z3 = lossops::center_rows(g, g.concat_rows(z3d_rows));
            Var z2 = lossops::center_rows(g, g.concat_rows(z2d_rows));
            iml = lossops::ntxent_intra(g, z3, s3, pc.tau);
            cml = lossops::ntxent_cross(g, s3, z2, pc.tau);
        }

        Var joint = lossops::joint(g, cd, bce, moco, iml, cml, w);

        TrainLogEntry entry;
        entry.step = step_ + 1;
        entry.lr = lr_t;
        entry.losses.rec_cd = g.value(cd).item();
        entry.losses.rec_bce = g.value(bce).item();
        entry.losses.moco = g.value(moco).item();
        entry.losses.iml = g.value(iml).item();
        entry.losses.cml = g.value(cml).item();
        entry.losses.joint = g.value(joint).item();

        state_.zero_grads();
        g.backward(joint);
        auto params = state_.params();
        opt_.step(params, lr_t);

        if (cfg_.enable_plr) {
            keys_.ema_update(state_);
            for (const Tensor& k : key_rows) keys_.push(k);
        }
        ++step_;
        return entry;
    }

    // Runs until `until_step` (or the planned total when 0), emitting one log
    // line per step. A non-finite loss aborts with a diagnostic dump.
    std::vector<TrainLogEntry> run(std::size_t until_step = 0, std::ostream* log = nullptr) {
        const std::size_t target = until_step > 0 ? until_step : total_planned_steps();
        std::vector<TrainLogEntry> entries;
        while (step_ < target) {
            try {
                TrainLogEntry e = step_once();
                entries.push_back(e);
                if (log) (*log) << format_log_line(e) << "\n";
            } catch (const NumericError& err) {
                std::cerr << "numeric failure at step " << (step_ + 1) << ": " << err.what() << "\n";
                if (!entries.empty())
                    std::cerr << "last good step: " << format_log_line(entries.back()) << "\n";
                throw;
            }
        }
        return entries;
    }

  private:
    static void center_key_batch(Tensor& keys) {
        if (keys.rows() < 2) return;
        for (std::size_t j = 0; j < keys.cols(); ++j) {
            double mean = 0.0;
            for (std::size_t i = 0; i < keys.rows(); ++i) mean += keys.at(i, j);
            mean /= static_cast<double>(keys.rows());
            for (std::size_t i = 0; i < keys.rows(); ++i) keys.at(i, j) -= mean;
        }
    }

    TrainConfig cfg_;
    Dataset data_;
    std::vector<std::size_t> train_indices_;
    ModelState state_;
    Model model_;
    MomentumKeys keys_;
    Model key_model_;
    AdamW opt_;
    std::size_t step_ = 0;
};

}  // namespace mmpt
