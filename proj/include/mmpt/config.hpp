#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mmpt/backbone.hpp"
#include "mmpt/losses.hpp"
#include "mmpt/tasks.hpp"

namespace mmpt {

// Every hyperparameter in one serializable record. The text form is flat
// "key = value" lines with '#' comments; unknown keys are rejected.
struct TrainConfig {
    std::string preset = "desk";
    std::uint64_t seed = 42;

    // optimizer / schedule
    std::size_t epochs = 20;
    std::size_t max_steps = 200;  // 0 = run all epochs
    std::size_t batch_size = 4;
    double lr = 5e-4;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double lr_floor = 1e-6;

    // geometry
    std::size_t n_points = 512;
    std::size_t m_groups = 32;
    std::size_t k_neighbors = 16;
    double mask_ratio = 0.8;

    // backbone
    std::size_t depth = 4;
    std::size_t dim = 64;
    std::size_t heads = 4;
    std::size_t ffn_ratio = 4;
    std::size_t decoder_depth = 2;
    double drop_path = 0.1;

    // tasks
    std::size_t n_real = 16;
    std::size_t n_fake = 16;
    std::size_t n_views = 1;
    std::size_t view_res = 32;
    std::size_t proj_dim = 32;
    double tau = 0.1;
    bool enable_tlr = true;
    bool enable_plr = true;
    bool enable_mcl = true;

    // losses
    double alpha = 1.0;
    double beta = 1.0;
    double w_contrast = 0.1;
    bool focal = false;
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;

    // momentum keys
    double moco_momentum = 0.999;
    std::size_t queue_capacity = 256;

    // dataset
    std::size_t per_class = 10;
    double noise_sigma = 0.02;
    double frac_train = 0.8;
    double frac_val = 0.1;
    double frac_test = 0.1;

    // augmentation
    double aug_scale_lo = 0.8;
    double aug_scale_hi = 1.25;
    double aug_rot_max = 3.141592653589793;
    double aug_translate = 0.2;
    double aug_dropout = 0.1;
    double aug_elastic_granularity = 0.4;
    double aug_elastic_magnitude = 0.05;
    double aug_jitter_sigma = 0.005;

    // linear probe
    std::size_t probe_epochs = 300;
    double probe_lr = 0.05;

    void require_valid() const {
        if (lr <= 0) throw InvalidArgument("TrainConfig: lr must be positive");
        if (epochs < 1) throw InvalidArgument("TrainConfig: epochs must be >= 1");
        if (batch_size < 1) throw InvalidArgument("TrainConfig: batch_size must be >= 1");
        if (enable_mcl && batch_size < 2)
            throw InvalidArgument("TrainConfig: contrastive terms need batch_size >= 2");
        pipeline().require_valid();
        model_cfg().bb.require_valid();
        weights().require_valid();
    }

    PipelineConfig pipeline() const {
        PipelineConfig pc;
        pc.m_groups = m_groups;
        pc.k_neighbors = k_neighbors;
        pc.mask_ratio = mask_ratio;
        pc.n_real = n_real;
        pc.n_fake = n_fake;
        pc.n_views = n_views;
        pc.view_res = view_res;
        pc.tau = tau;
        pc.aug.scale_lo = aug_scale_lo;
        pc.aug.scale_hi = aug_scale_hi;
        pc.aug.rotation_max_angle = aug_rot_max;
        pc.aug.translation_range = aug_translate;
        pc.aug.dropout_prob = aug_dropout;
        pc.aug.elastic_granularity = aug_elastic_granularity;
        pc.aug.elastic_magnitude = aug_elastic_magnitude;
        pc.aug.jitter_sigma = aug_jitter_sigma;
        return pc;
    }

    ModelConfig model_cfg() const {
        ModelConfig mc;
        mc.bb.depth = depth;
        mc.bb.dim = dim;
        mc.bb.heads = heads;
        mc.bb.ffn_ratio = ffn_ratio;
        mc.bb.decoder_depth = decoder_depth;
        mc.bb.drop_path = drop_path;
        mc.k_neighbors = k_neighbors;
        mc.proj_dim = proj_dim;
        return mc;
    }

    LossWeights weights() const { return LossWeights{alpha, beta, w_contrast}; }

    static TrainConfig desk() { return TrainConfig{}; }

    // Full-size configuration reported for the method; selectable but not
    // exercised by tests.
    static TrainConfig paper() {
        TrainConfig c;
        c.preset = "paper";
        c.depth = 12;
        c.dim = 384;
        c.heads = 6;
        c.decoder_depth = 4;
        c.n_points = 1024;
        c.m_groups = 64;
        c.k_neighbors = 32;
        c.epochs = 100;
        c.max_steps = 0;
        c.per_class = 100;
        c.proj_dim = 128;
        return c;
    }

    static TrainConfig from_preset(const std::string& name) {
        if (name == "desk") return desk();
        if (name == "paper") return paper();
        throw InvalidArgument("unknown preset: " + name);
    }

    std::string to_text() const;
    static TrainConfig from_text(const std::string& text);
    static TrainConfig from_file(const std::string& path);
};

namespace detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct ConfigIo {
    // (key, getter-as-string, setter-from-string) triplets
    template <typename T>
    static std::string to_string_value(const T& v) {
        if constexpr (std::is_same_v<T, double>) return fmt_double(v);
        else if constexpr (std::is_same_v<T, bool>) return v ? "true" : "false";
        else if constexpr (std::is_same_v<T, std::string>) return v;
        else return std::to_string(v);
    }

    template <typename T>
    static void from_string_value(const std::string& s, T& out) {
        if constexpr (std::is_same_v<T, double>) {
            std::size_t pos = 0;
            out = std::stod(s, &pos);
            if (pos != s.size()) throw InvalidArgument("bad numeric value: " + s);
        } else if constexpr (std::is_same_v<T, bool>) {
            if (s == "true" || s == "1") out = true;
            else if (s == "false" || s == "0") out = false;
            else throw InvalidArgument("bad boolean value: " + s);
        } else if constexpr (std::is_same_v<T, std::string>) {
            out = s;
        } else {
            std::size_t pos = 0;
            const unsigned long long v = std::stoull(s, &pos);
            if (pos != s.size()) throw InvalidArgument("bad integer value: " + s);
            out = static_cast<T>(v);
        }
    }
};

// X-macro style field table keeps serialize/parse/round-trip in lockstep.
#define MMPT_CONFIG_FIELDS(X)      \
    X(preset)                      \
    X(seed)                        \
    X(epochs)                      \
    X(max_steps)                   \
    X(batch_size)                  \
    X(lr)                          \
    X(weight_decay)                \
    X(beta1)                       \
    X(beta2)                       \
    X(adam_eps)                    \
    X(lr_floor)                    \
    X(n_points)                    \
    X(m_groups)                    \
    X(k_neighbors)                 \
    X(mask_ratio)                  \
    X(depth)                       \
    X(dim)                         \
    X(heads)                       \
    X(ffn_ratio)                   \
    X(decoder_depth)               \
    X(drop_path)                   \
    X(n_real)                      \
    X(n_fake)                      \
    X(n_views)                     \
    X(view_res)                    \
    X(proj_dim)                    \
    X(tau)                         \
    X(enable_tlr)                  \
    X(enable_plr)                  \
    X(enable_mcl)                  \
    X(alpha)                       \
    X(beta)                        \
    X(w_contrast)                  \
    X(focal)                       \
    X(focal_gamma)                 \
    X(focal_alpha)                 \
    X(moco_momentum)               \
    X(queue_capacity)              \
    X(per_class)                   \
    X(noise_sigma)                 \
    X(frac_train)                  \
    X(frac_val)                    \
    X(frac_test)                   \
    X(aug_scale_lo)                \
    X(aug_scale_hi)                \
    X(aug_rot_max)                 \
    X(aug_translate)               \
    X(aug_dropout)                 \
    X(aug_elastic_granularity)     \
    X(aug_elastic_magnitude)       \
    X(aug_jitter_sigma)            \
    X(probe_epochs)                \
    X(probe_lr)

}  // namespace detail

inline std::string TrainConfig::to_text() const {
    std::ostringstream os;
#define MMPT_EMIT(field) os << #field << " = " << detail::ConfigIo::to_string_value(field) << "\n";
    MMPT_CONFIG_FIELDS(MMPT_EMIT)
#undef MMPT_EMIT
    return os.str();
}

inline TrainConfig TrainConfig::from_text(const std::string& text) {
    std::vector<std::pair<std::string, std::string>> pairs;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            bool blank = true;
            for (char c : line)
                if (!std::isspace(static_cast<unsigned char>(c))) blank = false;
            if (blank) continue;
            throw InvalidArgument("config line is not 'key = value': " + line);
        }
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        pairs.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }

    // preset applies first, everything else overrides in file order
    TrainConfig cfg;
    for (const auto& [k, v] : pairs)
        if (k == "preset") cfg = from_preset(v);
    for (const auto& [k, v] : pairs) {
        bool matched = false;
#define MMPT_PARSE(field)                                        \
        if (k == #field) {                                       \
            detail::ConfigIo::from_string_value(v, cfg.field);   \
            matched = true;                                      \
        }
        MMPT_CONFIG_FIELDS(MMPT_PARSE)
#undef MMPT_PARSE
        if (!matched) throw InvalidArgument("unknown config key: " + k);
    }
    return cfg;
}

inline TrainConfig TrainConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config: " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return from_text(os.str());
}

}  // namespace mmpt
