#pragma once

// Config -> typed settings for the generator and the trainer.

#include <string>
#include <vector>

#include "pseg/config.hpp"
#include "pseg/data_synth.hpp"
#include "pseg/trainer.hpp"

namespace pseg {

inline SynthConfig synth_config(const Config& c) {
    SynthConfig s;
    s.image_size = c.get_size("data.image_size");
    s.source_count = c.get_size("data.source_count");
    s.target_count = c.get_size("data.target_count");
    s.test_count = c.get_size("data.test_count");
    s.seed = c.get_u64("data.seed");
    s.source.mean = c.get_doubles("data.source_intensity");
    s.target.mean = c.get_doubles("data.target_intensity");
    s.source.noise = c.get_double("data.source_noise");
    s.target.noise = c.get_double("data.target_noise");
    s.target.bias = c.get_double("data.target_bias");
    try {
        validate(s);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return s;
}

inline TrainConfig train_config(const Config& c) {
    TrainConfig t;
    t.image_size = c.get_size("data.image_size");
    t.arch.embed_depth = c.get_size("model.embed_depth");
    t.arch.width = c.get_size("model.width");
    t.arch.head_width = c.get_size("model.head_width");
    t.disc_width = c.get_size("model.disc_width");
    if (t.arch.embed_depth == 0 || t.arch.width == 0 || t.arch.head_width == 0 || t.disc_width == 0) {
        throw ConfigError("model widths must be >= 1");
    }
    t.weights.lambda1 = c.get_double("train.lambda1");
    t.weights.lambda2 = c.get_double("train.lambda2");
    t.weights.seg = c.get_double("train.seg_weight");
    t.weights.cycle = c.get_double("train.cycle_weight");
    t.weights.adv_img = c.get_double("train.adv_img_weight");
    t.weights.adv_seg = c.get_double("train.adv_seg_weight");
    t.seg_loss.ce_weight = c.get_double("train.ce_weight");
    t.seg_loss.dice_weight = c.get_double("train.dice_weight");
    t.batch_size = c.get_size("train.batch_size");
    t.epochs = c.get_size("train.epochs");
    t.lr_g = c.get_double("train.lr_g");
    t.lr_d = c.get_double("train.lr_d");
    t.weight_decay = c.get_double("train.weight_decay");
    t.warmup_epochs = c.get_size("train.warmup_epochs");
    t.disc_start_epoch = c.get_size("train.disc_start_epoch");
    t.seed = c.get_u64("train.seed");
    t.augment = c.get_bool("train.augment");
    t.steps_per_epoch = c.get_size("train.steps_per_epoch");
    t.instrument = c.get_bool("train.instrument");
    t.dict_size = c.get_size("dict.size");
    t.topk = c.get_size("dict.topk");
    t.tau = c.get_double("dict.tau");
    t.align.confidence_threshold = c.get_double("dict.confidence");
    t.align.min_pixels = c.get_size("dict.min_pixels");
    t.align.include_background = c.get_bool("dict.include_background");
    t.source_queries = c.get_bool("dict.source_queries");
    t.target_queries = c.get_bool("dict.target_queries");
    t.eval_every = c.get_size("eval.every");
    t.max_features = c.get_size("eval.max_features");
    try {
        t.aggregation = parse_aggregation(c.get_string("dict.aggregation"));
        validate(t);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (c.get_string("model.precision") != "f32" && c.get_string("model.precision") != "f64") {
        throw ConfigError("model.precision must be f32 or f64");
    }
    return t;
}

struct AblationSettings {
    AblationGrid grid = AblationGrid::loss;
    std::vector<std::uint64_t> seeds;
    std::vector<std::size_t> sizes;
    double lambda1 = 0.05;
    double lambda2 = 0.02;
};

inline AblationSettings ablation_settings(const Config& c) {
    AblationSettings a;
    try {
        a.grid = parse_grid(c.get_string("ablate.grid"));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    for (double s : c.get_doubles("ablate.seeds")) {
        if (s < 0 || s != static_cast<double>(static_cast<std::uint64_t>(s))) {
            throw ConfigError("ablate.seeds must be non-negative integers");
        }
        a.seeds.push_back(static_cast<std::uint64_t>(s));
    }
    for (double s : c.get_doubles("ablate.sizes")) {
        if (s < 1 || s != static_cast<double>(static_cast<std::size_t>(s))) {
            throw ConfigError("ablate.sizes must be positive integers");
        }
        a.sizes.push_back(static_cast<std::size_t>(s));
    }
    a.lambda1 = c.get_double("ablate.lambda1");
    a.lambda2 = c.get_double("ablate.lambda2");
    if (!(a.lambda1 >= 0) || !(a.lambda2 >= 0)) throw ConfigError("ablate lambdas must be >= 0");
    return a;
}

}  // namespace pseg
