#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pvm/datagen.hpp"
#include "pvm/models.hpp"

namespace pvm {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Declarative experiment description parsed from a plain-text key=value
/// file. Unknown keys are rejected; out_dir may be overridden by the
/// PVM_OUT environment variable.
struct ExperimentConfig {
    std::string task = "cls";  // cls | depth
    std::vector<Variant> variants = {Variant::Pvm};
    TokenPadding padding = TokenPadding::Learned;
    std::vector<uint64_t> seeds = {1};
    int epochs = 2;
    int batch_size = 16;
    double learning_rate = 1e-3;
    int threads = 2;
    std::string out_dir = "runs";

    // dataset
    int train_count = 1000;
    int test_count = 200;
    uint64_t data_seed = 11;
    int image_size = 0;  // 0 = task default (32 cls / 64 depth)
    int channels = 1;
    int classes = 10;
    double depth_density = 0.05;

    // mask policy (classification corruption)
    std::string mask_kind = "brush";  // brush | regime | sparse
    int mask_crop = 96;
    int mask_strokes = 3;
    int mask_width_min = 2;
    int mask_width_max = 5;
    int mask_min_valid_patch = 4;
    double mask_band_lo = 0.25;
    double mask_band_hi = 0.50;
    std::string mask_regime = "easy";
    double mask_density = 0.05;
    uint64_t mask_seed = 29;

    // model dims
    int model_patch = 4;
    int model_dim = 64;
    int model_expansion = 2;
    int model_state = 8;
    int model_blocks = 2;
    int model_feat = 4;
    int model_rpssb = 6;
    int model_pvmm = 2;
    int model_fill_kernel = 3;
    int model_fill_max_iters = 128;
    bool substitute_before_norm = true;

    int effective_image() const { return image_size > 0 ? image_size : (task == "cls" ? 32 : 64); }

    ClsConfig cls_config(Variant v) const;
    DepthConfig depth_config(Variant v) const;
    MaskPolicy image_mask_policy() const;

    void validate() const;
    /// Canonical sorted key=value text; excludes out_dir so relocating a run
    /// does not change identity.
    std::string canonical() const;
    std::string hash() const;

    std::string run_id(Variant v, uint64_t seed) const;
};

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::string& path);

/// The documented schema: one "key<TAB>description" line per key.
std::string config_schema_help();

}  // namespace pvm
