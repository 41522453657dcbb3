#pragma once

#include <map>
#include <string>
#include <vector>

#include "pvm/config.hpp"
#include "pvm/datagen.hpp"
#include "pvm/models.hpp"

namespace pvm {

struct ClsSample {
    MaskedTensor<float> x;
    int label = 0;
};

struct ClsData {
    std::vector<ClsSample> train, test;
};

struct DepthData {
    std::vector<DepthSample> train, test;
};

/// Deterministic dataset materialization from the config (masks applied at
/// both train and test time for classification).
ClsData build_cls_data(const ExperimentConfig& cfg);
DepthData build_depth_data(const ExperimentConfig& cfg);

struct RunSummary {
    std::string run_id;
    uint64_t seed = 0;
    Variant variant = Variant::Pvm;
    std::vector<double> train_loss_per_epoch;
    std::map<std::string, double> final_test;  // metric -> value
    std::string metrics_path;
    std::string checkpoint_dir;
};

/// Trains one (variant, seed) run: writes metrics JSONL and a checkpoint,
/// returns the summary. Deterministic given config + seed.
RunSummary train_one(const ExperimentConfig& cfg, Variant variant, uint64_t seed);

/// Trains every variant x seed combination of the config.
std::vector<RunSummary> cmd_train(const ExperimentConfig& cfg);

struct EvalResult {
    std::string run_id;
    uint64_t seed = 0;
    std::string regime;
    std::map<std::string, double> metrics;
    std::string metrics_path;
};

/// Evaluates existing checkpoints under a stress-mask regime
/// ("easy" | "hard" | "extreme"); empty regime evaluates with the
/// training-time mask policy.
std::vector<EvalResult> cmd_eval(const ExperimentConfig& cfg, const std::string& regime);

struct AblationRow {
    TokenPadding padding;
    double mean_rmse = 0.0;
    double reference_rmse = 0.0;  // full-scale reference, context only
};

struct AblationReport {
    std::vector<AblationRow> rows;  // zero, mean, learned
    std::string table_text;
    std::string table_path;
};

/// Trains the depth model three times (zero/mean/learned token padding)
/// with identical seeds and emits the comparison table.
AblationReport cmd_ablate_padding(const ExperimentConfig& cfg);

}  // namespace pvm
