#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

namespace pvm {

/// One append-only measurement record; serialized as a JSON line.
struct MetricsRecord {
    std::string run_id;
    uint64_t seed = 0;
    int epoch = 0;
    std::string split;   // train | test | eval-<regime>
    std::string metric;  // loss | top1 | top5 | rmse | mae | ...
    double value = 0.0;
    int64_t wall_ms = 0;
};

class MetricsWriter {
public:
    explicit MetricsWriter(const std::string& path);
    void append(const MetricsRecord& r);
    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::ofstream os_;
};

std::vector<MetricsRecord> read_metrics(const std::string& path);

/// Deterministic payload for comparisons: the records re-serialized with
/// the wall-clock field removed.
std::string metrics_canonical_payload(const std::string& path);

}  // namespace pvm
