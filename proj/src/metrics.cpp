#include "pvm/metrics.hpp"

#include <json.hpp>

#include "pvm/tensor.hpp"

namespace pvm {

using nlohmann::json;

MetricsWriter::MetricsWriter(const std::string& path) : path_(path), os_(path, std::ios::trunc) {
    if (!os_) throw IoError("cannot open metrics file for write: " + path);
}

void MetricsWriter::append(const MetricsRecord& r) {
    json j = {{"run_id", r.run_id}, {"seed", r.seed},     {"epoch", r.epoch}, {"split", r.split},
              {"metric", r.metric}, {"value", r.value},   {"wall_ms", r.wall_ms}};
    os_ << j.dump() << "\n";
    os_.flush();
}

std::vector<MetricsRecord> read_metrics(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open metrics file: " + path);
    std::vector<MetricsRecord> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        MetricsRecord r;
        r.run_id = j.at("run_id").get<std::string>();
        r.seed = j.at("seed").get<uint64_t>();
        r.epoch = j.at("epoch").get<int>();
        r.split = j.at("split").get<std::string>();
        r.metric = j.at("metric").get<std::string>();
        r.value = j.at("value").get<double>();
        r.wall_ms = j.at("wall_ms").get<int64_t>();
        out.push_back(std::move(r));
    }
    return out;
}

std::string metrics_canonical_payload(const std::string& path) {
    std::string out;
    for (const auto& r : read_metrics(path)) {
        json j = {{"run_id", r.run_id}, {"seed", r.seed},   {"epoch", r.epoch},
                  {"split", r.split},   {"metric", r.metric}, {"value", r.value}};
        out += j.dump();
        out += "\n";
    }
    return out;
}

}  // namespace pvm
