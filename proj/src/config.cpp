#include "pvm/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace pvm {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

int parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int x = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
    }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const uint64_t x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

Variant parse_variant(const std::string& v) {
    if (v == "pvm") return Variant::Pvm;
    if (v == "vm") return Variant::Vm;
    throw ConfigError("variant must be pvm or vm, got '" + v + "'");
}

TokenPadding parse_padding(const std::string& v) {
    if (v == "zero") return TokenPadding::Zero;
    if (v == "mean") return TokenPadding::Mean;
    if (v == "learned") return TokenPadding::Learned;
    throw ConfigError("token_padding must be zero, mean or learned, got '" + v + "'");
}

struct KeyDef {
    const char* help;
    std::function<void(ExperimentConfig&, const std::string&)> apply;
};

const std::map<std::string, KeyDef>& schema() {
    static const std::map<std::string, KeyDef> s = {
        {"task", {"cls | depth", [](ExperimentConfig& c, const std::string& v) {
                      if (v != "cls" && v != "depth")
                          throw ConfigError("task must be cls or depth, got '" + v + "'");
                      c.task = v;
                  }}},
        {"variant", {"pvm | vm | comma list for sweeps", [](ExperimentConfig& c, const std::string& v) {
                         c.variants.clear();
                         for (const auto& item : split_list(v)) c.variants.push_back(parse_variant(item));
                         if (c.variants.empty()) throw ConfigError("variant list is empty");
                     }}},
        {"token_padding", {"zero | mean | learned", [](ExperimentConfig& c, const std::string& v) {
                               c.padding = parse_padding(v);
                           }}},
        {"seeds", {"comma list of run seeds", [](ExperimentConfig& c, const std::string& v) {
                       c.seeds.clear();
                       for (const auto& item : split_list(v)) c.seeds.push_back(parse_u64("seeds", item));
                       if (c.seeds.empty()) throw ConfigError("seeds list is empty");
                   }}},
        {"epochs", {"training epochs", [](ExperimentConfig& c, const std::string& v) { c.epochs = parse_int("epochs", v); }}},
        {"batch_size", {"samples per optimizer step", [](ExperimentConfig& c, const std::string& v) { c.batch_size = parse_int("batch_size", v); }}},
        {"learning_rate", {"Adam learning rate", [](ExperimentConfig& c, const std::string& v) { c.learning_rate = parse_double("learning_rate", v); }}},
        {"threads", {"worker threads for batch evaluation", [](ExperimentConfig& c, const std::string& v) { c.threads = parse_int("threads", v); }}},
        {"out_dir", {"output directory (PVM_OUT env overrides)", [](ExperimentConfig& c, const std::string& v) { c.out_dir = v; }}},
        {"dataset.train_count", {"training samples", [](ExperimentConfig& c, const std::string& v) { c.train_count = parse_int("dataset.train_count", v); }}},
        {"dataset.test_count", {"test samples", [](ExperimentConfig& c, const std::string& v) { c.test_count = parse_int("dataset.test_count", v); }}},
        {"dataset.seed", {"dataset generator seed", [](ExperimentConfig& c, const std::string& v) { c.data_seed = parse_u64("dataset.seed", v); }}},
        {"image_size", {"input side length (0 = task default)", [](ExperimentConfig& c, const std::string& v) { c.image_size = parse_int("image_size", v); }}},
        {"channels", {"input channels", [](ExperimentConfig& c, const std::string& v) { c.channels = parse_int("channels", v); }}},
        {"classes", {"class count (cls)", [](ExperimentConfig& c, const std::string& v) { c.classes = parse_int("classes", v); }}},
        {"depth.density", {"sparse-input valid density (depth)", [](ExperimentConfig& c, const std::string& v) { c.depth_density = parse_double("depth.density", v); }}},
        {"mask.policy", {"brush | regime | sparse", [](ExperimentConfig& c, const std::string& v) {
                             if (v != "brush" && v != "regime" && v != "sparse")
                                 throw ConfigError("mask.policy must be brush, regime or sparse");
                             c.mask_kind = v;
                         }}},
        {"mask.crop", {"brush-grid cell size", [](ExperimentConfig& c, const std::string& v) { c.mask_crop = parse_int("mask.crop", v); }}},
        {"mask.strokes", {"brush strokes per cell", [](ExperimentConfig& c, const std::string& v) { c.mask_strokes = parse_int("mask.strokes", v); }}},
        {"mask.width_min", {"brush width lower bound", [](ExperimentConfig& c, const std::string& v) { c.mask_width_min = parse_int("mask.width_min", v); }}},
        {"mask.width_max", {"brush width upper bound", [](ExperimentConfig& c, const std::string& v) { c.mask_width_max = parse_int("mask.width_max", v); }}},
        {"mask.min_valid_patch", {"kept-valid patch size per cell", [](ExperimentConfig& c, const std::string& v) { c.mask_min_valid_patch = parse_int("mask.min_valid_patch", v); }}},
        {"mask.band_lo", {"invalid-fraction band lower bound", [](ExperimentConfig& c, const std::string& v) { c.mask_band_lo = parse_double("mask.band_lo", v); }}},
        {"mask.band_hi", {"invalid-fraction band upper bound", [](ExperimentConfig& c, const std::string& v) { c.mask_band_hi = parse_double("mask.band_hi", v); }}},
        {"mask.regime", {"easy | hard | extreme", [](ExperimentConfig& c, const std::string& v) {
                             if (v != "easy" && v != "hard" && v != "extreme")
                                 throw ConfigError("mask.regime must be easy, hard or extreme");
                             c.mask_regime = v;
                         }}},
        {"mask.density", {"sparse mask valid density", [](ExperimentConfig& c, const std::string& v) { c.mask_density = parse_double("mask.density", v); }}},
        {"mask.seed", {"mask generator seed", [](ExperimentConfig& c, const std::string& v) { c.mask_seed = parse_u64("mask.seed", v); }}},
        {"model.patch", {"patch size", [](ExperimentConfig& c, const std::string& v) { c.model_patch = parse_int("model.patch", v); }}},
        {"model.dim", {"token width (cls)", [](ExperimentConfig& c, const std::string& v) { c.model_dim = parse_int("model.dim", v); }}},
        {"model.expansion", {"scan width expansion", [](ExperimentConfig& c, const std::string& v) { c.model_expansion = parse_int("model.expansion", v); }}},
        {"model.state", {"scan state size N", [](ExperimentConfig& c, const std::string& v) { c.model_state = parse_int("model.state", v); }}},
        {"model.blocks", {"residual blocks (cls)", [](ExperimentConfig& c, const std::string& v) { c.model_blocks = parse_int("model.blocks", v); }}},
        {"model.feat", {"trunk feature channels (depth)", [](ExperimentConfig& c, const std::string& v) { c.model_feat = parse_int("model.feat", v); }}},
        {"model.rpssb", {"residual partial state-space blocks (depth)", [](ExperimentConfig& c, const std::string& v) { c.model_rpssb = parse_int("model.rpssb", v); }}},
        {"model.pvmm", {"PVM modules per block (depth)", [](ExperimentConfig& c, const std::string& v) { c.model_pvmm = parse_int("model.pvmm", v); }}},
        {"model.fill_kernel", {"filling-layer kernel (odd)", [](ExperimentConfig& c, const std::string& v) { c.model_fill_kernel = parse_int("model.fill_kernel", v); }}},
        {"model.fill_max_iters", {"filling pass limit", [](ExperimentConfig& c, const std::string& v) { c.model_fill_max_iters = parse_int("model.fill_max_iters", v); }}},
        {"model.substitute_before_norm", {"token substitution before normalization", [](ExperimentConfig& c, const std::string& v) { c.substitute_before_norm = parse_bool("model.substitute_before_norm", v); }}},
    };
    return s;
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const size_t hash_pos = line.find('#');
        if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        auto it = schema().find(key);
        if (it == schema().end())
            throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        it->second.apply(cfg, value);
    }
    if (const char* env = std::getenv("PVM_OUT"); env && *env) cfg.out_dir = env;
    cfg.validate();
    return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    std::stringstream buf;
    buf << is.rdbuf();
    return parse_config_text(buf.str());
}

void ExperimentConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (threads < 1 || threads > 64) throw ConfigError("threads must be in [1, 64]");
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
    if (train_count < 1 || test_count < 1) throw ConfigError("dataset counts must be >= 1");
    if (mask_band_lo < 0 || mask_band_hi > 1 || mask_band_lo >= mask_band_hi)
        throw ConfigError("mask band must satisfy 0 <= lo < hi <= 1");
    if (task == "cls")
        cls_config(variants.front()).validate();
    else
        depth_config(variants.front()).validate();
}

ClsConfig ExperimentConfig::cls_config(Variant v) const {
    ClsConfig c;
    c.image = effective_image();
    c.channels = channels;
    c.patch = model_patch;
    c.dim = model_dim;
    c.expansion = model_expansion;
    c.state = model_state;
    c.blocks = model_blocks;
    c.classes = classes;
    c.variant = v;
    c.padding = padding;
    c.substitute_before_norm = substitute_before_norm;
    return c;
}

DepthConfig ExperimentConfig::depth_config(Variant v) const {
    DepthConfig c;
    c.image = effective_image();
    c.in_channels = channels;
    c.feat = model_feat;
    c.patch = model_patch;
    c.rpssb = model_rpssb;
    c.pvmm_per_block = model_pvmm;
    c.expansion = model_expansion;
    c.state = model_state;
    c.fill_kernel = model_fill_kernel;
    c.fill_max_iters = model_fill_max_iters;
    c.variant = v;
    c.padding = padding;
    c.substitute_before_norm = substitute_before_norm;
    return c;
}

MaskPolicy ExperimentConfig::image_mask_policy() const {
    MaskPolicy p;
    p.seed = mask_seed;
    if (mask_kind == "regime") {
        p.kind = MaskPolicyKind::Regime;
        p.regime = mask_regime == "easy"   ? MaskRegime::Easy
                   : mask_regime == "hard" ? MaskRegime::Hard
                                           : MaskRegime::Extreme;
    } else if (mask_kind == "sparse") {
        p.kind = MaskPolicyKind::SparseSample;
        p.density = mask_density;
    } else {
        p.kind = MaskPolicyKind::BrushGrid;
        p.crop = mask_crop;
        p.strokes_per_cell = mask_strokes;
        p.width_min = mask_width_min;
        p.width_max = mask_width_max;
        p.min_valid_patch = mask_min_valid_patch;
        p.band_lo = mask_band_lo;
        p.band_hi = mask_band_hi;
    }
    return p;
}

std::string ExperimentConfig::canonical() const {
    std::ostringstream os;
    os << "task=" << task << "\n";
    os << "variant=";
    for (size_t i = 0; i < variants.size(); ++i) os << (i ? "," : "") << variant_name(variants[i]);
    os << "\n";
    os << "token_padding=" << token_padding_name(padding) << "\n";
    os << "seeds=";
    for (size_t i = 0; i < seeds.size(); ++i) os << (i ? "," : "") << seeds[i];
    os << "\n";
    os << "epochs=" << epochs << "\n";
    os << "batch_size=" << batch_size << "\n";
    os << "learning_rate=" << learning_rate << "\n";
    os << "dataset.train_count=" << train_count << "\n";
    os << "dataset.test_count=" << test_count << "\n";
    os << "dataset.seed=" << data_seed << "\n";
    os << "image_size=" << effective_image() << "\n";
    os << "channels=" << channels << "\n";
    os << "classes=" << classes << "\n";
    os << "depth.density=" << depth_density << "\n";
    os << "mask.policy=" << mask_kind << "\n";
    os << "mask.crop=" << mask_crop << "\n";
    os << "mask.strokes=" << mask_strokes << "\n";
    os << "mask.width_min=" << mask_width_min << "\n";
    os << "mask.width_max=" << mask_width_max << "\n";
    os << "mask.min_valid_patch=" << mask_min_valid_patch << "\n";
    os << "mask.band_lo=" << mask_band_lo << "\n";
    os << "mask.band_hi=" << mask_band_hi << "\n";
    os << "mask.regime=" << mask_regime << "\n";
    os << "mask.density=" << mask_density << "\n";
    os << "mask.seed=" << mask_seed << "\n";
    os << "model.patch=" << model_patch << "\n";
    os << "model.dim=" << model_dim << "\n";
    os << "model.expansion=" << model_expansion << "\n";
    os << "model.state=" << model_state << "\n";
    os << "model.blocks=" << model_blocks << "\n";
    os << "model.feat=" << model_feat << "\n";
    os << "model.rpssb=" << model_rpssb << "\n";
    os << "model.pvmm=" << model_pvmm << "\n";
    os << "model.fill_kernel=" << model_fill_kernel << "\n";
    os << "model.fill_max_iters=" << model_fill_max_iters << "\n";
    os << "model.substitute_before_norm=" << (substitute_before_norm ? "true" : "false") << "\n";
    return os.str();
}

std::string ExperimentConfig::hash() const {
    const std::string text = canonical();
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

std::string ExperimentConfig::run_id(Variant v, uint64_t seed) const {
    return task + "-" + variant_name(v) + "-" + token_padding_name(padding) + "-s" +
           std::to_string(seed);
}

std::string config_schema_help() {
    std::ostringstream os;
    for (const auto& [key, def] : schema()) os << key << "\t" << def.help << "\n";
    return os.str();
}

}  // namespace pvm
