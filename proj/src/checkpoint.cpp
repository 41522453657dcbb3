#include "pvm/checkpoint.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "pvm/pvmt.hpp"

namespace pvm {

namespace fs = std::filesystem;

void save_checkpoint(const std::string& dir, const ParamStore<float>& params,
                     const std::string& config_hash, uint64_t seed) {
    fs::create_directories(dir);
    std::ofstream manifest(fs::path(dir) / "manifest.txt", std::ios::trunc);
    if (!manifest) throw IoError("cannot write checkpoint manifest in " + dir);
    manifest << "pvm-checkpoint v1\n";
    manifest << "config_hash " << config_hash << "\n";
    manifest << "seed " << seed << "\n";
    int idx = 0;
    for (const auto& name : params.names()) {
        char file[32];
        std::snprintf(file, sizeof(file), "p%04d.pvmt", idx++);
        const Tensor<float>& t = params.at(name);
        write_pvmt((fs::path(dir) / file).string(), t);
        manifest << "param " << name << " " << file << " " << dims_str(t.dims) << "\n";
    }
    if (!manifest) throw IoError("short write on checkpoint manifest in " + dir);
}

Checkpoint load_checkpoint(const std::string& dir) {
    std::ifstream manifest(fs::path(dir) / "manifest.txt");
    if (!manifest) throw IoError("missing checkpoint manifest: " + dir + "/manifest.txt");
    Checkpoint out;
    std::string line;
    if (!std::getline(manifest, line) || line != "pvm-checkpoint v1")
        throw IoError("unrecognized checkpoint format in " + dir);
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string tag;
        ss >> tag;
        if (tag == "config_hash") {
            ss >> out.config_hash;
        } else if (tag == "seed") {
            ss >> out.seed;
        } else if (tag == "param") {
            std::string name, file, shape;
            ss >> name >> file >> shape;
            if (name.empty() || file.empty())
                throw IoError("malformed checkpoint manifest line: " + line);
            Tensor<float> t = read_pvmt<float>((fs::path(dir) / file).string());
            if (dims_str(t.dims) != shape)
                throw IoError("checkpoint shape mismatch for " + name + ": manifest says " +
                              shape + ", file has " + dims_str(t.dims));
            out.params.add(name, std::move(t));
        } else {
            throw IoError("unknown checkpoint manifest tag: " + tag);
        }
    }
    return out;
}

Checkpoint load_checkpoint_checked(const std::string& dir, const std::string& expected_hash) {
    Checkpoint c = load_checkpoint(dir);
    if (c.config_hash != expected_hash)
        throw IoError("checkpoint config hash " + c.config_hash + " does not match expected " +
                      expected_hash + " (" + dir + ")");
    return c;
}

}  // namespace pvm
