#pragma once

#include <string>

#include "pvm/autodiff.hpp"

namespace pvm {

/// Parameter registry serialized as a directory of PVMT files plus a
/// plain-text manifest (name, file, shape, config hash, seed).
void save_checkpoint(const std::string& dir, const ParamStore<float>& params,
                     const std::string& config_hash, uint64_t seed);

struct Checkpoint {
    ParamStore<float> params;
    std::string config_hash;
    uint64_t seed = 0;
};

Checkpoint load_checkpoint(const std::string& dir);

/// Loads and verifies the stored hash against the expected one.
Checkpoint load_checkpoint_checked(const std::string& dir, const std::string& expected_hash);

}  // namespace pvm
