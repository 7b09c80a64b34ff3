#pragma once

#include <cstdint>
#include <string>

#include "ssmtad/tensor.hpp"

namespace ssmtad {

// Serialized training state: a JSON manifest (shapes, dtypes, offsets, step,
// RNG state, config snapshot, blob checksum) next to one flat little-endian
// weight blob.  Round-trips are bit-exact.
struct Checkpoint {
    int64_t step = 0;
    std::string rng_state;
    std::string config_json;  // verbatim config snapshot, may be empty
    NamedTensors tensors;
};

uint32_t crc32(const void* data, size_t n);

// writes <dir>/manifest.json and <dir>/weights.bin, creating dir if needed
void checkpoint_save(const std::string& dir, const Checkpoint& c);
Checkpoint checkpoint_load(const std::string& dir);

// copies checkpoint values into the matching live tensors; names must agree
// in both directions and shapes/dtypes must match, errors name the tensor
void checkpoint_apply(const Checkpoint& c, NamedTensors& live);

}  // namespace ssmtad
