#pragma once

// Named-tensor checkpoint container, magic "MMCK" version 1:
// count u32, then per tensor: name length u32, name bytes, rank u32,
// dims u32[rank], float32 payload.

#include <string>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace mm {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_checkpoint(const NamedTensors& tensors, const std::string& path);
NamedTensors load_checkpoint(const std::string& path);

const Tensor* find_tensor(const NamedTensors& tensors, const std::string& name);

}  // namespace mm
