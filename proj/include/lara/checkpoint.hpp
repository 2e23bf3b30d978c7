#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lara/tensor.hpp"

namespace lara {

/// Binary tensor container: magic "LARA", format version u32 LE, tensor
/// count u32 LE, then per tensor: name length u16 LE + UTF-8 name, rank u8,
/// dims as u64 LE, raw float32 LE payload. Used for parameters, optimizer
/// moments and captured attention dumps.
constexpr uint32_t kCheckpointVersion = 1;

void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor>>& tensors);

std::vector<std::pair<std::string, Tensor>> load_tensors(const std::string& path);

}  // namespace lara
