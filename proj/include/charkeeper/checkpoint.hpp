#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "charkeeper/autodiff.hpp"
#include "charkeeper/layers.hpp"

namespace charkeeper {

// Binary model container. Layout:
//   magic "RPAC1" | uint32 LE header length | JSON header | raw float32 LE data
// The header carries the model config, the vocabulary hash, and the tensor
// directory (name, shape, byte offset into the data section).
struct Checkpoint {
  nlohmann::json config;
  std::uint64_t vocab_hash = 0;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
};

void save_checkpoint(const std::string& path, const nlohmann::json& config,
                     std::uint64_t vocab_hash, const ParamStore<float>& store);

Checkpoint load_checkpoint(const std::string& path);

// Copies checkpoint tensors into an already-constructed store, matching by
// name and verifying shapes.
void load_into_store(const Checkpoint& ckpt, ParamStore<float>& store);

std::uint64_t hash_store(const ParamStore<float>& store);

}  // namespace charkeeper
