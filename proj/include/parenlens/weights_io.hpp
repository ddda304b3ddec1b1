#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "parenlens/model.hpp"
#include "parenlens/tokenizer.hpp"

namespace parenlens {

// MIW1 layout:
//   bytes 0-3    magic "MIW1"
//   bytes 4-11   u64 little-endian header length H
//   bytes 12..   H bytes of UTF-8 JSON:
//                {"config": {...}, "tensors": [{"name", "dtype": "f32", "shape",
//                 "offset", "nbytes"}], "vocab": [...]?}
//   payload      raw little-endian f32, offsets relative to payload start.

struct ModelFile {
  ModelConfig config;
  ModelWeights<float> weights;
  std::optional<Vocab> vocab;
};

std::vector<std::uint8_t> encode_miw1(const ModelConfig& config, const ModelWeights<float>& weights,
                                      const Vocab* vocab = nullptr);
/// Throws IoError on truncation or a bad magic, ShapeError on tensors that
/// disagree with the embedded config.
ModelFile decode_miw1(const std::vector<std::uint8_t>& bytes);

void save_model(const std::string& path, const ModelConfig& config, const ModelWeights<float>& weights,
                const Vocab* vocab = nullptr);
ModelFile load_model(const std::string& path);

/// The config block exactly as it appears in the MIW1 header.
std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& text);

}  // namespace parenlens
