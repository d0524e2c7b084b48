#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "logo/attention.hpp"
#include "logo/embedding.hpp"
#include "logo/tensor.hpp"

namespace logo {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

// Parses `key = value` lines. Blank lines and `#` comments are skipped.
KeyValues parse_key_values(const std::string& text);

struct ModelConfig {
  std::size_t frames = 8;
  std::size_t height = 4;
  std::size_t width = 4;
  std::size_t channels = 16;
  std::size_t dim = 64;
  std::size_t blocks = 2;
  std::size_t heads = 8;
  WindowSpec window{2, 2, 2};
  PoolMode pool_mode = PoolMode::average;
  std::size_t num_classes = 7;
  std::uint64_t seed = 0;

  // Throws ConfigError naming the violated invariant.
  void validate() const;

  // Returns false when `key` is not a model key.
  bool set(const std::string& key, const std::string& value);
  KeyValues to_key_values() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct Model {
  ModelConfig config;
  EmbedParams embed;
  std::vector<BlockParams> blocks;
  Tensor head_weight;  // [d x classes]
  Tensor head_bias;    // [classes]

  static Model init(const ModelConfig& config);

  // Canonical parameter order, shared by checkpoints, optimizers and gradient checks.
  std::vector<std::pair<std::string, Tensor*>> parameters();
  std::vector<std::pair<std::string, const Tensor*>> parameters() const;
  std::size_t parameter_count() const;

  // Copy whose parameters are leaves on `tape`.
  Model attach(Tape& tape) const;
};

// Final-block token grid X^N.
TokenGrid encode(const Model& model, const ClipFeatures& clip);
// CLS row of X^N, [d].
Tensor cls_features(const Model& model, const ClipFeatures& clip);
// Class logits from the final CLS token, [classes].
Tensor forward(const Model& model, const ClipFeatures& clip);

// ---- checkpoints ----------------------------------------------------------

struct Checkpoint {
  KeyValues config;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

Checkpoint to_checkpoint(const Model& model);
// Reads config keys and parameter tensors. Keys and tensors under the
// "train." and "data." prefixes belong to other consumers and are skipped.
Model from_checkpoint(const Checkpoint& checkpoint);

void save(const Model& model, const std::filesystem::path& path);
Model load(const std::filesystem::path& path);

}  // namespace logo
