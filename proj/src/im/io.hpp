#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "im/model.hpp"
#include "im/tensor.hpp"

namespace im::io {

// Tensor container: magic "IMTN", version u8 = 1, rank u8, extents u32 LE,
// then the payload as f32 LE. 64-bit tensors are narrowed on write.
std::vector<std::byte> encode_tensor(const Tensor& t);
Tensor decode_tensor(std::span<const std::byte> bytes, size_t* consumed = nullptr);
void write_tensor(const Tensor& t, const std::string& path);
Tensor read_tensor(const std::string& path);

std::string config_to_json(const zoo::ModelConfig& cfg);
zoo::ModelConfig config_from_json(const std::string& text);
void write_config(const zoo::ModelConfig& cfg, const std::string& path);
zoo::ModelConfig read_config(const std::string& path);
// FNV-1a over the canonical config document; stored in weight files so a
// mismatched architecture cannot be loaded.
uint64_t config_hash(const zoo::ModelConfig& cfg);

// Weight container: magic "IMWT", version u8 = 1, config hash u64 LE,
// record count u32 LE, records of (name length u32 LE, name bytes, IMTN tensor).
void save_weights(zoo::Model& model, const std::string& path);
void load_weights(zoo::Model& model, const std::string& path);

// 8-bit binary PGM, one file per channel, min-max normalized per channel.
// A constant channel maps to mid-gray 128.
void write_pgm(const Tensor& plane, const std::string& path);  // [H,W]

struct FeatureDump {
  std::vector<std::string> image_files;
  std::string csv_file;
  int64_t channels = 0;
};

// Pairwise channel cosine similarities of a [1,C,H,W] map as CSV text.
std::string cosine_csv(const Tensor& features);
// Per-channel graymaps of the chosen block output plus a CSV of pairwise
// channel cosine similarities (the redundancy statistic). Zero-norm channels
// get cosine 0 by convention.
FeatureDump dump_features(const zoo::Model& model, const Tensor& x, int stage, int block,
                          const std::string& out_dir);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::byte> bytes);

}  // namespace im::io
