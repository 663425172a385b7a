#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace bita {

// On-disk container: "BITA" magic, u32le format version, u64le header
// length, JSON header (tensor name -> shape/dtype plus run metadata),
// payload of concatenated little-endian f32 arrays in name order, trailing
// CRC32 of the payload.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string stage;  // "s1" | "s2" | "ft"
  std::vector<std::string> vocab_tokens;
  std::int64_t optim_step = 0;
  std::map<std::string, std::vector<std::size_t>> shapes;
  std::map<std::string, std::vector<float>> tensors;

  void put(const std::string& name, std::vector<std::size_t> shape,
           const std::vector<double>& values);
  std::vector<double> get(const std::string& name,
                          const std::vector<std::size_t>& expect_shape) const;
  bool has(const std::string& name) const { return tensors.count(name) > 0; }
};

void save_checkpoint_file(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint_file(const std::string& path);

}  // namespace bita
