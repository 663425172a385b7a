#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bita/model.hpp"
#include "bita/textproc.hpp"

namespace bita {

struct ObjectGroup {
  std::string shape;  // square | circle | triangle
  std::string color;  // red | green | blue | yellow
  int count = 1;      // 1..3
  // per-instance center x, center y, size in pixels
  std::vector<std::array<double, 3>> instances;
};

struct SceneDesc {
  std::size_t grid_size = 32;
  std::vector<ObjectGroup> groups;
};

struct ImageTextPair {
  std::string id;
  Image image;
  std::vector<std::string> captions;  // 1..5, mutually distinct
  std::optional<SceneDesc> scene;     // present for synthetic pairs
};

struct SyntheticSpec {
  std::size_t grid_size = 32;
  int captions_per_pair = 3;  // 1..5
};

// Scene space: single-group scenes first (shape x color x count), then
// two-group combinations, each order shuffled by the seed and sampled without
// replacement. Small datasets therefore cover the single-object space before
// compositions appear, and caption sets are unique within the dataset.
std::vector<ImageTextPair> generate_synthetic_dataset(const SyntheticSpec& spec,
                                                      std::size_t n_pairs,
                                                      std::uint64_t seed);

// Deterministic rasterization of a scene onto a neutral gray background.
Image render_scene(const SceneDesc& scene);

// informative caption words for a scene: color and shape of every group
std::vector<std::string> scene_object_words(const SceneDesc& scene);

// JSONL manifest, one record per line:
//   {"id": str, "image": "synthetic:<base64 json>" | "raw:<path>",
//    "captions": [str, ...]}
// Raw paths are resolved against the manifest's directory.
std::vector<ImageTextPair> load_manifest(const std::string& path);
void save_manifest(const std::vector<ImageTextPair>& pairs,
                   const std::string& path);

// Flat f32 RGB image file: u32le H, u32le W, u32le 3, then H*W*3 f32le.
Image read_raw_image(const std::string& path);
void write_raw_image(const Image& image, const std::string& path);

// Random resized crop (area scale uniform in [0.6, 1.0], square, bilinear
// resize back to the input size) followed by horizontal flip with p = 0.5.
Image augment(const Image& image, std::uint64_t seed);
Image flip_horizontal(const Image& image);

struct Batch {
  std::vector<std::size_t> pair_indices;
  std::vector<const Image*> images;
  std::vector<std::string> captions;           // the sampled caption per image
  std::vector<std::vector<int>> text_ids;      // [CLS] + tokens (+ pad)
  std::vector<std::vector<int>> lm_inputs;     // bos + tokens (+ pad)
  std::vector<std::vector<int>> lm_targets;    // tokens + eos (+ pad)
  std::vector<std::vector<std::uint8_t>> text_pad;   // 1 where real token
  std::vector<std::vector<std::uint8_t>> lm_active;  // 1 where target counts
};

// Epoch-seeded shuffle, one caption sampled per image per epoch, sequences
// padded to the per-batch maximum, final short batch dropped.
std::vector<Batch> make_batches(const std::vector<ImageTextPair>& dataset,
                                const Vocabulary& vocab,
                                std::size_t batch_size,
                                std::uint64_t epoch_seed,
                                std::size_t max_text_len);

}  // namespace bita
