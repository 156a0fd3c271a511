#pragma once
// Dataset construction: MNIST IDX ingestion, the color-shortcut labeling
// protocol (label flipped with probability p_d, color flipped from the label
// with probability p_c, grayscale placed in the green channel when c=0 and
// the red channel when c=1), a procedural two-family glyph generator usable
// without any downloads, majority-only splits, and group metrics.
#include <cstdint>
#include <string>
#include <vector>

#include "sitar/tensor.hpp"

namespace sitar::data {

struct RawImages {
  std::size_t n = 0;
  std::size_t rows = 0, cols = 0;
  std::vector<double> pixels;  // n*rows*cols in [0,1]
};

struct Config {
  double p_d = 0.25;    // label flip probability
  double p_c_in = 0.1;  // color flip probability, in-distribution
  double p_c_out = 0.9; // color flip probability, OOD
  std::uint64_t seed = 0;
};

enum class SplitKind { kInDistribution, kOutOfDistribution };

struct GroupedDataset {
  std::size_t n = 0;
  int channels = 3, height = 28, width = 28;
  std::vector<double> images;  // n*3*H*W in [0,1]
  std::vector<int> y;          // target labels {0,1}
  std::vector<int> c;          // shortcut (color) labels {0,1}
  double p_d = 0.0, p_c = 0.0;
  std::uint64_t seed = 0;

  ad::Tensor batch(const std::vector<std::size_t>& idx) const;
  std::size_t image_size() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
};

// IDX ingestion (big-endian magic 0x00000803 images / 0x00000801 labels).
RawImages load_idx_images(const std::string& path);
std::vector<int> load_idx_labels(const std::string& path);

// Color-shortcut dataset from raw digits: bucket 0-4 -> 0, 5-9 -> 1, then the
// flip/coloring protocol. Flip draws are keyed per example index, so in- and
// out-of-distribution builds over the same raw examples share label flips and
// differ only in fresh color draws.
GroupedDataset build_colormnist(const RawImages& raw, const std::vector<int>& digits,
                                const Config& cfg, SplitKind split);

// Procedural fallback: 28x28 glyphs from two shape families (bars vs blobs)
// with per-example jitter, rotation, scale and brightness, labeled and
// colored by the same protocol. example_offset shifts the per-example RNG
// keys so disjoint splits draw disjoint randomness.
GroupedDataset synth_colorshapes(std::size_t n, const Config& cfg, SplitKind split,
                                 std::uint64_t example_offset = 0);

// Retains only the majority groups (y == c); fails on empty result.
GroupedDataset majority_only_split(const GroupedDataset& data);

struct GroupMetrics {
  double micro = 0.0;
  double balanced = 0.0;           // mean of per-class accuracies
  double worst_group = 0.0;        // min over present (y,c) groups
  double group_acc[2][2] = {};     // [y][c]
  std::size_t group_count[2][2] = {};
  bool missing_group = false;
};

GroupMetrics group_metrics(const std::vector<int>& predictions,
                           const GroupedDataset& data);

// Self-describing binary container: header (counts, H, W, probabilities,
// seed), then images as bytes and both label vectors.
void save_container(const std::string& path, const GroupedDataset& data);
GroupedDataset load_container(const std::string& path);

}  // namespace sitar::data
