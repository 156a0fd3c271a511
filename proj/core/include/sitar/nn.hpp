#pragma once
// Model definitions: convolutional VAE (encoder with mean / log-variance
// heads, mirrored transposed-convolution decoder) and a small MLP classifier
// operating on the latent code. Parameters are plain named tensors; each
// training step binds them as leaves on a fresh tape.
#include <cstdint>
#include <string>
#include <vector>

#include "sitar/tape.hpp"
#include "sitar/tensor.hpp"

namespace sitar::nn {

struct ParamSet {
  std::vector<std::string> names;
  std::vector<ad::Tensor> values;

  std::size_t add(std::string name, std::vector<std::size_t> shape) {
    names.push_back(std::move(name));
    values.emplace_back(std::move(shape));
    return values.size() - 1;
  }
  std::size_t size() const { return values.size(); }
  std::size_t index_of(const std::string& name) const;
};

// Leaves for every parameter on one tape, aligned with the ParamSet.
std::vector<ad::Var> bind(ad::Tape& tape, const ParamSet& params);

struct EncodeOut {
  ad::Var mu;
  ad::Var logvar;
};

// The full model used throughout: 3->16->32 conv encoder (kernel 4, stride 2,
// pad 1), two affine heads onto an m-dimensional latent, mirrored decoder
// with no output squashing, and a latent->128->C classifier.
class SitarModel {
 public:
  SitarModel() = default;
  SitarModel(int in_channels, int height, int width, int latent_dim, int classes);

  // He-style uniform fan-in initialization, zero biases. head_scale shrinks
  // the mu / log-variance head weights (1.0 leaves them at standard scale).
  void init(std::uint64_t seed, double head_scale = 1.0);

  EncodeOut encode(ad::Tape& t, const std::vector<ad::Var>& p, ad::Var x) const;
  ad::Var decode(ad::Tape& t, const std::vector<ad::Var>& p, ad::Var z) const;
  ad::Var classify(ad::Tape& t, const std::vector<ad::Var>& p, ad::Var z) const;

  // Convenience forward passes outside any training step: input is a constant.
  EncodeOut encode_const(ad::Tape& t, const std::vector<ad::Var>& p,
                         const ad::Tensor& x) const;

  int in_channels() const { return in_channels_; }
  int height() const { return height_; }
  int width() const { return width_; }
  int latent_dim() const { return latent_dim_; }
  int classes() const { return classes_; }

  ParamSet params;

  // Parameter indices (fixed order, also the checkpoint order).
  enum Index : std::size_t {
    kEncConv1W, kEncConv1B, kEncConv2W, kEncConv2B,
    kEncMuW, kEncMuB, kEncLvW, kEncLvB,
    kDecFcW, kDecFcB, kDecConv1W, kDecConv1B, kDecConv2W, kDecConv2B,
    kClfW1, kClfB1, kClfW2, kClfB2,
    kParamCount
  };

 private:
  int in_channels_ = 3, height_ = 28, width_ = 28, latent_dim_ = 10, classes_ = 2;
  int flat_ = 0;  // channels * spatial extent after the encoder convs
};

// Checkpoint serialization: versioned header, then each parameter as
// name / shape / little-endian float64 payload. Load verifies names and
// shapes against the receiving ParamSet.
void save_checkpoint(const std::string& path, const ParamSet& params);
void load_checkpoint(const std::string& path, ParamSet& params);

}  // namespace sitar::nn
