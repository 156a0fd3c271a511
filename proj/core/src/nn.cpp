#include "sitar/nn.hpp"

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "sitar/rng.hpp"

namespace sitar::nn {

std::size_t ParamSet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return i;
  throw std::invalid_argument("ParamSet: unknown parameter " + name);
}

std::vector<ad::Var> bind(ad::Tape& tape, const ParamSet& params) {
  std::vector<ad::Var> vars;
  vars.reserve(params.size());
  for (const auto& t : params.values) vars.push_back(tape.leaf(t));
  return vars;
}

SitarModel::SitarModel(int in_channels, int height, int width, int latent_dim,
                       int classes)
    : in_channels_(in_channels),
      height_(height),
      width_(width),
      latent_dim_(latent_dim),
      classes_(classes) {
  ad::require(height % 4 == 0 && width % 4 == 0,
              "SitarModel: spatial extent must be divisible by 4");
  const std::size_t C = static_cast<std::size_t>(in_channels);
  const std::size_t m = static_cast<std::size_t>(latent_dim);
  const std::size_t K = static_cast<std::size_t>(classes);
  flat_ = 32 * (height / 4) * (width / 4);
  const std::size_t F = static_cast<std::size_t>(flat_);

  params.add("enc.conv1.w", {16, C, 4, 4});
  params.add("enc.conv1.b", {16});
  params.add("enc.conv2.w", {32, 16, 4, 4});
  params.add("enc.conv2.b", {32});
  params.add("enc.mu.w", {F, m});
  params.add("enc.mu.b", {m});
  params.add("enc.lv.w", {F, m});
  params.add("enc.lv.b", {m});
  params.add("dec.fc.w", {m, F});
  params.add("dec.fc.b", {F});
  params.add("dec.conv1.w", {32, 16, 4, 4});
  params.add("dec.conv1.b", {16});
  params.add("dec.conv2.w", {16, C, 4, 4});
  params.add("dec.conv2.b", {C});
  params.add("clf.w1", {m, 128});
  params.add("clf.b1", {128});
  params.add("clf.w2", {128, K});
  params.add("clf.b2", {K});
}

void SitarModel::init(std::uint64_t seed, double head_scale) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Tensor& p = params.values[i];
    if (p.ndim() == 1) {  // biases start at zero
      std::fill(p.data.begin(), p.data.end(), 0.0);
      continue;
    }
    // Fan-in: input features for matrices [in,out]; input channels times
    // kernel taps for (transposed) convolution kernels.
    std::size_t fan_in = p.ndim() == 2 ? p.dim(0) : p.dim(1) * p.dim(2) * p.dim(3);
    if (i == kDecConv1W || i == kDecConv2W) fan_in = p.dim(0) * p.dim(2) * p.dim(3);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    rng::Stream s(seed, rng::Purpose::kParamInit, i);
    const double scale = (i == kEncMuW || i == kEncLvW) ? head_scale : 1.0;
    for (auto& v : p.data) v = scale * s.next_uniform(-bound, bound);
  }
}

EncodeOut SitarModel::encode(ad::Tape& t, const std::vector<ad::Var>& p,
                             ad::Var x) const {
  ad::Var h1 = ad::relu(ad::conv2d(x, p[kEncConv1W], p[kEncConv1B]));
  ad::Var h2 = ad::relu(ad::conv2d(h1, p[kEncConv2W], p[kEncConv2B]));
  const std::size_t B = t.value(h2).dim(0);
  ad::Var flat = ad::reshape(h2, {B, static_cast<std::size_t>(flat_)});
  ad::Var mu = ad::add_rowvec(ad::matmul(flat, p[kEncMuW]), p[kEncMuB]);
  ad::Var lv = ad::add_rowvec(ad::matmul(flat, p[kEncLvW]), p[kEncLvB]);
  return {mu, lv};
}

ad::Var SitarModel::decode(ad::Tape& t, const std::vector<ad::Var>& p,
                           ad::Var z) const {
  ad::Var h = ad::relu(ad::add_rowvec(ad::matmul(z, p[kDecFcW]), p[kDecFcB]));
  const std::size_t B = t.value(h).dim(0);
  const std::size_t Hq = static_cast<std::size_t>(height_ / 4);
  const std::size_t Wq = static_cast<std::size_t>(width_ / 4);
  ad::Var grid = ad::reshape(h, {B, 32, Hq, Wq});
  ad::Var d1 = ad::relu(ad::conv2d_transpose(grid, p[kDecConv1W], p[kDecConv1B]));
  // No squashing on the output layer: reconstructions are raw intensities.
  return ad::conv2d_transpose(d1, p[kDecConv2W], p[kDecConv2B]);
}

ad::Var SitarModel::classify(ad::Tape& t, const std::vector<ad::Var>& p,
                             ad::Var z) const {
  (void)t;
  ad::Var h = ad::relu(ad::add_rowvec(ad::matmul(z, p[kClfW1]), p[kClfB1]));
  return ad::add_rowvec(ad::matmul(h, p[kClfW2]), p[kClfB2]);
}

EncodeOut SitarModel::encode_const(ad::Tape& t, const std::vector<ad::Var>& p,
                                   const ad::Tensor& x) const {
  return encode(t, p, t.leaf(x));
}

namespace {

constexpr char kMagic[8] = {'S', 'I', 'T', 'A', 'R', 'C', 'K', '\0'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_pod(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamSet& params) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f.write(kMagic, sizeof(kMagic));
  write_pod<std::uint32_t>(f, kVersion);
  write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.names[i];
    const auto& t = params.values[i];
    write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(t.ndim()));
    for (auto d : t.shape) write_pod<std::uint64_t>(f, d);
    f.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(sizeof(double) * t.size()));
  }
  if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

void load_checkpoint(const std::string& path, ParamSet& params) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  const auto version = read_pod<std::uint32_t>(f);
  if (version != kVersion)
    throw std::runtime_error("load_checkpoint: unsupported version " +
                             std::to_string(version));
  const auto n = read_pod<std::uint32_t>(f);
  if (n != params.size())
    throw std::runtime_error("load_checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < n; ++i) {
    const auto name_len = read_pod<std::uint32_t>(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    if (name != params.names[i])
      throw std::runtime_error("load_checkpoint: parameter name mismatch: " +
                               name + " vs " + params.names[i]);
    const auto ndim = read_pod<std::uint32_t>(f);
    std::vector<std::size_t> shape(ndim);
    for (auto& d : shape) d = static_cast<std::size_t>(read_pod<std::uint64_t>(f));
    if (shape != params.values[i].shape)
      throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
    f.read(reinterpret_cast<char*>(params.values[i].data.data()),
           static_cast<std::streamsize>(sizeof(double) * params.values[i].size()));
  }
  if (!f) throw std::runtime_error("load_checkpoint: truncated file " + path);
}

}  // namespace sitar::nn
