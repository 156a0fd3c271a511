#include "sitar/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "sitar/rng.hpp"

namespace sitar::data {

namespace {

std::uint32_t read_be32(std::ifstream& f) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace

RawImages load_idx_images(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_idx_images: cannot open " + path);
  const std::uint32_t magic = read_be32(f);
  if (!f || magic != 0x00000803u)
    throw std::runtime_error("load_idx_images: bad magic in " + path +
                             " (expected 0x00000803)");
  RawImages out;
  out.n = read_be32(f);
  out.rows = read_be32(f);
  out.cols = read_be32(f);
  if (!f) throw std::runtime_error("load_idx_images: truncated header in " + path);
  const std::size_t total = out.n * out.rows * out.cols;
  std::vector<unsigned char> bytes(total);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(total));
  if (!f) throw std::runtime_error("load_idx_images: truncated pixel data in " + path);
  out.pixels.resize(total);
  for (std::size_t i = 0; i < total; ++i) out.pixels[i] = bytes[i] / 255.0;
  return out;
}

std::vector<int> load_idx_labels(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_idx_labels: cannot open " + path);
  const std::uint32_t magic = read_be32(f);
  if (!f || magic != 0x00000801u)
    throw std::runtime_error("load_idx_labels: bad magic in " + path +
                             " (expected 0x00000801)");
  const std::size_t n = read_be32(f);
  if (!f) throw std::runtime_error("load_idx_labels: truncated header in " + path);
  std::vector<unsigned char> bytes(n);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
  if (!f) throw std::runtime_error("load_idx_labels: truncated label data in " + path);
  return std::vector<int>(bytes.begin(), bytes.end());
}

ad::Tensor GroupedDataset::batch(const std::vector<std::size_t>& idx) const {
  const std::size_t sz = image_size();
  ad::Tensor out({idx.size(), static_cast<std::size_t>(channels),
                  static_cast<std::size_t>(height), static_cast<std::size_t>(width)});
  for (std::size_t b = 0; b < idx.size(); ++b)
    std::copy_n(images.data() + idx[b] * sz, sz, out.data.data() + b * sz);
  return out;
}

namespace {

// Applies the flip/coloring protocol for example `idx`: base label -> y
// (flipped w.p. p_d), y -> c (flipped w.p. p_c), grayscale into channel
// green (c=0) or red (c=1). Color draws are keyed by (idx, split) so the two
// evaluation splits share label noise but draw colors independently.
void colorize(int base_label, const double* gray, std::size_t hw, const Config& cfg,
              SplitKind split, std::uint64_t idx, double* img3, int& y_out,
              int& c_out) {
  rng::Stream yflip(cfg.seed, rng::Purpose::kDatasetLabelFlip, idx);
  int y = base_label;
  if (yflip.next_uniform() < cfg.p_d) y = 1 - y;
  const double p_c =
      split == SplitKind::kInDistribution ? cfg.p_c_in : cfg.p_c_out;
  rng::Stream cflip(cfg.seed, rng::Purpose::kDatasetColorFlip,
                    idx * 2 + (split == SplitKind::kOutOfDistribution ? 1 : 0));
  int c = y;
  if (cflip.next_uniform() < p_c) c = 1 - c;
  std::fill(img3, img3 + 3 * hw, 0.0);
  std::copy_n(gray, hw, img3 + (c == 0 ? 1 : 0) * hw);
  y_out = y;
  c_out = c;
}

}  // namespace

GroupedDataset build_colormnist(const RawImages& raw, const std::vector<int>& digits,
                                const Config& cfg, SplitKind split) {
  ad::require(digits.size() == raw.n, "build_colormnist: image/label count mismatch");
  GroupedDataset out;
  out.n = raw.n;
  out.height = static_cast<int>(raw.rows);
  out.width = static_cast<int>(raw.cols);
  out.p_d = cfg.p_d;
  out.p_c = split == SplitKind::kInDistribution ? cfg.p_c_in : cfg.p_c_out;
  out.seed = cfg.seed;
  const std::size_t hw = raw.rows * raw.cols;
  out.images.resize(out.n * 3 * hw);
  out.y.resize(out.n);
  out.c.resize(out.n);
  for (std::size_t i = 0; i < out.n; ++i) {
    ad::require(digits[i] >= 0 && digits[i] <= 9, "build_colormnist: bad digit");
    const int bucket = digits[i] < 5 ? 0 : 1;
    colorize(bucket, raw.pixels.data() + i * hw, hw, cfg, split, i,
             out.images.data() + i * 3 * hw, out.y[i], out.c[i]);
  }
  return out;
}

namespace {

// Two procedural shape families built from a fixed bank of prototype glyphs:
// family 0 draws 2-3 soft-edged bars, family 1 draws 1-2 soft-edged ellipses
// (some with holes). Each example applies global jitter, rotation, scale and
// brightness so the family is only decodable from shape, never intensity.
enum StrokeKind { kBar = 0, kBlob = 1 };
struct Stroke {
  int kind;
  double a, b, c, d, e, f;  // bar: dx,dy,ang,th,L,- ; blob: dx,dy,rx,ry,rot,hole
};
struct Proto {
  int family;
  int n_strokes;
  const Stroke* strokes;
};

constexpr Stroke kP0[] = {
    {kBar, -4.7102075815200806, -0.98101437091827393, 0.8163245792868058, 1.2199848055839539, 6.2332029342651367, 0},
    {kBar, 2.0064473152160645, -4.4820261001586914, 1.4707027696107595, 1.4042836785316468, 7.325847864151001, 0}};
constexpr Stroke kP1[] = {
    {kBar, 2.8370803594589233, 0.63063204288482666, 2.4342645998172054, 1.4924815416336061, 7.1171061992645264, 0},
    {kBar, 1.8171107769012451, -2.1632504463195801, 2.06317944224232, 1.143253493309021, 8.925137996673584, 0},
    {kBar, 1.0122263431549072, -1.9567155838012695, 0.80032751157329618, 1.3776171207427979, 9.866044282913208, 0}};
constexpr Stroke kP2[] = {
    {kBar, 2.3994922637939453, -0.48282086849212646, 1.4945525006935039, 1.4705166101455689, 6.6099848747253418, 0},
    {kBar, 1.6622442007064819, -1.6567695140838623, 2.479629010661291, 1.1929838299751281, 8.0988950729370117, 0}};
constexpr Stroke kP3[] = {
    {kBar, 1.6884070634841919, 3.4361469745635986, 1.3399153654018343, 1.5736875295639039, 6.3079078197479248, 0},
    {kBar, -0.89189112186431885, -4.9858790636062622, 1.7009210408172581, 1.3851340651512147, 7.1903865337371826, 0},
    {kBar, 2.0766162872314453, -0.81054508686065674, 0.20579348458181135, 1.5303198933601381, 9.2331266403198242, 0}};
constexpr Stroke kP4[] = {
    {kBar, 2.5280386209487915, 3.988310694694519, 2.1484095644875887, 1.4595070004463198, 9.6596665382385254, 0},
    {kBar, -1.0074132680892944, -3.8995277881622314, 0.79829075509992808, 1.2599527955055236, 7.7802267074584961, 0}};
constexpr Stroke kP5[] = {
    {kBlob, -0.027110099792480469, 2.2922873497009277, 5.150988757610321, 3.8257602453231812, 1.098920654456222, 0}};
constexpr Stroke kP6[] = {
    {kBlob, -0.94099855422973633, 2.4344544410705566, 4.2965260744094849, 4.2270193099975586, 1.3182430181815818, 0.37456289529800413},
    {kBlob, -0.98486471176147461, -3.913764476776123, 5.863734096288681, 5.4152791798114777, 0.8275165345738098, 0}};
constexpr Stroke kP7[] = {
    {kBlob, -2.4957308769226074, 0.13915824890136719, 5.46221724152565, 3.8529483079910278, 0.97753768348826142, 0}};
constexpr Stroke kP8[] = {
    {kBlob, 1.6731033325195312, -2.5800585746765137, 4.6108124256134033, 3.8073775768280029, 3.0277387719186226, 0.45390403270721436},
    {kBlob, -3.6972999572753906, -2.2084550857543945, 5.1931027173995972, 4.8185063004493713, 1.9870719366992258, 0}};
constexpr Stroke kP9[] = {
    {kBlob, -3.2723164558410645, -2.141761302947998, 5.3171718716621399, 3.7968724071979523, 1.2413106609086737, 0}};

constexpr Proto kProtos[10] = {
    {0, 2, kP0}, {0, 3, kP1}, {0, 2, kP2}, {0, 3, kP3}, {0, 2, kP4},
    {1, 1, kP5}, {1, 2, kP6}, {1, 1, kP7}, {1, 2, kP8}, {1, 1, kP9}};

inline double soft_edge(double d) { return 1.0 / (1.0 + std::exp(d / 0.7)); }

void render_glyph(int pid, rng::Stream& jitter, double* gray) {
  const double gx = jitter.next_uniform(-3.0, 3.0);
  const double gy = jitter.next_uniform(-3.0, 3.0);
  const double grot = jitter.next_uniform(-0.3, 0.3);
  const double gs = jitter.next_uniform(0.85, 1.15);
  const double bright = jitter.next_uniform(0.6, 1.0);
  const double cosr = std::cos(grot), sinr = std::sin(grot);
  std::fill(gray, gray + 28 * 28, 0.0);
  const Proto& proto = kProtos[pid];
  for (int s = 0; s < proto.n_strokes; ++s) {
    const Stroke& st = proto.strokes[s];
    const double dx = st.a * gs, dy = st.b * gs;
    const double cx = 14.0 + gx + dx * cosr - dy * sinr;
    const double cy = 14.0 + gy + dx * sinr + dy * cosr;
    if (st.kind == kBar) {
      const double ang = st.c + grot, th = st.d * gs, L = st.e * gs;
      const double sa = std::sin(ang), ca = std::cos(ang);
      for (int r = 0; r < 28; ++r)
        for (int col = 0; col < 28; ++col) {
          const double xr = r - cx, yr = col - cy;
          const double d = std::fabs(xr * sa - yr * ca) - th;
          const double along = std::fabs(xr * ca + yr * sa) - L;
          const double val = soft_edge(std::max(d, along)) * bright;
          gray[r * 28 + col] = std::max(gray[r * 28 + col], val);
        }
    } else {
      const double rx = st.c * gs, ry = st.d * gs, rot = st.e + grot;
      const double hole = st.f;
      const double sa = std::sin(rot), ca = std::cos(rot);
      const double edge = std::min(rx, ry);
      for (int r = 0; r < 28; ++r)
        for (int col = 0; col < 28; ++col) {
          const double xr = (r - cx) * ca + (col - cy) * sa;
          const double yr = -(r - cx) * sa + (col - cy) * ca;
          const double q = (xr / rx) * (xr / rx) + (yr / ry) * (yr / ry);
          double val = soft_edge((q - 1.0) * edge) * bright;
          if (hole > 0.0) val *= 1.0 - soft_edge((hole - q) * edge);
          gray[r * 28 + col] = std::max(gray[r * 28 + col], val);
        }
    }
  }
  for (int i = 0; i < 28 * 28; ++i) gray[i] = std::clamp(gray[i], 0.0, 1.0);
}

}  // namespace

GroupedDataset synth_colorshapes(std::size_t n, const Config& cfg, SplitKind split,
                                 std::uint64_t example_offset) {
  ad::require(n >= 1, "synth_colorshapes: need n >= 1");
  GroupedDataset out;
  out.n = n;
  out.p_d = cfg.p_d;
  out.p_c = split == SplitKind::kInDistribution ? cfg.p_c_in : cfg.p_c_out;
  out.seed = cfg.seed;
  const std::size_t hw = 28 * 28;
  out.images.resize(n * 3 * hw);
  out.y.resize(n);
  out.c.resize(n);
  std::vector<double> gray(hw);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t idx = example_offset + i;
    rng::Stream pick(cfg.seed, rng::Purpose::kDatasetProto, idx);
    const int pid = static_cast<int>(pick.next_below(10));
    rng::Stream jitter(cfg.seed, rng::Purpose::kDatasetJitter, idx);
    render_glyph(pid, jitter, gray.data());
    colorize(kProtos[pid].family, gray.data(), hw, cfg, split, idx,
             out.images.data() + i * 3 * hw, out.y[i], out.c[i]);
  }
  return out;
}

GroupedDataset majority_only_split(const GroupedDataset& data) {
  GroupedDataset out;
  out.channels = data.channels;
  out.height = data.height;
  out.width = data.width;
  out.p_d = data.p_d;
  out.p_c = data.p_c;
  out.seed = data.seed;
  const std::size_t sz = data.image_size();
  for (std::size_t i = 0; i < data.n; ++i) {
    if (data.y[i] != data.c[i]) continue;
    out.images.insert(out.images.end(), data.images.begin() + i * sz,
                      data.images.begin() + (i + 1) * sz);
    out.y.push_back(data.y[i]);
    out.c.push_back(data.c[i]);
  }
  out.n = out.y.size();
  ad::require(out.n > 0, "majority_only_split: no majority-group examples");
  return out;
}

GroupMetrics group_metrics(const std::vector<int>& predictions,
                           const GroupedDataset& data) {
  ad::require(predictions.size() == data.n, "group_metrics: prediction count mismatch");
  GroupMetrics m;
  std::size_t correct[2][2] = {};
  std::size_t class_count[2] = {}, class_correct[2] = {};
  std::size_t total_correct = 0;
  for (std::size_t i = 0; i < data.n; ++i) {
    const int y = data.y[i], c = data.c[i];
    const bool ok = predictions[i] == y;
    m.group_count[y][c] += 1;
    correct[y][c] += ok;
    class_count[y] += 1;
    class_correct[y] += ok;
    total_correct += ok;
  }
  m.micro = static_cast<double>(total_correct) / static_cast<double>(data.n);
  double bal = 0.0;
  int classes_present = 0;
  for (int y = 0; y < 2; ++y)
    if (class_count[y] > 0) {
      bal += static_cast<double>(class_correct[y]) / class_count[y];
      ++classes_present;
    }
  m.balanced = classes_present ? bal / classes_present : 0.0;
  double worst = 1.0;
  for (int y = 0; y < 2; ++y)
    for (int c = 0; c < 2; ++c) {
      if (m.group_count[y][c] == 0) {
        m.missing_group = true;
        continue;
      }
      m.group_acc[y][c] =
          static_cast<double>(correct[y][c]) / m.group_count[y][c];
      worst = std::min(worst, m.group_acc[y][c]);
    }
  m.worst_group = worst;
  return m;
}

namespace {

constexpr char kContainerMagic[8] = {'S', 'I', 'T', 'A', 'R', 'D', 'S', '\0'};
constexpr std::uint32_t kContainerVersion = 1;

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

void save_container(const std::string& path, const GroupedDataset& data) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("save_container: cannot open " + path);
  f.write(kContainerMagic, sizeof(kContainerMagic));
  write_pod<std::uint32_t>(f, kContainerVersion);
  write_pod<std::uint64_t>(f, data.n);
  write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(data.channels));
  write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(data.height));
  write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(data.width));
  write_pod<double>(f, data.p_d);
  write_pod<double>(f, data.p_c);
  write_pod<std::uint64_t>(f, data.seed);
  std::vector<unsigned char> bytes(data.images.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<unsigned char>(
        std::lround(std::clamp(data.images[i], 0.0, 1.0) * 255.0));
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  for (std::size_t i = 0; i < data.n; ++i)
    write_pod<unsigned char>(f, static_cast<unsigned char>(data.y[i]));
  for (std::size_t i = 0; i < data.n; ++i)
    write_pod<unsigned char>(f, static_cast<unsigned char>(data.c[i]));
  if (!f) throw std::runtime_error("save_container: write failed for " + path);
}

GroupedDataset load_container(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_container: cannot open " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kContainerMagic, sizeof(kContainerMagic)) != 0)
    throw std::runtime_error("load_container: bad magic in " + path);
  const auto version = read_pod<std::uint32_t>(f);
  if (version != kContainerVersion)
    throw std::runtime_error("load_container: unsupported version");
  GroupedDataset out;
  out.n = read_pod<std::uint64_t>(f);
  out.channels = static_cast<int>(read_pod<std::uint32_t>(f));
  out.height = static_cast<int>(read_pod<std::uint32_t>(f));
  out.width = static_cast<int>(read_pod<std::uint32_t>(f));
  out.p_d = read_pod<double>(f);
  out.p_c = read_pod<double>(f);
  out.seed = read_pod<std::uint64_t>(f);
  const std::size_t total = out.n * out.image_size();
  std::vector<unsigned char> bytes(total);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(total));
  out.images.resize(total);
  for (std::size_t i = 0; i < total; ++i) out.images[i] = bytes[i] / 255.0;
  out.y.resize(out.n);
  out.c.resize(out.n);
  for (std::size_t i = 0; i < out.n; ++i) out.y[i] = read_pod<unsigned char>(f);
  for (std::size_t i = 0; i < out.n; ++i) out.c[i] = read_pod<unsigned char>(f);
  if (!f) throw std::runtime_error("load_container: truncated file " + path);
  return out;
}

}  // namespace sitar::data
