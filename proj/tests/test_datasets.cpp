#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "sitar/datasets.hpp"

using namespace sitar;

namespace {

void write_idx_images(const std::string& path, std::uint32_t magic,
                      const std::vector<unsigned char>& pixels, std::uint32_t n,
                      std::uint32_t rows, std::uint32_t cols) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  auto be32 = [&](std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v)};
    f.write(reinterpret_cast<char*>(b), 4);
  };
  be32(magic);
  be32(n);
  be32(rows);
  be32(cols);
  f.write(reinterpret_cast<const char*>(pixels.data()),
          static_cast<std::streamsize>(pixels.size()));
}

void write_idx_labels(const std::string& path, std::uint32_t magic,
                      const std::vector<unsigned char>& labels) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  auto be32 = [&](std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v)};
    f.write(reinterpret_cast<char*>(b), 4);
  };
  be32(magic);
  be32(static_cast<std::uint32_t>(labels.size()));
  f.write(reinterpret_cast<const char*>(labels.data()),
          static_cast<std::streamsize>(labels.size()));
}

double pearson(const std::vector<int>& a, const std::vector<int>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  return cov / (std::sqrt(va) * std::sqrt(vb));
}

data::RawImages dummy_raw(std::size_t n) {
  data::RawImages raw;
  raw.n = n;
  raw.rows = raw.cols = 28;
  raw.pixels.assign(n * 28 * 28, 0.5);
  return raw;
}

}  // namespace

TEST_CASE("IDX round-trip through a hand-crafted fixture") {
  const std::string img_path = "/tmp/sitar_test_images.idx";
  const std::string lbl_path = "/tmp/sitar_test_labels.idx";
  std::vector<unsigned char> pixels(2 * 2 * 3);
  for (std::size_t i = 0; i < pixels.size(); ++i)
    pixels[i] = static_cast<unsigned char>(i * 20);
  write_idx_images(img_path, 0x00000803u, pixels, 2, 2, 3);
  write_idx_labels(lbl_path, 0x00000801u, {5, 0});

  const auto raw = data::load_idx_images(img_path);
  CHECK(raw.n == 2);
  CHECK(raw.rows == 2);
  CHECK(raw.cols == 3);
  for (std::size_t i = 0; i < pixels.size(); ++i)
    CHECK(raw.pixels[i] == doctest::Approx(pixels[i] / 255.0).epsilon(1e-12));
  const auto labels = data::load_idx_labels(lbl_path);
  CHECK(labels == std::vector<int>{5, 0});

  // Wrong magic in either direction is rejected.
  CHECK_THROWS(data::load_idx_labels(img_path));
  CHECK_THROWS(data::load_idx_images(lbl_path));

  // Truncated pixel payload is rejected.
  write_idx_images("/tmp/sitar_test_trunc.idx", 0x00000803u,
                   std::vector<unsigned char>(5), 2, 2, 3);
  CHECK_THROWS(data::load_idx_images("/tmp/sitar_test_trunc.idx"));
  std::remove(img_path.c_str());
  std::remove(lbl_path.c_str());
  std::remove("/tmp/sitar_test_trunc.idx");
}

TEST_CASE("color protocol: no flips means y == bucket and c == y") {
  data::Config cfg;
  cfg.p_d = 0.0;
  cfg.p_c_in = 0.0;
  cfg.seed = 3;
  const std::vector<int> digits{0, 3, 4, 5, 7, 9, 2, 8};
  const auto ds = data::build_colormnist(dummy_raw(8), digits, cfg,
                                         data::SplitKind::kInDistribution);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(ds.y[i] == (digits[i] < 5 ? 0 : 1));
    CHECK(ds.c[i] == ds.y[i]);
  }
}

TEST_CASE("exactly one nonzero channel per image, matching c") {
  data::Config cfg;
  cfg.seed = 4;
  const auto ds = data::synth_colorshapes(64, cfg, data::SplitKind::kInDistribution);
  const std::size_t hw = 28 * 28;
  for (std::size_t i = 0; i < ds.n; ++i) {
    double energy[3] = {0, 0, 0};
    for (int ch = 0; ch < 3; ++ch)
      for (std::size_t px = 0; px < hw; ++px)
        energy[ch] += ds.images[i * 3 * hw + ch * hw + px];
    const int active = ds.c[i] == 0 ? 1 : 0;  // green when c=0, red when c=1
    CHECK(energy[active] > 0.0);
    for (int ch = 0; ch < 3; ++ch)
      if (ch != active) CHECK(energy[ch] == 0.0);
  }
}

TEST_CASE("empirical flip rates at N=60000 match p_d and p_c") {
  data::Config cfg;
  cfg.seed = 5;
  std::vector<int> digits(60000);
  for (std::size_t i = 0; i < digits.size(); ++i) digits[i] = static_cast<int>(i % 10);
  const auto raw = dummy_raw(60000);
  const auto in = data::build_colormnist(raw, digits, cfg,
                                         data::SplitKind::kInDistribution);
  // P(c == y) = 1 - p_c = 0.9 within binomial concentration bounds.
  std::size_t agree = 0, label_flips = 0;
  for (std::size_t i = 0; i < in.n; ++i) {
    agree += in.y[i] == in.c[i];
    label_flips += in.y[i] != (digits[i] < 5 ? 0 : 1);
  }
  const double p_agree = static_cast<double>(agree) / in.n;
  CHECK(p_agree >= 0.885);
  CHECK(p_agree <= 0.915);
  const double p_flip = static_cast<double>(label_flips) / in.n;
  CHECK(std::fabs(p_flip - 0.25) <= 3.0 * std::sqrt(0.25 * 0.75 / 60000.0));

  const auto ood = data::build_colormnist(raw, digits, cfg,
                                          data::SplitKind::kOutOfDistribution);
  CHECK(pearson(ood.y, ood.c) < -0.75);

  // Label noise realizations are shared between the two splits.
  CHECK(in.y == ood.y);
  CHECK(in.c != ood.c);
}

TEST_CASE("synthetic shapes are deterministic and splits draw fresh colors") {
  data::Config cfg;
  cfg.seed = 6;
  const auto a = data::synth_colorshapes(32, cfg, data::SplitKind::kInDistribution);
  const auto b = data::synth_colorshapes(32, cfg, data::SplitKind::kInDistribution);
  CHECK(a.images == b.images);
  CHECK(a.y == b.y);
  CHECK(a.c == b.c);

  const auto ood = data::synth_colorshapes(32, cfg, data::SplitKind::kOutOfDistribution);
  CHECK(a.y == ood.y);  // shared p_d draws

  // Different example offsets give different examples.
  const auto shifted =
      data::synth_colorshapes(32, cfg, data::SplitKind::kInDistribution, 1000);
  CHECK(a.images != shifted.images);
}

TEST_CASE("majority-only split keeps y == c and is idempotent") {
  data::Config cfg;
  cfg.seed = 7;
  const auto full = data::synth_colorshapes(256, cfg, data::SplitKind::kInDistribution);
  const auto maj = data::majority_only_split(full);
  CHECK(maj.n > 0);
  CHECK(maj.n < full.n);
  for (std::size_t i = 0; i < maj.n; ++i) CHECK(maj.y[i] == maj.c[i]);
  const auto twice = data::majority_only_split(maj);
  CHECK(twice.n == maj.n);
  CHECK(twice.images == maj.images);
}

TEST_CASE("group metrics: trivial cases and fixture arithmetic") {
  data::GroupedDataset ds;
  ds.n = 8;
  ds.height = ds.width = 1;
  ds.images.assign(8 * 3, 0.0);
  ds.y = {0, 0, 0, 0, 1, 1, 1, 1};
  ds.c = {0, 0, 1, 1, 1, 1, 0, 0};

  // All correct.
  const auto all = data::group_metrics(ds.y, ds);
  CHECK(all.micro == 1.0);
  CHECK(all.worst_group == 1.0);
  CHECK(all.balanced == 1.0);
  CHECK_FALSE(all.missing_group);

  // Shortcut predictor y_hat = c: right on the two aligned groups only.
  const auto sc = data::group_metrics(ds.c, ds);
  CHECK(sc.micro == 0.5);
  CHECK(sc.worst_group == 0.0);
  CHECK(sc.balanced == 0.5);

  // Mixed fixture: predictions right on 3 of class 0, 1 of class 1.
  const std::vector<int> mixed{0, 0, 0, 1, 1, 0, 0, 0};
  const auto mm = data::group_metrics(mixed, ds);
  CHECK(mm.micro == doctest::Approx(0.5));
  CHECK(mm.balanced == doctest::Approx((0.75 + 0.25) / 2.0));
  CHECK(mm.group_acc[0][0] == doctest::Approx(1.0));
  CHECK(mm.group_acc[0][1] == doctest::Approx(0.5));
  CHECK(mm.group_acc[1][1] == doctest::Approx(0.5));
  CHECK(mm.group_acc[1][0] == doctest::Approx(0.0));
  CHECK(mm.worst_group == doctest::Approx(0.0));

  // Missing group is flagged.
  data::GroupedDataset maj = ds;
  maj.c = maj.y;
  const auto flagged = data::group_metrics(maj.y, maj);
  CHECK(flagged.missing_group);
}

TEST_CASE("container round-trip is stable") {
  data::Config cfg;
  cfg.seed = 9;
  const auto ds = data::synth_colorshapes(16, cfg, data::SplitKind::kInDistribution);
  const std::string path = "/tmp/sitar_test_container.bin";
  data::save_container(path, ds);
  const auto loaded = data::load_container(path);
  CHECK(loaded.n == ds.n);
  CHECK(loaded.y == ds.y);
  CHECK(loaded.c == ds.c);
  CHECK(loaded.p_d == ds.p_d);
  CHECK(loaded.p_c == ds.p_c);
  CHECK(loaded.seed == ds.seed);
  // Pixels survive byte quantization within half a level.
  for (std::size_t i = 0; i < ds.images.size(); ++i)
    CHECK(std::fabs(loaded.images[i] - ds.images[i]) <= 0.5 / 255.0 + 1e-12);
  // Re-saving the loaded dataset is byte-stable.
  const std::string path2 = "/tmp/sitar_test_container2.bin";
  data::save_container(path2, loaded);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), {});
  std::string s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);
  std::remove(path.c_str());
  std::remove(path2.c_str());
}
