#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "sitar/trainer.hpp"

using namespace sitar;

namespace {

train::DataBundle tiny_bundle(std::size_t n_train, std::uint64_t seed) {
  data::Config cfg;
  cfg.seed = seed;
  train::DataBundle b;
  data::GroupedDataset full =
      data::synth_colorshapes(n_train + n_train / 9 + 1, cfg,
                              data::SplitKind::kInDistribution);
  train::split_train_val(full, 0.1, seed, b.train, b.val);
  b.test_in = data::synth_colorshapes(64, cfg, data::SplitKind::kInDistribution,
                                      1000000);
  b.test_ood = data::synth_colorshapes(64, cfg, data::SplitKind::kOutOfDistribution,
                                       2000000);
  return b;
}

train::ExperimentConfig tiny_config(std::uint64_t seed) {
  train::ExperimentConfig cfg;
  cfg.latent_dim = 4;
  cfg.epochs = 2;
  cfg.batch_size = 64;
  cfg.warmup_steps = 0;
  cfg.head_init_scale = 1.0;
  cfg.selection_start_frac = 0.0;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("epochs=0 returns the initialized state unchanged") {
  const auto bundle = tiny_bundle(128, 11);
  auto cfg = tiny_config(11);
  cfg.epochs = 0;
  const auto state = train::train(cfg, bundle);
  nn::SitarModel fresh(3, 28, 28, cfg.latent_dim, 2);
  fresh.init(cfg.seed, cfg.head_init_scale);
  for (std::size_t i = 0; i < fresh.params.size(); ++i) {
    CHECK(state.model.params.values[i].data == fresh.params.values[i].data);
    CHECK(state.best_params.values[i].data == fresh.params.values[i].data);
  }
  CHECK(state.history.empty());
  CHECK_FALSE(state.aborted);
}

TEST_CASE("training is bit-reproducible for a fixed seed") {
  const auto bundle = tiny_bundle(256, 12);
  const auto cfg = tiny_config(12);
  const auto a = train::train(cfg, bundle);
  const auto b = train::train(cfg, bundle);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t e = 0; e < a.history.size(); ++e) {
    CHECK(a.history[e].loss.total == b.history[e].loss.total);
    CHECK(a.history[e].val_balanced == b.history[e].val_balanced);
  }
  for (std::size_t i = 0; i < a.model.params.size(); ++i)
    CHECK(a.model.params.values[i].data == b.model.params.values[i].data);
  CHECK(a.v_per_epoch == b.v_per_epoch);
}

TEST_CASE("best checkpoint metric matches re-evaluation on the validation split") {
  const auto bundle = tiny_bundle(256, 13);
  const auto cfg = tiny_config(13);
  const auto state = train::train(cfg, bundle);
  REQUIRE(state.best_epoch >= 0);
  const auto metrics = train::evaluate(state.model, state.best_params, bundle.val);
  CHECK(metrics.balanced == doctest::Approx(state.best_metric).epsilon(1e-12));
  // Recorded best is the max over the eligible window.
  double best_seen = -1.0;
  for (const auto& rec : state.history) best_seen = std::max(best_seen, rec.val_balanced);
  CHECK(state.best_metric == doctest::Approx(best_seen).epsilon(1e-12));
}

TEST_CASE("windowed selection ignores epochs before the window start") {
  const auto bundle = tiny_bundle(256, 14);
  auto cfg = tiny_config(14);
  cfg.epochs = 4;
  cfg.selection_start_frac = 0.5;
  const auto state = train::train(cfg, bundle);
  CHECK(state.best_epoch >= 2);
}

TEST_CASE("prediction is deterministic, mean-based, and ties break low") {
  // All-zero parameters give identical (zero) logits everywhere: every
  // prediction must be class 0 by the tie rule.
  nn::SitarModel zero(3, 28, 28, 4, 2);
  data::Config dcfg;
  dcfg.seed = 15;
  const auto split = data::synth_colorshapes(16, dcfg, data::SplitKind::kInDistribution);
  const auto preds = train::predict(zero, zero.params, split);
  for (int p : preds) CHECK(p == 0);

  nn::SitarModel model(3, 28, 28, 4, 2);
  model.init(16);
  const auto p1 = train::predict(model, model.params, split);
  const auto p2 = train::predict(model, model.params, split);
  CHECK(p1 == p2);
}

TEST_CASE("non-finite loss aborts with a diagnostic and keeps a checkpoint") {
  const auto bundle = tiny_bundle(128, 17);
  auto cfg = tiny_config(17);
  cfg.lr = 1e155;  // first step flings parameters to overflow
  cfg.clf_lr = 1e155;
  cfg.epochs = 3;
  const auto state = train::train(cfg, bundle);
  CHECK(state.aborted);
  CHECK_FALSE(state.abort_reason.empty());
  // The retained checkpoint is still usable for prediction.
  const auto preds = train::predict(state.model, state.best_params, bundle.val);
  CHECK(preds.size() == bundle.val.n);
}

TEST_CASE("train/val split: sizes, determinism, preserved metadata") {
  data::Config dcfg;
  dcfg.seed = 18;
  const auto full = data::synth_colorshapes(200, dcfg, data::SplitKind::kInDistribution);
  data::GroupedDataset tr1, va1, tr2, va2;
  train::split_train_val(full, 0.1, 18, tr1, va1);
  train::split_train_val(full, 0.1, 18, tr2, va2);
  CHECK(va1.n == 20);
  CHECK(tr1.n == 180);
  CHECK(tr1.images == tr2.images);
  CHECK(va1.images == va2.images);
  CHECK(va1.p_c == full.p_c);
  // Different seed shuffles differently.
  data::GroupedDataset tr3, va3;
  train::split_train_val(full, 0.1, 19, tr3, va3);
  CHECK(va1.images != va3.images);
}

TEST_CASE("config validation rejects bad settings") {
  const auto bundle = tiny_bundle(64, 20);
  auto cfg = tiny_config(20);
  cfg.loss.alpha = -1.0;
  CHECK_THROWS(train::train(cfg, bundle));
  cfg = tiny_config(20);
  cfg.batch_size = 1;
  CHECK_THROWS(train::train(cfg, bundle));
}
