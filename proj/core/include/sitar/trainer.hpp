#pragma once
// Joint VAE + classifier training loop, model selection on class-balanced
// validation accuracy, and deterministic test-time prediction from the
// posterior mean.
#include <cstdint>
#include <string>
#include <vector>

#include "sitar/datasets.hpp"
#include "sitar/nn.hpp"
#include "sitar/objectives.hpp"

namespace sitar::train {

struct ExperimentConfig {
  obj::LossConfig loss;      // alpha, beta, lambda_cons, isotropic, reweight
  int latent_dim = 10;
  int classes = 2;
  int epochs = 120;
  int batch_size = 128;
  // The encoder/decoder learn fast enough to pull the latent geometry away
  // from the color shortcut only at a higher rate than the classifier; the
  // split below (with a short linear warmup) is what makes the robust optimum
  // reachable within the epoch budget on CPU.
  double lr = 1e-2;
  double clf_lr = 1e-3;
  int warmup_steps = 400;
  // Linear decay of both learning rates to lr_decay_floor x base over the
  // tail of training, damping the late oscillation between shortcut-leaning
  // and robust solutions so checkpoint selection sees a converged model.
  double lr_decay_start_frac = 0.5;
  double lr_decay_floor = 0.1;
  double head_init_scale = 0.01;  // shrinks mu / log-var head weights at init
  int patience = 0;               // 0 disables early stopping
  // Fraction of training excluded from best-checkpoint selection. Before the
  // learning-rate decay completes, training oscillates between a
  // shortcut-aligned solution (which scores best on in-distribution
  // validation accuracy) and the robust one, so an unwindowed argmax
  // reliably lands on a shortcut-aligned spike; selection therefore only
  // considers the converged tail of the schedule.
  double selection_start_frac = 0.9;
  std::uint64_t seed = 0;
};

struct DataBundle {
  data::GroupedDataset train;
  data::GroupedDataset val;
  data::GroupedDataset test_in;
  data::GroupedDataset test_ood;
};

struct EpochRecord {
  int epoch = 0;
  obj::LossBreakdown loss;     // means over the epoch's batches
  double val_balanced = 0.0;
  double id_acc = 0.0;
  double ood_acc = 0.0;
  double worst_group = 0.0;
};

struct TrainState {
  nn::SitarModel model;        // parameters as of the end of training
  nn::ParamSet best_params;    // best checkpoint by balanced validation acc
  double best_metric = -1.0;
  int best_epoch = -1;
  std::vector<EpochRecord> history;
  std::vector<std::vector<double>> v_per_epoch;  // batch-mean v each epoch
  bool aborted = false;
  std::string abort_reason;
};

TrainState train(const ExperimentConfig& cfg, const DataBundle& data);

// argmax over classify(encode(x).mu); ties break to the lowest class index.
// Consumes no randomness.
std::vector<int> predict(const nn::SitarModel& model, const nn::ParamSet& params,
                         const data::GroupedDataset& split);

data::GroupMetrics evaluate(const nn::SitarModel& model, const nn::ParamSet& params,
                            const data::GroupedDataset& split);

// Deterministic 90/10 split of an in-distribution training set into
// train/validation parts (validation keeps the same color statistics).
void split_train_val(const data::GroupedDataset& full, double val_fraction,
                     std::uint64_t seed, data::GroupedDataset& train_out,
                     data::GroupedDataset& val_out);

}  // namespace sitar::train
