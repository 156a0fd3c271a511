#include "sitar/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "sitar/rng.hpp"

namespace sitar::train {

namespace {

// Adaptive-moment optimizer (decays 0.9 / 0.999, eps 1e-8, no weight decay)
// with a per-parameter-group base learning rate and optional linear warmup.
class Adam {
 public:
  Adam(const nn::ParamSet& params, const std::vector<double>& base_lr,
       int warmup_steps, long decay_start = 0, long total_steps = 0,
       double decay_floor = 1.0)
      : base_lr_(base_lr), warmup_(warmup_steps), decay_start_(decay_start),
        total_steps_(total_steps), decay_floor_(decay_floor) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params.values[i].size(), 0.0);
      v_[i].assign(params.values[i].size(), 0.0);
    }
  }

  void step(nn::ParamSet& params, const std::vector<std::vector<double>>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(0.9, t_);
    const double bc2 = 1.0 - std::pow(0.999, t_);
    double ramp = warmup_ > 0 ? std::min(1.0, static_cast<double>(t_) / warmup_)
                              : 1.0;
    if (total_steps_ > decay_start_ && t_ > decay_start_) {
      const double frac = std::min(
          1.0, static_cast<double>(t_ - decay_start_) /
                   static_cast<double>(total_steps_ - decay_start_));
      ramp *= 1.0 - (1.0 - decay_floor_) * frac;
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double lr = base_lr_[i] * ramp;
      auto& p = params.values[i].data;
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double g = grads[i][j];
        m_[i][j] = 0.9 * m_[i][j] + 0.1 * g;
        v_[i][j] = 0.999 * v_[i][j] + 0.001 * g * g;
        p[j] -= lr * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + 1e-8);
      }
    }
  }

 private:
  std::vector<std::vector<double>> m_, v_;
  std::vector<double> base_lr_;
  int warmup_ = 0;
  long decay_start_ = 0;
  long total_steps_ = 0;
  double decay_floor_ = 1.0;
  long t_ = 0;
};

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed,
                                          std::uint64_t epoch) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  rng::Stream s(seed, rng::Purpose::kShuffle, epoch);
  for (std::size_t i = n; i > 1; --i)
    std::swap(idx[i - 1], idx[s.next_below(i)]);
  return idx;
}

bool is_clf_param(std::size_t i) {
  return i >= nn::SitarModel::kClfW1 && i <= nn::SitarModel::kClfB2;
}

}  // namespace

std::vector<int> predict(const nn::SitarModel& model, const nn::ParamSet& params,
                         const data::GroupedDataset& split) {
  std::vector<int> out(split.n);
  const std::size_t chunk = 256;
  const int C = model.classes();
  for (std::size_t start = 0; start < split.n; start += chunk) {
    const std::size_t end = std::min(split.n, start + chunk);
    std::vector<std::size_t> idx(end - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    ad::Tape t;
    std::vector<ad::Var> p = nn::bind(t, params);
    nn::EncodeOut enc = model.encode(t, p, t.leaf(split.batch(idx)));
    // Prediction uses the posterior mean only; no sampling, no perturbation.
    ad::Var logits = model.classify(t, p, t.leaf(ad::stop_gradient(enc.mu)));
    const ad::Tensor& lv = t.value(logits);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      int best = 0;
      for (int k = 1; k < C; ++k)
        if (lv.data[b * C + k] > lv.data[b * C + best]) best = k;
      out[start + b] = best;
    }
  }
  return out;
}

data::GroupMetrics evaluate(const nn::SitarModel& model, const nn::ParamSet& params,
                            const data::GroupedDataset& split) {
  return data::group_metrics(predict(model, params, split), split);
}

void split_train_val(const data::GroupedDataset& full, double val_fraction,
                     std::uint64_t seed, data::GroupedDataset& train_out,
                     data::GroupedDataset& val_out) {
  const std::size_t n_val = static_cast<std::size_t>(
      std::floor(val_fraction * static_cast<double>(full.n)));
  ad::require(n_val >= 1 && n_val < full.n, "split_train_val: bad fraction");
  std::vector<std::size_t> idx = shuffled_indices(full.n, seed, /*epoch=*/~0ull);
  auto take = [&](std::size_t lo, std::size_t hi, data::GroupedDataset& out) {
    out = data::GroupedDataset{};
    out.channels = full.channels;
    out.height = full.height;
    out.width = full.width;
    out.p_d = full.p_d;
    out.p_c = full.p_c;
    out.seed = full.seed;
    const std::size_t sz = full.image_size();
    for (std::size_t i = lo; i < hi; ++i) {
      const std::size_t j = idx[i];
      out.images.insert(out.images.end(), full.images.begin() + j * sz,
                        full.images.begin() + (j + 1) * sz);
      out.y.push_back(full.y[j]);
      out.c.push_back(full.c[j]);
    }
    out.n = out.y.size();
  };
  take(0, full.n - n_val, train_out);
  take(full.n - n_val, full.n, val_out);
}

TrainState train(const ExperimentConfig& cfg, const DataBundle& data) {
  ad::require(cfg.loss.alpha >= 0 && cfg.loss.beta >= 0 && cfg.loss.lambda_cons >= 0,
              "train: weights must be nonnegative");
  ad::require(cfg.latent_dim >= 1, "train: latent_dim must be >= 1");
  ad::require(cfg.batch_size >= 2, "train: batch size must be >= 2");

  TrainState state;
  state.model = nn::SitarModel(data.train.channels, data.train.height,
                               data.train.width, cfg.latent_dim, cfg.classes);
  state.model.init(cfg.seed, cfg.head_init_scale);
  state.best_params = state.model.params;

  std::vector<double> base_lr(state.model.params.size());
  const double clf_lr = cfg.clf_lr > 0.0 ? cfg.clf_lr : cfg.lr;
  for (std::size_t i = 0; i < base_lr.size(); ++i)
    base_lr[i] = is_clf_param(i) ? clf_lr : cfg.lr;
  const long steps_per_epoch =
      static_cast<long>((data.train.n + cfg.batch_size - 1) / cfg.batch_size);
  const long total_steps = steps_per_epoch * cfg.epochs;
  const long decay_start = static_cast<long>(
      std::floor(cfg.lr_decay_start_frac * static_cast<double>(total_steps)));
  Adam opt(state.model.params, base_lr, cfg.warmup_steps, decay_start,
           total_steps, cfg.lr_decay_floor);

  const std::size_t m = static_cast<std::size_t>(cfg.latent_dim);
  const int window_start = static_cast<int>(
      std::floor(cfg.selection_start_frac * static_cast<double>(cfg.epochs)));
  int last_improvement = -1;
  std::uint64_t step = 0;
  std::vector<double> v_ema;  // running average of the correlation proxy

  std::vector<std::vector<double>> grads(state.model.params.size());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<std::size_t> order =
        shuffled_indices(data.train.n, cfg.seed, static_cast<std::uint64_t>(epoch));
    obj::LossBreakdown epoch_loss;
    std::vector<double> v_sum(m, 0.0);
    std::size_t n_batches = 0;

    for (std::size_t off = 0; off < data.train.n;
         off += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(data.train.n, off + static_cast<std::size_t>(cfg.batch_size));
      if (end - off < 2) break;  // batchwise correlation needs >= 2 examples
      std::vector<std::size_t> idx(order.begin() + off, order.begin() + end);
      std::vector<int> y(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) y[i] = data.train.y[idx[i]];

      ad::Tape t;
      std::vector<ad::Var> p = nn::bind(t, state.model.params);
      obj::TotalLossOut loss = obj::total_loss(t, state.model, p,
                                               data.train.batch(idx), y, cfg.loss,
                                               cfg.seed, step, &v_ema);
      if (!std::isfinite(loss.values.total)) {
        state.aborted = true;
        state.abort_reason = "non-finite loss at epoch " + std::to_string(epoch) +
                             ", step " + std::to_string(step);
        return state;
      }
      t.backward(loss.total);
      for (std::size_t i = 0; i < p.size(); ++i) grads[i] = t.grad(p[i]);
      opt.step(state.model.params, grads);

      epoch_loss.recon += loss.values.recon;
      epoch_loss.kl += loss.values.kl;
      epoch_loss.robust_ce += loss.values.robust_ce;
      epoch_loss.consistency += loss.values.consistency;
      epoch_loss.total += loss.values.total;
      for (std::size_t j = 0; j < m; ++j) v_sum[j] += loss.weights.v[j];
      ++n_batches;
      ++step;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    if (n_batches > 0) {
      const double inv = 1.0 / static_cast<double>(n_batches);
      rec.loss.recon = epoch_loss.recon * inv;
      rec.loss.kl = epoch_loss.kl * inv;
      rec.loss.robust_ce = epoch_loss.robust_ce * inv;
      rec.loss.consistency = epoch_loss.consistency * inv;
      rec.loss.total = epoch_loss.total * inv;
      for (auto& v : v_sum) v *= inv;
    }
    state.v_per_epoch.push_back(v_sum);

    rec.val_balanced =
        evaluate(state.model, state.model.params, data.val).balanced;
    const data::GroupMetrics mid =
        evaluate(state.model, state.model.params, data.test_in);
    rec.id_acc = mid.micro;
    rec.worst_group = mid.worst_group;
    rec.ood_acc = evaluate(state.model, state.model.params, data.test_ood).micro;
    state.history.push_back(rec);

    if (epoch >= window_start && rec.val_balanced > state.best_metric) {
      state.best_metric = rec.val_balanced;
      state.best_epoch = epoch;
      state.best_params = state.model.params;
      last_improvement = epoch;
    }
    if (cfg.patience > 0 && last_improvement >= 0 &&
        epoch - last_improvement >= cfg.patience)
      break;
  }
  if (state.best_epoch < 0) state.best_params = state.model.params;
  return state;
}

}  // namespace sitar::train
