#pragma once

// Toy-scale training harness: SGD with momentum and weight decay folded into
// the lr-scaled update, cosine learning-rate decay, label smoothing, and
// optional mutual learning against a co-trained full-rank partner (the
// student adds beta * KL(partner_detached || student) to its cross entropy;
// the partner trains on plain cross entropy, or symmetrically with a flag).
// Datasets are small in-memory image sets: a built-in synthetic generator
// (Gaussian color blobs on a ring, one hue per class) and a loader for a
// directory tree root/<class>/<image> of PPM/PGM files.
//
// Metric logs are line-delimited JSON records: one object per epoch with
// epoch, lr, student_ce, kl, partner_ce, loss, and train_acc fields.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "micronet/autograd.hpp"
#include "micronet/common.hpp"
#include "micronet/image.hpp"
#include "micronet/network.hpp"
#include "micronet/rng.hpp"
#include "micronet/tensor.hpp"

namespace micronet {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 32;
  double lr0 = 0.1;
  double momentum = 0.9;
  double weight_decay = 3e-5;
  double label_smoothing = 0.1;
  double mutual_beta = 1.0;       // weight of the KL term
  bool mutual_symmetric = false;  // partner also distills from the student
  std::uint64_t seed = 1;
  int threads = 1;

  void validate() const {
    if (epochs < 1 || batch_size < 1) {
      throw ConfigError("training wants epochs >= 1 and batch size >= 1");
    }
    if (lr0 <= 0.0 || momentum < 0.0 || weight_decay < 0.0 ||
        label_smoothing < 0.0 || label_smoothing >= 1.0 || mutual_beta < 0.0) {
      throw ConfigError("training hyperparameters out of range");
    }
  }
};

/// lr0 * (1 + cos(pi * step / total)) / 2.
inline double cosine_lr(std::int64_t step, std::int64_t total_steps,
                        double lr0) {
  if (total_steps < 1 || step < 0 || step > total_steps) {
    throw ConfigError("cosine_lr wants 0 <= step <= total_steps");
  }
  return lr0 *
         (1.0 + std::cos(M_PI * static_cast<double>(step) /
                         static_cast<double>(total_steps))) /
         2.0;
}

/// SGD with momentum; weight decay is added to the gradient so the whole
/// update is scaled by lr (lr = 0 changes nothing, decay included).
template <typename T>
class SgdOptimizer {
 public:
  explicit SgdOptimizer(const std::vector<Param<T>>& params) {
    velocity_.reserve(params.size());
    for (const auto& p : params) {
      velocity_.push_back(Tensor<T>(p.node->value.shape()));
    }
  }

  void step(const std::vector<Param<T>>& params, double lr, double momentum,
            double weight_decay) {
    if (params.size() != velocity_.size()) {
      throw DimensionError("optimizer was built for a different param set");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& w = params[i].node->value;
      const Tensor<T>& g = params[i].node->grad;
      Tensor<T>& v = velocity_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double raw = static_cast<double>(g[j]) +
                           weight_decay * static_cast<double>(w[j]);
        const double vel =
            momentum * static_cast<double>(v[j]) + raw;
        v[j] = static_cast<T>(vel);
        w[j] = static_cast<T>(static_cast<double>(w[j]) - lr * vel);
      }
    }
  }

 private:
  std::vector<Tensor<T>> velocity_;
};

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct Dataset {
  std::vector<Tensor<float>> images;  // each (1, C, H, W)
  std::vector<int> labels;
  int num_classes = 0;
  std::vector<std::string> class_names;

  std::size_t size() const { return images.size(); }

  void require_nonempty() const {
    if (images.empty()) throw NumericError("dataset is empty");
    if (images.size() != labels.size()) {
      throw DimensionError("dataset image/label count mismatch");
    }
  }
};

/// Synthetic classification set: each class is a Gaussian blob with a fixed
/// hue, centered on a class-specific point of a ring, over noise. Balanced
/// and fully determined by the seed.
inline Dataset make_synthetic_blobs(int num_classes, int per_class,
                                    int channels, int h, int w,
                                    std::uint64_t seed) {
  if (num_classes < 2 || per_class < 1 || channels < 1 || h < 4 || w < 4) {
    throw ConfigError("synthetic set wants >= 2 classes, >= 4x4 images");
  }
  Dataset ds;
  ds.num_classes = num_classes;
  Rng rng(seed);
  for (int k = 0; k < num_classes; ++k) {
    ds.class_names.push_back("blob-" + std::to_string(k));
  }
  // One well-separated color per class (phase-shifted cosines).
  auto color = [&](int k, int c) {
    const double phase =
        2.0 * M_PI * (static_cast<double>(k) / num_classes +
                      static_cast<double>(c) / (3.0 * num_classes));
    return 0.5 + 0.5 * std::cos(phase + 1.7 * c);
  };
  for (int k = 0; k < num_classes; ++k) {
    const double angle = 2.0 * M_PI * k / num_classes;
    for (int s = 0; s < per_class; ++s) {
      Tensor<float> img(1, channels, h, w);
      const double cy =
          h * (0.5 + 0.27 * std::sin(angle)) + rng.normal(0.0, h * 0.02);
      const double cx =
          w * (0.5 + 0.27 * std::cos(angle)) + rng.normal(0.0, w * 0.02);
      const double sigma = 0.10 * std::min(h, w) * (0.9 + 0.2 * rng.uniform());
      for (int c = 0; c < channels; ++c) {
        const double col = color(k, c);
        for (int y = 0; y < h; ++y) {
          for (int x = 0; x < w; ++x) {
            const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
            double v = col * std::exp(-d2 / (2.0 * sigma * sigma)) +
                       rng.normal(0.0, 0.04);
            v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
            img.at(0, c, y, x) = static_cast<float>(v);
          }
        }
      }
      ds.images.push_back(std::move(img));
      ds.labels.push_back(k);
    }
  }
  return ds;
}

/// Loads root/<class>/<image> (PPM/PGM), resizing to (h, w) and adapting to
/// `channels`. Classes are the sorted subdirectory names.
inline Dataset load_image_directory(const std::string& root, int channels,
                                    int h, int w) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) {
    throw ConfigError("dataset root '" + root + "' is not a directory");
  }
  std::vector<std::string> class_dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) class_dirs.push_back(e.path().filename().string());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  Dataset ds;
  ds.num_classes = static_cast<int>(class_dirs.size());
  ds.class_names = class_dirs;
  for (int k = 0; k < ds.num_classes; ++k) {
    std::vector<std::string> files;
    for (const auto& e :
         fs::directory_iterator(fs::path(root) / class_dirs[k])) {
      if (e.is_regular_file()) files.push_back(e.path().string());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      Tensor<float> img = adapt_channels(read_pnm(f), channels);
      ds.images.push_back(nearest_resize(img, h, w));
      ds.labels.push_back(k);
    }
  }
  ds.require_nonempty();
  return ds;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor<float> stack_batch(const Dataset& ds,
                                 const std::vector<std::size_t>& order,
                                 std::size_t first, std::size_t count) {
  const Shape4 s = ds.images[order[first]].shape();
  Tensor<float> batch(static_cast<int>(count), s.c, s.h, s.w);
  for (std::size_t b = 0; b < count; ++b) {
    const Tensor<float>& img = ds.images[order[first + b]];
    if (img.shape() != s) {
      throw DimensionError("dataset images have mixed shapes");
    }
    const std::size_t stride = img.size();
    for (std::size_t i = 0; i < stride; ++i) {
      batch[b * stride + i] = img[i];
    }
  }
  return batch;
}

}  // namespace detail

struct StepLosses {
  double student_ce = 0.0;
  double kl = 0.0;
  double partner_ce = 0.0;
  double student_total = 0.0;
};

/// One optimization step. Without a partner this is plain smoothed-CE SGD;
/// with one, the student adds beta * KL(partner_detached || student) and the
/// partner co-trains on its own cross entropy (plus the mirrored KL when
/// cfg.mutual_symmetric).
inline StepLosses mutual_learn_step(
    Network<float>& student, SgdOptimizer<float>& student_opt,
    Network<float>* partner, SgdOptimizer<float>* partner_opt,
    const Tensor<float>& batch, const std::vector<int>& labels,
    const TrainConfig& cfg, double lr, Rng& rng) {
  ag::ExecContext ctx;
  ctx.training = true;
  ctx.threads = cfg.threads;
  ctx.rng = &rng;

  StepLosses out;
  auto student_params = student.params();

  ag::NodePtr<float> partner_logits;
  if (partner) {
    partner->zero_grads();
    partner_logits = partner->forward(batch, ctx);
  }

  student.zero_grads();
  auto logits = student.forward(batch, ctx);
  auto ce = ag::smoothed_cross_entropy(logits, labels, cfg.label_smoothing);
  out.student_ce = static_cast<double>(ce->value[0]);
  ag::NodePtr<float> total = ce;
  if (partner) {
    const Tensor<float> teacher = softmax_forward(partner_logits->value);
    auto kl = ag::kl_to_fixed(logits, teacher);
    out.kl = static_cast<double>(kl->value[0]);
    total = ag::add(total,
                    ag::affine_channels(kl,
                                        static_cast<float>(cfg.mutual_beta),
                                        std::vector<float>{0.0f}));
  }
  out.student_total = static_cast<double>(total->value[0]);
  if (!std::isfinite(out.student_total)) {
    throw NumericError("nonfinite training loss (student): ce=" +
                       std::to_string(out.student_ce) +
                       " kl=" + std::to_string(out.kl) +
                       " lr=" + std::to_string(lr));
  }
  ag::backward(total);
  student_opt.step(student_params, lr, cfg.momentum, cfg.weight_decay);

  if (partner) {
    auto partner_ce =
        ag::smoothed_cross_entropy(partner_logits, labels,
                                   cfg.label_smoothing);
    out.partner_ce = static_cast<double>(partner_ce->value[0]);
    ag::NodePtr<float> partner_total = partner_ce;
    if (cfg.mutual_symmetric) {
      const Tensor<float> student_probs = softmax_forward(logits->value);
      auto kl_back = ag::kl_to_fixed(partner_logits, student_probs);
      partner_total = ag::add(
          partner_total,
          ag::affine_channels(kl_back, static_cast<float>(cfg.mutual_beta),
                              std::vector<float>{0.0f}));
    }
    if (!std::isfinite(static_cast<double>(partner_total->value[0]))) {
      throw NumericError("nonfinite training loss (partner): ce=" +
                         std::to_string(out.partner_ce));
    }
    ag::backward(partner_total);
    auto partner_params = partner->params();
    partner_opt->step(partner_params, lr, cfg.momentum, cfg.weight_decay);
  }
  return out;
}

struct EvalResult {
  double accuracy = 0.0;
  double mean_ce = 0.0;
};

/// Eval-mode accuracy and mean smoothed CE over a dataset.
inline EvalResult evaluate(Network<float>& net, const Dataset& ds,
                           int batch_size, double label_smoothing,
                           int threads = 1) {
  ds.require_nonempty();
  ag::ExecContext ctx;
  ctx.threads = threads;
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t correct = 0;
  double ce_sum = 0.0;
  std::size_t done = 0;
  while (done < ds.size()) {
    const std::size_t count =
        std::min<std::size_t>(static_cast<std::size_t>(batch_size),
                              ds.size() - done);
    const Tensor<float> batch = detail::stack_batch(ds, order, done, count);
    std::vector<int> labels(count);
    for (std::size_t b = 0; b < count; ++b) {
      labels[b] = ds.labels[done + b];
    }
    auto logits = net.forward(batch, ctx);
    const Tensor<float>& v = logits->value;
    for (std::size_t b = 0; b < count; ++b) {
      int best = 0;
      for (int k = 1; k < v.c(); ++k) {
        if (v.at(static_cast<int>(b), k, 0, 0) >
            v.at(static_cast<int>(b), best, 0, 0)) {
          best = k;
        }
      }
      if (best == labels[b]) ++correct;
    }
    auto ce = ag::smoothed_cross_entropy(logits, labels, label_smoothing);
    ce_sum += static_cast<double>(ce->value[0]) * static_cast<double>(count);
    done += count;
  }
  EvalResult r;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(ds.size());
  r.mean_ce = ce_sum / static_cast<double>(ds.size());
  return r;
}

struct TrainResult {
  std::vector<std::string> log_lines;  // one JSON object per epoch
  double final_train_accuracy = 0.0;
  double final_student_ce = 0.0;  // eval-mode mean CE after the last epoch
  double final_partner_ce = 0.0;
};

/// Epochs of shuffled minibatch SGD with cosine decay; logs one JSON line
/// per epoch. Deterministic given the seed and threads = 1.
inline TrainResult train_toy(Network<float>& net, const Dataset& ds,
                             const TrainConfig& cfg,
                             std::ostream* log = nullptr,
                             Network<float>* partner = nullptr) {
  cfg.validate();
  ds.require_nonempty();
  if (ds.num_classes != net.arch.num_classes) {
    throw ConfigError("dataset has " + std::to_string(ds.num_classes) +
                      " classes but the architecture expects " +
                      std::to_string(net.arch.num_classes));
  }
  Rng rng(cfg.seed);
  auto student_params = net.params();
  SgdOptimizer<float> opt(student_params);
  std::unique_ptr<SgdOptimizer<float>> partner_opt;
  if (partner) {
    auto pp = partner->params();
    partner_opt = std::make_unique<SgdOptimizer<float>>(pp);
  }

  const std::size_t n = ds.size();
  const std::int64_t steps_per_epoch =
      static_cast<std::int64_t>((n + cfg.batch_size - 1) / cfg.batch_size);
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;

  TrainResult result;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double ce_sum = 0.0, kl_sum = 0.0, pce_sum = 0.0;
    double last_lr = 0.0;
    std::int64_t batches = 0;
    for (std::size_t first = 0; first < n;
         first += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t count = std::min<std::size_t>(
          static_cast<std::size_t>(cfg.batch_size), n - first);
      const Tensor<float> batch = detail::stack_batch(ds, order, first, count);
      std::vector<int> labels(count);
      for (std::size_t b = 0; b < count; ++b) {
        labels[b] = ds.labels[order[first + b]];
      }
      last_lr = cosine_lr(step, total_steps, cfg.lr0);
      const StepLosses losses =
          mutual_learn_step(net, opt, partner, partner_opt.get(), batch,
                            labels, cfg, last_lr, rng);
      ce_sum += losses.student_ce;
      kl_sum += losses.kl;
      pce_sum += losses.partner_ce;
      ++step;
      ++batches;
    }
    const EvalResult ev =
        evaluate(net, ds, cfg.batch_size, cfg.label_smoothing, cfg.threads);
    nlohmann::json line;
    line["epoch"] = epoch;
    line["lr"] = last_lr;
    line["student_ce"] = ce_sum / static_cast<double>(batches);
    line["kl"] = kl_sum / static_cast<double>(batches);
    if (partner) {
      line["partner_ce"] = pce_sum / static_cast<double>(batches);
    }
    line["train_acc"] = ev.accuracy;
    result.log_lines.push_back(line.dump());
    if (log) (*log) << result.log_lines.back() << "\n";
    result.final_train_accuracy = ev.accuracy;
    result.final_student_ce = ev.mean_ce;
  }
  if (partner) {
    result.final_partner_ce =
        evaluate(*partner, ds, cfg.batch_size, cfg.label_smoothing,
                 cfg.threads)
            .mean_ce;
  }
  return result;
}

}  // namespace micronet
