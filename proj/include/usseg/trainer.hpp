#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "usseg/config.hpp"
#include "usseg/inference.hpp"
#include "usseg/losses.hpp"
#include "usseg/metrics.hpp"
#include "usseg/optim.hpp"
#include "usseg/patches.hpp"
#include "usseg/phantom.hpp"
#include "usseg/unet.hpp"

namespace usseg {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Task { segment, classify };

inline std::string_view to_string(Task t) { return t == Task::segment ? "segment" : "classify"; }
inline Task parse_task(std::string_view s) {
  if (s == "segment") return Task::segment;
  if (s == "classify") return Task::classify;
  throw std::invalid_argument("unknown task '" + std::string(s) + "'");
}

struct TrainConfig {
  ModelConfig model;
  Task task = Task::segment;
  std::string schedule = "seg";
  double learning_rate = 0.1;
  std::size_t epochs = 250;
  std::size_t batch_size = 2;
  AdamHyper adam;
  double lr_drop_factor = 1.0;
  std::size_t lr_drop_period = 0;
  bool augment = false;
  std::size_t input_size = 0;  // square network input; 0 keeps the native image size
  std::size_t classifier_width = 8;
  std::string data_images;
  std::string data_masks;
  std::string out_dir = "run";

  std::uint64_t seed() const { return model.seed; }

  void validate() const {
    model.validate();
    if (epochs == 0) throw std::invalid_argument("epochs must be positive");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("lr must be positive");
    if (!(lr_drop_factor > 0.0)) throw std::invalid_argument("lr_drop_factor must be positive");
    if (task == Task::classify && classifier_width == 0) {
      throw std::invalid_argument("classifier_width must be positive");
    }
  }

  bool operator==(const TrainConfig&) const = default;
};

/// `seg`: lr 0.1, 250 epochs, batch 2, no decay. `patch`: lr 0.01, 120 epochs, batch 32,
/// lr x 1e-5 every 100 epochs.
inline void apply_preset(TrainConfig& c, std::string_view name) {
  if (name == "seg") {
    c.learning_rate = 0.1;
    c.epochs = 250;
    c.batch_size = 2;
    c.lr_drop_factor = 1.0;
    c.lr_drop_period = 0;
  } else if (name == "patch") {
    c.learning_rate = 0.01;
    c.epochs = 120;
    c.batch_size = 32;
    c.lr_drop_factor = 1e-5;
    c.lr_drop_period = 100;
  } else {
    throw std::invalid_argument("unknown schedule '" + std::string(name) + "'");
  }
  c.schedule = std::string(name);
  c.adam = AdamHyper{};
}

/// Recommended learning rate for desk-scale runs where the `seg` preset's 0.1 diverges.
inline constexpr double kDeskLearningRate = 1e-3;

inline TrainConfig read_train_config(KeyValues& kv) {
  TrainConfig c;
  try {
    if (auto v = kv.take("schedule")) apply_preset(c, *v);
    if (auto v = kv.take("task")) c.task = parse_task(*v);
    c.model = read_model_config(kv);
    kv.take_to("lr", c.learning_rate);
    kv.take_to("epochs", c.epochs);
    kv.take_to("batch_size", c.batch_size);
    kv.take_to("adam_beta1", c.adam.beta1);
    kv.take_to("adam_beta2", c.adam.beta2);
    kv.take_to("adam_eps", c.adam.eps);
    kv.take_to("lr_drop_factor", c.lr_drop_factor);
    kv.take_to("lr_drop_period", c.lr_drop_period);
    kv.take_to("augment", c.augment);
    kv.take_to("input_size", c.input_size);
    kv.take_to("classifier_width", c.classifier_width);
    kv.take_to("data_images", c.data_images);
    kv.take_to("data_masks", c.data_masks);
    kv.take_to("out_dir", c.out_dir);
    kv.finish();
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(kv.source() + ": " + e.what());
  }
  return c;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  KeyValues kv = KeyValues::load(path);
  return read_train_config(kv);
}

inline TrainConfig parse_train_config(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  KeyValues kv = KeyValues::parse(in, source);
  return read_train_config(kv);
}

inline void write_train_config(std::ostream& out, const TrainConfig& c) {
  std::ostringstream o;
  o.precision(17);
  o << "schedule=" << c.schedule << "\n" << "task=" << to_string(c.task) << "\n";
  write_model_config(o, c.model);
  o << "lr=" << c.learning_rate << "\n"
    << "epochs=" << c.epochs << "\n"
    << "batch_size=" << c.batch_size << "\n"
    << "adam_beta1=" << c.adam.beta1 << "\n"
    << "adam_beta2=" << c.adam.beta2 << "\n"
    << "adam_eps=" << c.adam.eps << "\n"
    << "lr_drop_factor=" << c.lr_drop_factor << "\n"
    << "lr_drop_period=" << c.lr_drop_period << "\n"
    << "augment=" << (c.augment ? "true" : "false") << "\n"
    << "input_size=" << c.input_size << "\n"
    << "classifier_width=" << c.classifier_width << "\n";
  // Paths last; they may legitimately be empty.
  if (!c.data_images.empty()) o << "data_images=" << c.data_images << "\n";
  if (!c.data_masks.empty()) o << "data_masks=" << c.data_masks << "\n";
  if (!c.out_dir.empty()) o << "out_dir=" << c.out_dir << "\n";
  out << o.str();
}

inline std::string train_config_text(const TrainConfig& c) {
  std::ostringstream o;
  write_train_config(o, c);
  return o.str();
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// 52 of every 76 hash buckets train, the rest validate.
inline bool is_training_id(std::string_view source_id) { return fnv1a(source_id) % 76 < 52; }

/// One training example. For classification the mask is 1 x 1 and holds the label.
struct Sample {
  std::string id;
  std::string source_id;
  Raster image;
  SegmentationMask mask;
};

struct DataSplit {
  std::vector<Sample> train;
  std::vector<Sample> val;
};

inline DataSplit split_samples(std::vector<Sample> all) {
  DataSplit s;
  for (auto& x : all) (is_training_id(x.source_id) ? s.train : s.val).push_back(std::move(x));
  return s;
}

std::vector<Sample> segmentation_samples(const std::vector<ImagePair>& pairs,
                                                std::size_t input_size);

/// Multi-scale labelled patches (background thinned 1 in 8 per image), resized for the
/// tile classifier.
std::vector<Sample> classification_samples(const std::vector<ImagePair>& pairs);

inline Tensor batch_inputs(const std::vector<const Sample*>& batch, std::size_t channels) {
  std::vector<Tensor> items;
  for (const Sample* s : batch) items.push_back(to_tensor(s->image, channels));
  return stack(items);
}

inline Tensor batch_targets(const std::vector<const Sample*>& batch) {
  std::vector<Tensor> items;
  for (const Sample* s : batch) items.push_back(to_tensor(s->mask));
  return stack(items);
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

struct StepResult {
  double loss = 0.0;
  bool applied = true;  // false when Adam rejected a non-finite gradient
};

/// One forward/backward/Adam step; the loss is taken on the tumour channel.
template <class Net>
StepResult train_step(Net& net, const LossConfig& loss, const Tensor& inputs, const Tensor& targets,
                      AdamState& adam, double lr, const AdamHyper& hyper) {
  ParamStore& store = net.store();
  store.zero_grad();
  Tape tape;
  const Var probs = net.forward(tape, inputs, Mode::train);
  const Var scores = select_channel(tape, probs, 1);
  const Var l = loss_expr(tape, loss, scores, targets);
  StepResult r;
  r.loss = l.value().item();
  if (!std::isfinite(r.loss)) return r;
  backward(tape, l);
  r.applied = adam_step(store.params(), adam, lr, hyper);
  return r;
}

struct ValidationResult {
  double loss = 0.0;
  double mean_iou = 0.0;
};

/// Infer-mode loss (mean over batches) and mean IoU. Segmentation averages per-image mean IoU;
/// classification pools the confusion counts over all samples.
template <class Net>
ValidationResult validate(Net& net, const LossConfig& loss, const std::vector<Sample>& samples,
                          std::size_t batch_size, std::size_t channels, bool pooled) {
  if (samples.empty()) throw std::invalid_argument("validate: no samples");
  ValidationResult v;
  std::size_t batches = 0;
  double iou_sum = 0.0;
  ConfusionCounts pooled_counts;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    std::vector<const Sample*> batch;
    for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) {
      batch.push_back(&samples[i]);
    }
    const Tensor x = batch_inputs(batch, channels);
    const Tensor y = batch_targets(batch);
    Tape tape(false);
    const Var probs = net.forward(tape, x, Mode::infer);
    const Var scores = select_channel(tape, probs, 1);
    v.loss += loss_expr(tape, loss, scores, y).value().item();
    ++batches;
    for (std::size_t n = 0; n < batch.size(); ++n) {
      const SegmentationMask pred = threshold(ProbabilityMap::from_scores(probs.value(), n));
      const ConfusionCounts c = confusion_counts(pred, batch[n]->mask);
      if (pooled) {
        pooled_counts.p_bb += c.p_bb;
        pooled_counts.p_tt += c.p_tt;
        pooled_counts.p_tb += c.p_tb;
        pooled_counts.p_bt += c.p_bt;
      } else {
        iou_sum += mean_iou(c);
      }
    }
  }
  v.loss /= static_cast<double>(batches);
  v.mean_iou = pooled ? mean_iou(pooled_counts) : iou_sum / static_cast<double>(samples.size());
  return v;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct EpochRow {
  std::size_t epoch = 0;  // 1-based in logs
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_mean_iou = 0.0;
  bool operator==(const EpochRow&) const = default;
};

inline constexpr const char* kEpochLogHeader = "epoch,train_loss,val_loss,val_mean_iou";

inline std::string format_epoch_row(const EpochRow& r) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g", r.epoch, r.train_loss, r.val_loss,
                r.val_mean_iou);
  return buf;
}

struct TrainState {
  std::size_t epochs_done = 0;
  AdamState adam;
  bool has_best = false;
  double best_metric = 0.0;
  std::size_t best_epoch = 0;
  std::vector<EpochRow> history;
  std::size_t rejected_steps = 0;
};

struct Checkpoint {
  struct Param {
    std::string name;
    Tensor value;
    Tensor m;
    Tensor v;
  };
  struct Stats {
    std::string name;
    Tensor mean;
    Tensor var;
  };
  std::string config_text;
  std::size_t epochs_done = 0;
  std::uint64_t adam_t = 0;
  bool has_best = false;
  double best_metric = 0.0;
  std::size_t best_epoch = 0;
  std::size_t rejected_steps = 0;
  std::vector<EpochRow> history;
  std::vector<Param> params;  // sorted by name
  std::vector<Stats> stats;   // sorted by name
};

inline constexpr char kCheckpointMagic[8] = {'U', 'S', 'S', 'E', 'G', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;


void write_checkpoint(std::ostream& out, const Checkpoint& c);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c);

Checkpoint read_checkpoint(std::istream& in, const std::string& source);

Checkpoint load_checkpoint(const std::filesystem::path& path);

TrainConfig checkpoint_config(const Checkpoint& c);

Checkpoint make_checkpoint(const ParamStore& store, const TrainConfig& cfg,
                                  const TrainState& st);

/// Copies parameters and statistics into `store` (names must match exactly) and returns the
/// training state carried by the checkpoint.
TrainState restore_checkpoint(ParamStore& store, const Checkpoint& c);

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

inline std::uint64_t sample_seed(std::uint64_t seed, std::size_t epoch, std::size_t index) {
  return detail::mix_seed(detail::mix_seed(seed, epoch), index);
}

/// Same geometric transform applied to a sample's image and mask.
inline Augmented augment_pair(const Sample& s, const AugmentSpec& spec) {
  return augment(s.image, &s.mask, spec);
}

struct LoopHooks {
  // Called after every epoch; `improved` marks a new best validation mean IoU.
  std::function<void(const TrainState&, bool improved)> on_epoch;
  std::ostream* progress = nullptr;
  std::size_t stop_after = 0;  // stop once this many epochs are done (0: run to cfg.epochs)
};

/// Runs epochs state.epochs_done .. cfg.epochs-1. Deterministic given (cfg, data, state).
template <class Net>
void train_loop(Net& net, const TrainConfig& cfg, const DataSplit& data, TrainState& state,
                const LoopHooks& hooks = {}) {
  if (data.train.empty()) throw TrainingError("training set is empty");
  if (data.val.empty()) throw TrainingError("validation set is empty");
  const std::size_t channels = cfg.task == Task::segment ? cfg.model.in_channels : 1;
  const bool augment = cfg.augment && cfg.task == Task::segment;
  if (state.adam.m.size() != net.store().size()) state.adam = AdamState(net.store().params());
  const std::size_t last = hooks.stop_after ? std::min(hooks.stop_after, cfg.epochs) : cfg.epochs;
  while (state.epochs_done < last) {
    const std::size_t epoch = state.epochs_done;
    const double lr = lr_schedule(epoch, cfg.learning_rate, cfg.lr_drop_factor, cfg.lr_drop_period);
    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(detail::mix_seed(cfg.seed(), epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<Sample> augmented;
      std::vector<const Sample*> batch;
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      augmented.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const Sample& s = data.train[order[i]];
        if (augment) {
          const AugmentSpec spec = AugmentSpec::sample(sample_seed(cfg.seed(), epoch, order[i]));
          Augmented a = augment_pair(s, spec);
          augmented.push_back(Sample{s.id, s.source_id, std::move(a.image),
                                     std::move(*a.mask)});
          batch.push_back(&augmented.back());
        } else {
          batch.push_back(&s);
        }
      }
      const StepResult r = train_step(net, cfg.model.loss, batch_inputs(batch, channels),
                                      batch_targets(batch), state.adam, lr, cfg.adam);
      if (!std::isfinite(r.loss)) {
        std::string ids;
        for (const Sample* s : batch) ids += (ids.empty() ? "" : ",") + s->id;
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                            std::to_string(batches) + " (" + ids + ")");
      }
      if (!r.applied) {
        ++state.rejected_steps;
        if (hooks.progress) {
          *hooks.progress << "epoch " << epoch + 1 << " batch " << batches
                          << ": non-finite gradient, step rejected\n";
        }
      }
      loss_sum += r.loss;
      ++batches;
    }

    const ValidationResult v = validate(net, cfg.model.loss, data.val, cfg.batch_size, channels,
                                        cfg.task == Task::classify);
    EpochRow row{epoch + 1, loss_sum / static_cast<double>(batches), v.loss, v.mean_iou};
    state.history.push_back(row);
    state.epochs_done = epoch + 1;
    const bool improved = !state.has_best || v.mean_iou > state.best_metric;
    if (improved) {
      state.has_best = true;
      state.best_metric = v.mean_iou;
      state.best_epoch = epoch + 1;
    }
    if (hooks.progress) *hooks.progress << format_epoch_row(row) << (improved ? " *" : "") << "\n";
    if (hooks.on_epoch) hooks.on_epoch(state, improved);
  }
}

void write_epoch_log(const std::filesystem::path& path, const std::vector<EpochRow>& rows);

struct TrainResult {
  TrainState state;
  std::filesystem::path best_checkpoint;
  std::filesystem::path final_checkpoint;
  std::filesystem::path epoch_log;
};

std::vector<Sample> load_samples(const TrainConfig& cfg);

/// Trains on data_images/data_masks and writes best.ckpt, final.ckpt, last.ckpt (resume point)
/// and epoch_log.csv into out_dir.
template <class Net>
TrainResult train_network(Net& net, const TrainConfig& cfg, const DataSplit& data,
                          std::optional<Checkpoint> resume = std::nullopt,
                          std::ostream* progress = nullptr, std::size_t stop_after = 0) {
  namespace fs = std::filesystem;
  const fs::path out = cfg.out_dir;
  fs::create_directories(out);
  TrainResult res;
  res.best_checkpoint = out / "best.ckpt";
  res.final_checkpoint = out / "final.ckpt";
  res.epoch_log = out / "epoch_log.csv";
  TrainState state;
  if (resume) {
    const TrainConfig saved = checkpoint_config(*resume);
    if (!(saved.model == cfg.model) || saved.task != cfg.task ||
        saved.classifier_width != cfg.classifier_width) {
      throw TrainingError("checkpoint was written for a different model configuration");
    }
    state = restore_checkpoint(net.store(), *resume);
  }
  LoopHooks hooks;
  hooks.progress = progress;
  hooks.stop_after = stop_after;
  hooks.on_epoch = [&](const TrainState& st, bool improved) {
    const Checkpoint c = make_checkpoint(net.store(), cfg, st);
    if (improved) save_checkpoint(res.best_checkpoint, c);
    save_checkpoint(out / "last.ckpt", c);
    write_epoch_log(res.epoch_log, st.history);
  };
  train_loop(net, cfg, data, state, hooks);
  if (state.epochs_done == cfg.epochs) {
    save_checkpoint(res.final_checkpoint, make_checkpoint(net.store(), cfg, state));
  }
  res.state = std::move(state);
  return res;
}

TrainResult train(const TrainConfig& cfg, std::ostream* progress = nullptr,
                         std::optional<Checkpoint> resume = std::nullopt,
                         std::size_t stop_after = 0);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  MetricReport report;          // original image resolution
  MetricReport report_resized;  // network input resolution
  std::vector<std::string> skipped;
};

/// Segments every pair and scores it. When mask_dir is given the predicted masks are written
/// there as <id>.pgm.
EvalResult evaluate(UNet& net, std::size_t input_size, const PairedDataset& data,
                           const std::filesystem::path* mask_dir = nullptr);

/// Rebuilds the network recorded in a segmentation checkpoint.
UNet network_from_checkpoint(const Checkpoint& c);

PatchClassifier classifier_from_checkpoint(const Checkpoint& c);

}  // namespace usseg
