#include "usseg/trainer.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace usseg {

namespace detail {

template <class T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

class BinWriter {
 public:
  explicit BinWriter(std::ostream& out) : out_(out) {}
  void u64(std::uint64_t v) { raw(to_little(v)); }
  void u32(std::uint32_t v) { raw(to_little(v)); }
  void f64(double v) { raw(to_little(std::bit_cast<std::uint64_t>(v))); }
  void str(const std::string& s) {
    u64(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void tensor(const Tensor& t) {
    const Shape s = t.shape();
    u64(s.n);
    u64(s.c);
    u64(s.h);
    u64(s.w);
    for (double v : t.data()) f64(v);
  }

 private:
  template <class T>
  void raw(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  std::ostream& out_;
};

class BinReader {
 public:
  BinReader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}
  std::uint64_t u64() { return to_little(raw<std::uint64_t>()); }
  std::uint32_t u32() { return to_little(raw<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(to_little(raw<std::uint64_t>())); }
  std::string str() {
    const std::uint64_t n = u64();
    if (n > (1u << 30)) fail("string length");
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    if (!in_) fail("string");
    return s;
  }
  Tensor tensor() {
    Shape s{u64(), u64(), u64(), u64()};
    if (s.size() > (std::uint64_t{1} << 32)) fail("tensor extent");
    Tensor t(s);
    for (double& v : t.data()) v = f64();
    return t;
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw IoError(source_ + ": corrupt or truncated checkpoint (" + what + ")");
  }

 private:
  template <class T>
  T raw() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in_) fail("unexpected end of file");
    return v;
  }
  std::istream& in_;
  std::string source_;
};

}  // namespace detail

std::vector<Sample> segmentation_samples(const std::vector<ImagePair>& pairs,
                                                std::size_t input_size) {
  std::vector<Sample> out;
  for (const auto& p : pairs) {
    Sample s{p.id, p.id, p.image, p.mask};
    if (input_size != 0) {
      s.image = resize(p.image, input_size, input_size);
      s.mask = resize(p.mask, input_size, input_size);
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<Sample> classification_samples(const std::vector<ImagePair>& pairs) {
  std::vector<Sample> out;
  for (const auto& p : pairs) {
    auto patches = subsample_background(extract_patches(p, default_scales()));
    for (std::size_t i = 0; i < patches.size(); ++i) {
      const PatchRecord& r = patches[i];
      SegmentationMask label(1, 1, r.label == PatchLabel::tumour);
      out.push_back(Sample{p.id + "_" + std::to_string(i), p.id,
                           resize(r.pixels, kClassifierInput, kClassifierInput), label});
    }
  }
  return out;
}

void write_checkpoint(std::ostream& out, const Checkpoint& c) {
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::BinWriter w(out);
  w.u32(kCheckpointVersion);
  w.str(c.config_text);
  w.u64(c.epochs_done);
  w.u64(c.adam_t);
  w.u64(c.has_best ? 1 : 0);
  w.f64(c.best_metric);
  w.u64(c.best_epoch);
  w.u64(c.rejected_steps);
  w.u64(c.history.size());
  for (const auto& r : c.history) {
    w.u64(r.epoch);
    w.f64(r.train_loss);
    w.f64(r.val_loss);
    w.f64(r.val_mean_iou);
  }
  w.u64(c.params.size());
  for (const auto& p : c.params) {
    w.str(p.name);
    w.tensor(p.value);
    w.tensor(p.m);
    w.tensor(p.v);
  }
  w.u64(c.stats.size());
  for (const auto& s : c.stats) {
    w.str(s.name);
    w.tensor(s.mean);
    w.tensor(s.var);
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  write_checkpoint(out, c);
  if (!out) throw IoError("write failed: " + path.string());
}

Checkpoint read_checkpoint(std::istream& in, const std::string& source) {
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw IoError(source + ": not a checkpoint file");
  }
  detail::BinReader r(in, source);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw IoError(source + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  c.config_text = r.str();
  c.epochs_done = r.u64();
  c.adam_t = r.u64();
  c.has_best = r.u64() != 0;
  c.best_metric = r.f64();
  c.best_epoch = r.u64();
  c.rejected_steps = r.u64();
  const std::uint64_t rows = r.u64();
  for (std::uint64_t i = 0; i < rows; ++i) {
    EpochRow row;
    row.epoch = r.u64();
    row.train_loss = r.f64();
    row.val_loss = r.f64();
    row.val_mean_iou = r.f64();
    c.history.push_back(row);
  }
  const std::uint64_t np = r.u64();
  for (std::uint64_t i = 0; i < np; ++i) {
    Checkpoint::Param p;
    p.name = r.str();
    p.value = r.tensor();
    p.m = r.tensor();
    p.v = r.tensor();
    c.params.push_back(std::move(p));
  }
  const std::uint64_t ns = r.u64();
  for (std::uint64_t i = 0; i < ns; ++i) {
    Checkpoint::Stats s;
    s.name = r.str();
    s.mean = r.tensor();
    s.var = r.tensor();
    c.stats.push_back(std::move(s));
  }
  return c;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  return read_checkpoint(in, path.string());
}

TrainConfig checkpoint_config(const Checkpoint& c) {
  return parse_train_config(c.config_text, "checkpoint config");
}

Checkpoint make_checkpoint(const ParamStore& store, const TrainConfig& cfg,
                                  const TrainState& st) {
  Checkpoint c;
  c.config_text = train_config_text(cfg);
  c.epochs_done = st.epochs_done;
  c.adam_t = st.adam.t;
  c.has_best = st.has_best;
  c.best_metric = st.best_metric;
  c.best_epoch = st.best_epoch;
  c.rejected_steps = st.rejected_steps;
  c.history = st.history;
  const bool has_moments = st.adam.m.size() == store.size();
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Tensor& v = store[i].value();
    c.params.push_back({store.name(i), v, has_moments ? st.adam.m[i] : Tensor(v.shape()),
                        has_moments ? st.adam.v[i] : Tensor(v.shape())});
  }
  for (std::size_t i = 0; i < store.stats_size(); ++i) {
    c.stats.push_back({store.stats_name(i), store.stats(i).running_mean, store.stats(i).running_var});
  }
  auto by_name = [](const auto& a, const auto& b) { return a.name < b.name; };
  std::sort(c.params.begin(), c.params.end(), by_name);
  std::sort(c.stats.begin(), c.stats.end(), by_name);
  return c;
}

TrainState restore_checkpoint(ParamStore& store, const Checkpoint& c) {
  if (c.params.size() != store.size() || c.stats.size() != store.stats_size()) {
    throw IoError("checkpoint does not match the network (parameter count differs)");
  }
  std::map<std::string, const Checkpoint::Param*> params;
  for (const auto& p : c.params) params[p.name] = &p;
  std::map<std::string, const Checkpoint::Stats*> stats;
  for (const auto& s : c.stats) stats[s.name] = &s;
  TrainState st;
  st.adam = AdamState(store.params());
  st.adam.t = c.adam_t;
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto it = params.find(store.name(i));
    if (it == params.end() || it->second->value.shape() != store[i].shape()) {
      throw IoError("checkpoint parameter mismatch at " + store.name(i));
    }
    store[i].mutable_value() = it->second->value;
    st.adam.m[i] = it->second->m;
    st.adam.v[i] = it->second->v;
  }
  for (std::size_t i = 0; i < store.stats_size(); ++i) {
    auto it = stats.find(store.stats_name(i));
    if (it == stats.end() || it->second->mean.shape() != store.stats(i).running_mean.shape()) {
      throw IoError("checkpoint statistics mismatch at " + store.stats_name(i));
    }
    store.stats(i).running_mean = it->second->mean;
    store.stats(i).running_var = it->second->var;
  }
  st.epochs_done = c.epochs_done;
  st.has_best = c.has_best;
  st.best_metric = c.best_metric;
  st.best_epoch = c.best_epoch;
  st.history = c.history;
  st.rejected_steps = c.rejected_steps;
  return st;
}

void write_epoch_log(const std::filesystem::path& path, const std::vector<EpochRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << kEpochLogHeader << "\n";
  for (const auto& r : rows) out << format_epoch_row(r) << "\n";
}

std::vector<Sample> load_samples(const TrainConfig& cfg) {
  if (cfg.data_images.empty() || cfg.data_masks.empty()) {
    throw TrainingError("data_images and data_masks must be set");
  }
  const PairedDataset data = pair_dataset(cfg.data_images, cfg.data_masks);
  if (data.pairs.empty()) throw TrainingError("no image/mask pairs found");
  const bool any_tumour = std::any_of(data.pairs.begin(), data.pairs.end(),
                                      [](const ImagePair& p) { return p.mask.tumour_count() > 0; });
  if (!any_tumour) throw TrainingError("dataset contains no tumour pixels");
  if (cfg.task == Task::classify) return classification_samples(data.pairs);
  for (const auto& p : data.pairs) {
    const std::size_t w = cfg.input_size ? cfg.input_size : p.image.width();
    const std::size_t h = cfg.input_size ? cfg.input_size : p.image.height();
    try {
      cfg.model.check_input(h, w);
    } catch (const std::invalid_argument& e) {
      throw TrainingError(p.id + ": " + e.what());
    }
  }
  return segmentation_samples(data.pairs, cfg.input_size);
}

TrainResult train(const TrainConfig& cfg, std::ostream* progress,
                         std::optional<Checkpoint> resume,
                         std::size_t stop_after) {
  cfg.validate();
  const DataSplit data = split_samples(load_samples(cfg));
  if (cfg.task == Task::classify) {
    PatchClassifier clf(cfg.classifier_width, cfg.seed());
    return train_network(clf, cfg, data, std::move(resume), progress, stop_after);
  }
  UNet net(cfg.model);
  return train_network(net, cfg, data, std::move(resume), progress, stop_after);
}

EvalResult evaluate(UNet& net, std::size_t input_size, const PairedDataset& data,
                           const std::filesystem::path* mask_dir) {
  if (data.pairs.empty()) throw std::invalid_argument("evaluate: empty dataset");
  EvalResult res;
  res.skipped = data.skipped;
  std::vector<MetricRow> rows, rows_resized;
  if (mask_dir) std::filesystem::create_directories(*mask_dir);
  for (const auto& p : data.pairs) {
    const std::size_t w = input_size ? input_size : p.image.width();
    const std::size_t h = input_size ? input_size : p.image.height();
    SegmentResult s;
    try {
      s = segment_full(net, p.image, w, h);
    } catch (const std::invalid_argument& e) {
      res.skipped.push_back(p.id + ": " + e.what());
      continue;
    }
    rows.push_back(evaluate_pair(p.id, s.mask, p.mask));
    rows_resized.push_back(evaluate_pair(p.id, s.mask_resized, resize(p.mask, w, h)));
    if (mask_dir) write_mask(*mask_dir / (p.id + ".pgm"), s.mask);
  }
  if (rows.empty()) throw std::invalid_argument("evaluate: no image could be evaluated");
  res.report = aggregate(std::move(rows));
  res.report_resized = aggregate(std::move(rows_resized));
  return res;
}

UNet network_from_checkpoint(const Checkpoint& c) {
  const TrainConfig cfg = checkpoint_config(c);
  if (cfg.task != Task::segment) throw IoError("checkpoint holds a patch classifier");
  UNet net(cfg.model);
  restore_checkpoint(net.store(), c);
  return net;
}

PatchClassifier classifier_from_checkpoint(const Checkpoint& c) {
  const TrainConfig cfg = checkpoint_config(c);
  if (cfg.task != Task::classify) throw IoError("checkpoint holds a segmentation network");
  PatchClassifier clf(cfg.classifier_width, cfg.seed());
  restore_checkpoint(clf.store(), c);
  return clf;
}
}  // namespace usseg
