// usseg: command-line front end for data synthesis, patch extraction, training, evaluation,
// inference and diagnostics.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "usseg/usseg.hpp"

namespace fs = std::filesystem;
using namespace usseg;

namespace {

std::vector<std::size_t> parse_sides(const std::string& list) {
  std::vector<std::size_t> out;
  for (const auto& s : split_list(list)) {
    std::size_t pos = 0;
    const unsigned long v = std::stoul(s, &pos);
    if (pos != s.size() || v == 0) throw std::invalid_argument("bad scale '" + s + "'");
    out.push_back(v);
  }
  if (out.empty()) throw std::invalid_argument("no scales given");
  return out;
}

std::size_t input_size_for(const TrainConfig& cfg, std::size_t override_size) {
  return override_size ? override_size : cfg.input_size;
}

void print_warnings(const std::vector<std::string>& w) {
  for (const auto& s : w) std::cerr << "warning: " << s << "\n";
}

// -- subcommands -------------------------------------------------------------

struct SynthArgs {
  std::string out;
  PhantomSpec spec;
};

int run_synth(const SynthArgs& a) {
  write_phantom(a.spec, a.out);
  std::cout << "wrote " << a.spec.count << " image/mask pairs to " << a.out << "\n";
  return 0;
}

struct ExtractArgs {
  std::string images, masks, out;
  std::string scales = "20,40,60,80";
  double purity = kDefaultPurity;
  std::size_t keep_one_in = kDefaultKeepOneIn;
};

int run_extract(const ExtractArgs& a) {
  const PairedDataset data = pair_dataset(a.images, a.masks);
  for (const auto& u : data.unmatched) std::cerr << "warning: unmatched " << u << "\n";
  const PatchSetSummary s =
      write_patch_set(data, a.out, directional_scales(parse_sides(a.scales)), a.purity, a.keep_one_in);
  print_warnings(s.warnings);
  std::cout << data.pairs.size() << " images: " << s.tumour << " tumour, " << s.background
            << " background patches -> " << (fs::path(a.out) / "manifest.csv").string() << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, resume, out_dir;
  std::size_t epochs = 0;
  bool quiet = false;
};

int run_train(const TrainArgs& a) {
  TrainConfig cfg = load_train_config(a.config);
  if (!a.out_dir.empty()) cfg.out_dir = a.out_dir;
  if (a.epochs) cfg.epochs = a.epochs;
  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) resume = load_checkpoint(a.resume);
  if (!a.quiet) std::cout << kEpochLogHeader << "\n";
  const TrainResult r = train(cfg, a.quiet ? nullptr : &std::cout, std::move(resume));
  std::cout << "best epoch " << r.state.best_epoch << " val_mean_iou " << r.state.best_metric
            << " -> " << r.best_checkpoint.string() << "\n";
  if (r.state.rejected_steps) {
    std::cerr << "warning: " << r.state.rejected_steps << " steps rejected (non-finite gradient)\n";
  }
  return 0;
}

struct EvalArgs {
  std::string checkpoint, images, masks, out, masks_out, model_name;
  std::size_t input_size = 0;
  bool resized = false;
};

int run_eval(const EvalArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const TrainConfig cfg = checkpoint_config(ck);
  UNet net = network_from_checkpoint(ck);
  const PairedDataset data = pair_dataset(a.images, a.masks, true);
  const fs::path mask_dir = a.masks_out;
  const EvalResult r = evaluate(net, input_size_for(cfg, a.input_size), data,
                                a.masks_out.empty() ? nullptr : &mask_dir);
  print_warnings(r.skipped);
  const std::string name = a.model_name.empty() ? fs::path(a.checkpoint).stem().string() : a.model_name;
  const MetricReport& rep = a.resized ? r.report_resized : r.report;
  if (a.out.empty()) {
    write_report_csv(std::cout, name, rep);
  } else {
    std::ofstream out(a.out);
    if (!out) throw IoError("cannot write " + a.out);
    write_report_csv(out, name, rep);
    std::cout << rep.rows.size() << " images evaluated -> " << a.out << "\n";
  }
  return 0;
}

struct SegmentArgs {
  std::string checkpoint, image, out, prob;
  std::size_t input_size = 0;
};

int run_segment(const SegmentArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const TrainConfig cfg = checkpoint_config(ck);
  UNet net = network_from_checkpoint(ck);
  const Raster img = read_raster(a.image);
  const std::size_t side = input_size_for(cfg, a.input_size);
  const SegmentResult r =
      segment_full(net, img, side ? side : img.width(), side ? side : img.height());
  write_mask(a.out, r.mask);
  if (!a.prob.empty()) write_probability_map(a.prob, r.probability);
  std::cout << r.mask.tumour_count() << " tumour pixels -> " << a.out << "\n";
  return 0;
}

struct TiledArgs {
  std::string checkpoint, image, out, mask;
  std::string scales = "20,40,60,80";
  bool hard_labels = false;
};

int run_tiled(const TiledArgs& a) {
  PatchClassifier clf = classifier_from_checkpoint(load_checkpoint(a.checkpoint));
  const Raster img = read_raster(a.image);
  std::vector<std::string> warnings;
  const ProbabilityMap p =
      tiled_classify(classifier_adapter(clf), img, parse_sides(a.scales), &warnings, {a.hard_labels});
  print_warnings(warnings);
  write_probability_map(a.out, p);
  if (!a.mask.empty()) write_mask(a.mask, threshold(p));
  std::cout << "probability map -> " << a.out << "\n";
  return 0;
}

struct AttentionArgs {
  std::string checkpoint, image, out;
  std::size_t input_size = 0;
  bool all_channels = false;
};

int run_export_attention(const AttentionArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const TrainConfig cfg = checkpoint_config(ck);
  UNet net = network_from_checkpoint(ck);
  if (net.attention_site_order().empty()) throw std::invalid_argument("model has no attention sites");
  const Raster img = read_raster(a.image);
  const std::size_t side = input_size_for(cfg, a.input_size);
  const Raster small = side ? resize(img, side, side) : img;
  const auto taps = net.attention_taps(to_tensor(small, cfg.model.in_channels));
  const auto sites = net.attention_site_order();
  fs::create_directories(a.out);
  // peak-to-mean ratio: 1 for a flat map, larger when the weight concentrates
  std::cout << "site,channels,extent,peak_to_mean\n";
  for (std::size_t i = 0; i < taps.size(); ++i) {
    const Shape s = taps[i].shape();
    const std::size_t channels = a.all_channels ? s.c : 1;
    for (std::size_t c = 0; c < channels; ++c) {
      const std::string name = site_name(sites[i]) + (s.c > 1 ? "_c" + std::to_string(c) : "");
      write_pgm(fs::path(a.out) / (name + ".pgm"), weight_map_raster(taps[i], 0, c));
    }
    double peak = 0.0;
    for (std::size_t c = 0; c < s.c; ++c) {
      double m = 0.0;
      for (std::size_t k = 0; k < s.plane(); ++k) m = std::max(m, taps[i].at(0, c, k / s.w, k % s.w));
      peak += m * static_cast<double>(s.plane());
    }
    std::printf("%s,%zu,%zux%zu,%.6g\n", site_name(sites[i]).c_str(), s.c, s.w, s.h, peak / s.c);
  }
  return 0;
}

struct GradArgs {
  ModelConfig model;
  std::string sites = "all";
  std::string fine = "encoder-end";
  std::uint64_t seed = 0;
  NetworkCheckOptions opt;
};

int run_grad_check(GradArgs a) {
  a.model.attention_sites.clear();
  if (a.sites == "all") {
    a.model.attention_sites = first_sites(a.model.depth);
  } else if (a.sites != "none") {
    for (const auto& s : split_list(a.sites)) a.model.attention_sites.insert(parse_site(s));
  }
  a.model.fine_source = parse_fine_source(a.fine);
  a.model.validate();
  const NetworkCheckResult r = network_grad_check(a.model, a.seed, a.opt);
  std::printf("draw %llu (redraws %zu, kink margin %.3g): %zu samples, max rel error %.3e, mean %.3e, tol %.1e -> %s\n",
              static_cast<unsigned long long>(r.draw), r.redraws, r.margin, r.report.errors.size(),
              r.report.max_error, r.report.mean_error, r.report.tol,
              r.report.passed ? "PASS" : "FAIL");
  return r.report.passed ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ultrasound tumour segmentation: attention U-nets, patch pipeline, evaluation"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth-data", "Write a synthetic speckle phantom dataset");
  c_synth->add_option("--out", synth.out, "Output directory (images/, masks/)")->required();
  c_synth->add_option("--count", synth.spec.count, "Number of images")->capture_default_str();
  c_synth->add_option("--side", synth.spec.side, "Image side in pixels")->capture_default_str();
  c_synth->add_option("--seed", synth.spec.seed, "Random seed")->capture_default_str();
  c_synth->add_option("--max-blobs", synth.spec.max_blobs, "Most tumours per image")->capture_default_str();
  c_synth->add_flag("--background-only", synth.spec.background_only, "Generate tumour-free images");

  ExtractArgs ex;
  auto* c_ex = app.add_subcommand("extract-patches", "Multi-scale labelled patches and manifest");
  c_ex->add_option("--images", ex.images, "Image directory")->required();
  c_ex->add_option("--masks", ex.masks, "Mask directory")->required();
  c_ex->add_option("--out", ex.out, "Output directory")->required();
  c_ex->add_option("--scales", ex.scales, "Square sides; 2:1 and 1:2 windows are added")->capture_default_str();
  c_ex->add_option("--purity", ex.purity, "Minimum class fraction for a label")->capture_default_str();
  c_ex->add_option("--keep-one-in", ex.keep_one_in, "Background thinning (1 keeps all)")->capture_default_str();

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "Train a segmentation network or patch classifier");
  c_tr->add_option("--config", tr.config, "Training config (key=value)")->required();
  c_tr->add_option("--resume", tr.resume, "Checkpoint to continue from (last.ckpt)");
  c_tr->add_option("--out-dir", tr.out_dir, "Override out_dir");
  c_tr->add_option("--epochs", tr.epochs, "Override epochs");
  c_tr->add_flag("--quiet", tr.quiet, "No per-epoch output");

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "Score a checkpoint on an image/mask set (CSV)");
  c_ev->add_option("--checkpoint", ev.checkpoint, "Segmentation checkpoint")->required();
  c_ev->add_option("--images", ev.images, "Image directory")->required();
  c_ev->add_option("--masks", ev.masks, "Mask directory")->required();
  c_ev->add_option("--out", ev.out, "Report CSV (stdout if omitted)");
  c_ev->add_option("--masks-out", ev.masks_out, "Write predicted masks here");
  c_ev->add_option("--model-name", ev.model_name, "Model column of the report");
  c_ev->add_option("--input-size", ev.input_size, "Network input side (default: from checkpoint)");
  c_ev->add_flag("--resized", ev.resized, "Score at the network input resolution");

  SegmentArgs sg;
  auto* c_sg = app.add_subcommand("segment", "Segment one image");
  c_sg->add_option("--checkpoint", sg.checkpoint, "Segmentation checkpoint")->required();
  c_sg->add_option("--image", sg.image, "Input image (PGM/PNG)")->required();
  c_sg->add_option("--out", sg.out, "Output mask (PGM)")->required();
  c_sg->add_option("--prob", sg.prob, "Also write the probability map (PGM + sidecar)");
  c_sg->add_option("--input-size", sg.input_size, "Network input side (default: from checkpoint)");

  TiledArgs tc;
  auto* c_tc = app.add_subcommand("tiled-classify", "Multi-scale distinct-block classification");
  c_tc->add_option("--checkpoint", tc.checkpoint, "Patch-classifier checkpoint")->required();
  c_tc->add_option("--image", tc.image, "Input image (PGM/PNG)")->required();
  c_tc->add_option("--out", tc.out, "Fused probability map (PGM + sidecar)")->required();
  c_tc->add_option("--mask", tc.mask, "Also write the thresholded mask");
  c_tc->add_option("--scales", tc.scales, "Tile sides")->capture_default_str();
  c_tc->add_flag("--hard-labels", tc.hard_labels, "Threshold tiles before averaging");

  AttentionArgs at;
  auto* c_at = app.add_subcommand("export-attention", "Write attention weight maps as rasters");
  c_at->add_option("--checkpoint", at.checkpoint, "Segmentation checkpoint")->required();
  c_at->add_option("--image", at.image, "Input image (PGM/PNG)")->required();
  c_at->add_option("--out", at.out, "Output directory")->required();
  c_at->add_option("--input-size", at.input_size, "Network input side (default: from checkpoint)");
  c_at->add_flag("--all-channels", at.all_channels, "One raster per channel");

  GradArgs ga;
  ga.model.depth = 3;
  ga.model.base_width = 4;
  std::string fusion = "vector-concat", order = "relu-then-bn", kind = "spatial";
  auto* c_ga = app.add_subcommand("grad-check", "Finite-difference check of a whole network");
  c_ga->add_option("--depth", ga.model.depth, "Poolings (3-5)")->capture_default_str();
  c_ga->add_option("--width", ga.model.base_width, "Stage-1 channels")->capture_default_str();
  c_ga->add_option("--sites", ga.sites, "Attention sites: all, none or a list")->capture_default_str();
  c_ga->add_option("--fine-source", ga.fine, "encoder-end or grid")->capture_default_str();
  c_ga->add_option("--fusion", fusion, "vector-concat or element-add")->capture_default_str();
  c_ga->add_option("--norm-order", order, "relu-then-bn or bn-then-relu")->capture_default_str();
  c_ga->add_option("--kind", kind, "spatial or mixed")->capture_default_str();
  c_ga->add_flag("--encoder-residual,!--no-encoder-residual", ga.model.encoder_residual,
                 "Residual encoder stages");
  c_ga->add_flag("--decoder-residual", ga.model.decoder_residual, "Residual decoder stages");
  c_ga->add_option("--seed", ga.seed, "First draw")->capture_default_str();
  c_ga->add_option("--side", ga.opt.side, "Input side")->capture_default_str();
  c_ga->add_option("--samples", ga.opt.samples, "Perturbed elements")->capture_default_str();
  c_ga->add_option("--tol", ga.opt.tol, "Relative error tolerance")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*c_synth) return run_synth(synth);
    if (*c_ex) return run_extract(ex);
    if (*c_tr) return run_train(tr);
    if (*c_ev) return run_eval(ev);
    if (*c_sg) return run_segment(sg);
    if (*c_tc) return run_tiled(tc);
    if (*c_at) return run_export_attention(at);
    if (*c_ga) {
      ga.model.attention.fusion = parse_fusion(fusion);
      ga.model.attention.normalization_order = parse_norm_order(order);
      ga.model.attention.kind = parse_attention_kind(kind);
      return run_grad_check(ga);
    }
  } catch (const std::exception& e) {
    std::cerr << "usseg: error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
