// ftmtl command-line interface: data generation, training, inference,
// evaluation and curve rendering.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "ftmtl/checkpoint.hpp"
#include "ftmtl/config.hpp"
#include "ftmtl/data.hpp"
#include "ftmtl/errors.hpp"
#include "ftmtl/eval.hpp"
#include "ftmtl/pipeline.hpp"
#include "ftmtl/png_io.hpp"
#include "ftmtl/svg.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ftmtl;

namespace {

constexpr int kExitUsage = 2, kExitIo = 3, kExitNumeric = 4, kExitVersion = 5, kExitData = 6;

std::uint64_t env_seed_or(std::uint64_t fallback) {
  if (const char* env = std::getenv("FTMTL_SEED")) {
    try {
      return static_cast<std::uint64_t>(std::stoull(env));
    } catch (const std::exception&) {
      throw UsageError("FTMTL_SEED is not an integer: " + std::string(env));
    }
  }
  return fallback;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void echo_config(const RunConfig& cfg, const fs::path& out_dir) {
  write_text(out_dir / "config_resolved.cfg", cfg.resolved_text());
}

RunConfig load_run_config(const std::string& config_file, const std::string& preset,
                          const std::vector<std::string>& overrides, bool seed_flag_given,
                          std::uint64_t seed_flag) {
  RunConfig cfg;
  if (!preset.empty()) cfg.set("model.preset", preset);
  if (!config_file.empty()) cfg.apply_file(config_file);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t");
      const auto b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    cfg.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
  if (seed_flag_given)
    cfg.set("train.seed", std::to_string(seed_flag));
  else if (!cfg.was_set("train.seed"))
    cfg.set("train.seed", std::to_string(env_seed_or(0)));
  return cfg;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& out_dir, int n, double benign_fraction, std::uint64_t seed, int size) {
  if (n < 1) throw UsageError("gen-data: --n must be >= 1");
  if (size % 16 != 0) throw UsageError("gen-data: --size must be divisible by 16");
  if (benign_fraction < 0 || benign_fraction > 1)
    throw UsageError("gen-data: --benign-fraction must lie in [0,1]");
  auto samples = generate_synthetic(n, seed, benign_fraction, size);
  ensure_dir(out_dir);
  save_dataset(samples, out_dir);

  RunConfig cfg;
  cfg.set("data.image_size", std::to_string(size));
  cfg.set("data.benign_fraction", std::to_string(benign_fraction));
  cfg.set("train.seed", std::to_string(seed));
  echo_config(cfg, out_dir);

  int benign = 0;
  for (const auto& s : samples) benign += s.image_is_malignant() ? 0 : 1;
  std::cout << "wrote " << samples.size() << " samples (" << benign << " benign, "
            << samples.size() - static_cast<std::size_t>(benign) << " malignant) to " << out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

std::string loss_csv(const TrainResult& result) {
  std::ostringstream os;
  os << "phase,epoch,batch,l_prop,l_cls,l_box,l_mask,l_uni\n";
  char buf[200];
  for (const auto& r : result.history) {
    std::snprintf(buf, sizeof buf, "%c,%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.phase, r.epoch, r.batch,
                  r.l_prop, r.l_cls, r.l_box, r.l_mask, r.l_uni);
    os << buf;
  }
  return os.str();
}

int cmd_train(const std::string& data_dir, const std::string& out_dir, const RunConfig& cfg, int fold) {
  auto samples = split_per_mass(load_dataset(data_dir));
  if (fold >= 0) {
    if (fold > 4) throw UsageError("--fold must be in [0,5)");
    const auto split = kfold(samples, 5, static_cast<std::uint64_t>(cfg.get_int("train.seed")));
    std::set<std::string> train_ids;
    for (const auto& id : split.train_ids(fold)) train_ids.insert(id);
    std::vector<Sample> train;
    for (const auto& s : samples)
      if (train_ids.count(s.id)) train.push_back(s);
    samples = std::move(train);
  }
  const auto train_set = build_training_set(samples, static_cast<int>(cfg.get_int("train.benign_reps")),
                                            static_cast<int>(cfg.get_int("train.malignant_reps")),
                                            static_cast<std::uint64_t>(cfg.get_int("train.seed")));

  MtlModel<float> model(model_config_from(cfg));
  const auto tc = train_config_from(cfg);
  const auto result = five_step_train(model, train_set, tc);

  ensure_dir(out_dir);
  MetaMap meta;
  meta["train.seed"] = std::to_string(tc.seed);
  meta["train.phase"] = "D";
  meta["rng.state"] = std::to_string(tc.seed);  // every stream is derived from the seed
  save_checkpoint(model, meta, (fs::path(out_dir) / "model.ckpt").string());
  write_text(fs::path(out_dir) / "loss.csv", loss_csv(result));
  echo_config(cfg, out_dir);
  std::cout << "trained on " << train_set.size() << " samples; checkpoint and loss log in " << out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

Sample sample_from_png(const std::string& path) {
  Sample s;
  int w = 0, h = 0;
  const auto px = read_png_gray16(path, w, h);
  s.id = fs::path(path).stem().string();
  s.width = w;
  s.height = h;
  s.pixels.resize(px.size());
  for (std::size_t i = 0; i < px.size(); ++i) s.pixels[i] = static_cast<float>(px[i] / 65535.0);
  return s;
}

int cmd_infer(const std::string& checkpoint, const std::string& image, const std::string& data_dir,
              const std::string& out_dir, const RunConfig& cfg) {
  auto model = load_checkpoint(checkpoint);
  const auto tc = train_config_from(cfg);

  std::vector<Sample> samples;
  if (!image.empty())
    samples.push_back(sample_from_png(image));
  else
    samples = load_dataset(data_dir);

  ensure_dir(fs::path(out_dir) / "masks");
  json root;
  root["format"] = "ftmtl-predictions";
  root["version"] = 1;
  json images = json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto res = infer(*model, samples[i], tc);
    json rec;
    rec["id"] = samples[i].id;
    rec["width"] = samples[i].width;
    rec["height"] = samples[i].height;
    rec["veto_score"] = res.veto.score;
    rec["no_findings"] = res.veto.no_findings;
    json dets = json::array();
    for (std::size_t d = 0; d < res.detections.size(); ++d) {
      const auto& det = res.detections[d];
      char stem[48];
      std::snprintf(stem, sizeof stem, "masks/det_%05zu_%02zu.png", i, d);
      std::vector<std::uint8_t> mask_png(det.mask.size());
      for (std::size_t p = 0; p < det.mask.size(); ++p)
        mask_png[p] = static_cast<std::uint8_t>(std::lround(std::clamp(det.mask[p], 0.0f, 1.0f) * 255.0f));
      write_png_gray8((fs::path(out_dir) / stem).string(), 28, 28, mask_png);
      json jd;
      jd["box"] = {det.box.x1(), det.box.y1(), det.box.x2(), det.box.y2()};
      jd["objectness"] = det.objectness;
      jd["p0"] = det.probs[0];
      jd["p1"] = det.probs[1];
      jd["p2"] = det.probs[2];
      jd["class"] = det.cls == RoiClass::Benign ? "benign" : "malignant";
      jd["mask"] = stem;
      dets.push_back(jd);
    }
    rec["detections"] = dets;
    images.push_back(rec);
  }
  root["images"] = images;
  write_text(fs::path(out_dir) / "predictions.json", root.dump(2) + "\n");
  echo_config(cfg, out_dir);
  std::cout << "inference over " << samples.size() << " image(s) written to " << out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct PredImage {
  std::string id;
  double veto_score = 0;
  std::vector<ScoredBox> boxes;           // score = p1 + p2
  std::vector<std::vector<float>> masks;  // 28x28 probabilities per detection
};

std::vector<PredImage> load_predictions(const std::string& dir) {
  json root;
  try {
    root = json::parse(read_text(fs::path(dir) / "predictions.json"));
  } catch (const json::exception& e) {
    throw DataMismatchError("predictions.json is malformed in " + dir + ": " + e.what());
  }
  if (root.value("format", "") != "ftmtl-predictions")
    throw DataMismatchError("not a predictions directory: " + dir);
  std::vector<PredImage> out;
  for (const auto& rec : root.at("images")) {
    PredImage p;
    p.id = rec.at("id").get<std::string>();
    p.veto_score = rec.at("veto_score").get<double>();
    for (const auto& jd : rec.at("detections")) {
      const auto& bb = jd.at("box");
      ScoredBox sb;
      sb.box =
          Box::from_corners(bb[0].get<double>(), bb[1].get<double>(), bb[2].get<double>(), bb[3].get<double>());
      sb.score = jd.at("p1").get<double>() + jd.at("p2").get<double>();
      p.boxes.push_back(sb);
      int mw = 0, mh = 0;
      const auto mask8 = read_png_gray8((fs::path(dir) / jd.at("mask").get<std::string>()).string(), mw, mh);
      if (mw != 28 || mh != 28) throw DataMismatchError("detection mask must be 28x28 in " + dir);
      std::vector<float> mask(mask8.size());
      for (std::size_t i = 0; i < mask8.size(); ++i) mask[i] = static_cast<float>(mask8[i]) / 255.0f;
      p.masks.push_back(std::move(mask));
    }
    out.push_back(std::move(p));
  }
  return out;
}

struct FoldMetrics {
  double auc = 0, tpr_367 = 0, tpr_5 = 0, dice_mean = 0, dice_std = 0, detected_fraction = 0;
  int n_images = 0, n_detected = 0;
  bool auc_defined = false;
  CurveTable roc, froc_curve, ap_curve;
};

FoldMetrics eval_fold(const std::vector<PredImage>& preds, const std::vector<Sample>& gt, double iou_tp,
                      double iou_detected) {
  std::map<std::string, const Sample*> by_id;
  for (const auto& s : gt) by_id[s.id] = &s;

  std::vector<std::string> orphans;
  std::set<std::string> pred_ids;
  for (const auto& p : preds) {
    pred_ids.insert(p.id);
    if (!by_id.count(p.id)) orphans.push_back("prediction without ground truth: " + p.id);
  }
  for (const auto& s : gt)
    if (!pred_ids.count(s.id)) orphans.push_back("ground truth without prediction: " + s.id);
  if (!orphans.empty()) {
    std::string msg = "prediction/dataset id mismatch:";
    for (const auto& o : orphans) msg += "\n  " + o;
    throw DataMismatchError(msg);
  }

  FoldMetrics fm;
  fm.n_images = static_cast<int>(preds.size());

  std::vector<std::vector<ScoredBox>> dets_all;
  std::vector<std::vector<Box>> gts;
  for (const auto& p : preds) {
    dets_all.push_back(p.boxes);
    std::vector<Box> g;
    for (const auto& m : by_id.at(p.id)->masses) g.push_back(m.bbox);
    gts.push_back(std::move(g));
  }

  fm.froc_curve = froc(dets_all, gts, iou_tp);
  fm.tpr_367 = curve_value_at(fm.froc_curve, 3.67);
  fm.tpr_5 = curve_value_at(fm.froc_curve, 5.0);

  std::vector<double> grid;
  for (int i = 1; i <= 19; ++i) grid.push_back(i * 0.05);
  fm.ap_curve = avg_precision_vs_iou(dets_all, gts, grid);

  // detected subset: classification AUC on veto scores, per-mass Dice
  std::vector<double> veto_scores;
  std::vector<int> veto_labels;
  std::vector<double> dices;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const Sample& s = *by_id.at(preds[i].id);
    const auto matches = filter_detected(preds[i].boxes, gts[i], iou_detected);
    if (matches.empty()) continue;
    ++fm.n_detected;
    veto_scores.push_back(preds[i].veto_score);
    veto_labels.push_back(s.image_is_malignant() ? 1 : 0);
    for (const auto& m : matches) {
      const auto& det = preds[i].boxes[static_cast<std::size_t>(m.detection)];
      const auto pasted =
          paste_mask(preds[i].masks[static_cast<std::size_t>(m.detection)], det.box, s.width, s.height);
      dices.push_back(dice(pasted, s.masses[static_cast<std::size_t>(m.gt)].mask));
    }
  }
  fm.detected_fraction =
      preds.empty() ? 0.0 : static_cast<double>(fm.n_detected) / static_cast<double>(preds.size());
  const bool both_classes = std::count(veto_labels.begin(), veto_labels.end(), 1) > 0 &&
                            std::count(veto_labels.begin(), veto_labels.end(), 0) > 0;
  if (both_classes) {
    fm.auc = roc_auc(veto_scores, veto_labels, &fm.roc);
    fm.auc_defined = true;
  } else {
    std::cerr << "warning: classification AUC undefined (detected subset lacks a class)\n";
    fm.roc.x_label = "fpr";
    fm.roc.y_label = "tpr";
  }
  if (!dices.empty()) {
    double mean = 0;
    for (double d : dices) mean += d;
    mean /= static_cast<double>(dices.size());
    double var = 0;
    for (double d : dices) var += (d - mean) * (d - mean);
    fm.dice_mean = mean;
    fm.dice_std = dices.size() > 1 ? std::sqrt(var / static_cast<double>(dices.size() - 1)) : 0.0;
  }
  return fm;
}

int cmd_eval(const std::vector<std::string>& pred_dirs, const std::string& data_dir, const std::string& out_dir,
             double iou_tp, double iou_detected) {
  const auto gt = split_per_mass(load_dataset(data_dir));
  std::vector<FoldMetrics> folds;
  for (const auto& dir : pred_dirs) folds.push_back(eval_fold(load_predictions(dir), gt, iou_tp, iou_detected));

  ensure_dir(out_dir);
  const auto emit = [&](const std::string& stem, const CurveTable& table) {
    write_text(fs::path(out_dir) / (stem + ".csv"), curve_to_csv(table));
    write_curve_svg((fs::path(out_dir) / (stem + ".svg")).string(), {{stem, table}}, table.x_label,
                    table.y_label);
  };

  std::ostringstream metrics;
  metrics.precision(17);
  if (folds.size() == 1) {
    const auto& f = folds[0];
    emit("roc", f.roc);
    emit("froc", f.froc_curve);
    emit("ap_iou", f.ap_curve);
    metrics << "folds = 1\n";
    if (f.auc_defined)
      metrics << "auc = " << f.auc << "\n";
    else
      metrics << "auc = nan\n";
    metrics << "tpr_at_3.67 = " << f.tpr_367 << "\n"
            << "tpr_at_5 = " << f.tpr_5 << "\n"
            << "dice_mean = " << f.dice_mean << "\n"
            << "dice_std = " << f.dice_std << "\n"
            << "n_images = " << f.n_images << "\n"
            << "n_detected = " << f.n_detected << "\n"
            << "detected_fraction = " << f.detected_fraction << "\n";
  } else {
    auto collect = [&](auto getter) {
      std::vector<double> v;
      for (const auto& f : folds) v.push_back(getter(f));
      return v;
    };
    const auto auc = aggregate_folds(collect([](const FoldMetrics& f) { return f.auc; }));
    const auto t367 = aggregate_folds(collect([](const FoldMetrics& f) { return f.tpr_367; }));
    const auto t5 = aggregate_folds(collect([](const FoldMetrics& f) { return f.tpr_5; }));
    const auto dcm = aggregate_folds(collect([](const FoldMetrics& f) { return f.dice_mean; }));

    std::vector<double> roc_grid, fpi_grid, iou_grid;
    for (int i = 0; i <= 100; ++i) roc_grid.push_back(i / 100.0);
    double max_fpi = 1;
    for (const auto& f : folds)
      if (!f.froc_curve.points.empty()) max_fpi = std::max(max_fpi, f.froc_curve.points.back().x);
    for (int i = 0; i <= 80; ++i) fpi_grid.push_back(max_fpi * i / 80.0);
    for (int i = 1; i <= 19; ++i) iou_grid.push_back(i * 0.05);

    std::vector<CurveTable> rocs, frocs, aps;
    for (const auto& f : folds) {
      rocs.push_back(f.roc);
      frocs.push_back(f.froc_curve);
      aps.push_back(f.ap_curve);
    }
    emit("roc", aggregate_curves(rocs, roc_grid));
    emit("froc", aggregate_curves(frocs, fpi_grid));
    emit("ap_iou", aggregate_curves(aps, iou_grid));

    metrics << "folds = " << folds.size() << "\n"
            << "auc = " << auc.mean << "\nauc_std = " << auc.stddev << "\n"
            << "tpr_at_3.67 = " << t367.mean << "\ntpr_at_3.67_std = " << t367.stddev << "\n"
            << "tpr_at_5 = " << t5.mean << "\ntpr_at_5_std = " << t5.stddev << "\n"
            << "dice_mean = " << dcm.mean << "\ndice_mean_std = " << dcm.stddev << "\n";
    for (std::size_t i = 0; i < folds.size(); ++i)
      metrics << "fold" << i << ".auc = " << folds[i].auc << "\n"
              << "fold" << i << ".tpr_at_3.67 = " << folds[i].tpr_367 << "\n"
              << "fold" << i << ".dice_mean = " << folds[i].dice_mean << "\n";
  }
  write_text(fs::path(out_dir) / "metrics.txt", metrics.str());

  RunConfig cfg;
  cfg.set("eval.iou_tp", std::to_string(iou_tp));
  cfg.set("eval.iou_detected", std::to_string(iou_detected));
  echo_config(cfg, out_dir);
  std::cout << "metrics written to " << out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// curves
// ---------------------------------------------------------------------------

int cmd_curves(const std::vector<std::string>& inputs, const std::string& out_svg) {
  std::vector<SvgSeries> series;
  for (const auto& path : inputs) {
    CurveTable t;
    try {
      t = curve_from_csv(read_text(path));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    series.push_back({fs::path(path).stem().string(), std::move(t)});
  }
  write_curve_svg(out_svg, series, series.front().curve.x_label, series.front().curve.y_label);
  std::cout << "plot written to " << out_svg << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"feature-transfer multi-task detection / segmentation / classification"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string gen_out;
  int gen_n = 100, gen_size = 64;
  double gen_benign = 0.5;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n", gen_n, "number of samples");
  gen->add_option("--benign-fraction", gen_benign, "fraction of benign samples");
  auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_option("--size", gen_size, "image side in pixels (divisible by 16)");

  auto* train = app.add_subcommand("train", "run the full training schedule");
  std::string train_data, train_out, train_config, train_preset;
  std::vector<std::string> train_sets;
  int train_fold = -1;
  std::uint64_t train_seed = 0;
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "output directory")->required();
  train->add_option("--config", train_config, "run config file");
  train->add_option("--fold", train_fold, "hold out this fold of a 5-fold split");
  train->add_option("--preset", train_preset, "desk | paper-shape");
  train->add_option("--set", train_sets, "override a config key: --set key=value");
  auto* train_seed_opt = train->add_option("--seed", train_seed, "training seed");

  auto* inf = app.add_subcommand("infer", "run inference with a trained checkpoint");
  std::string inf_ckpt, inf_image, inf_data, inf_out, inf_config, inf_preset;
  std::vector<std::string> inf_sets;
  inf->add_option("--checkpoint", inf_ckpt, "checkpoint file")->required();
  inf->add_option("--image", inf_image, "single 16-bit grayscale PNG");
  inf->add_option("--data", inf_data, "dataset directory");
  inf->add_option("--out", inf_out, "output directory")->required();
  inf->add_option("--config", inf_config, "run config file");
  inf->add_option("--set", inf_sets, "override a config key");

  auto* ev = app.add_subcommand("eval", "score predictions against ground truth");
  std::vector<std::string> ev_preds;
  std::string ev_data, ev_out;
  double ev_iou_tp = 0.2, ev_iou_detected = 0.4;
  ev->add_option("--pred", ev_preds, "prediction directory (repeat per fold)")->required();
  ev->add_option("--data", ev_data, "ground-truth dataset directory")->required();
  ev->add_option("--out", ev_out, "output directory")->required();
  ev->add_option("--iou-tp", ev_iou_tp, "FROC true-positive IoU rule");
  ev->add_option("--iou-detected", ev_iou_detected, "IoU defining a detected mass");

  auto* cur = app.add_subcommand("curves", "render curve CSVs as an SVG plot");
  std::vector<std::string> cur_in;
  std::string cur_out;
  cur->add_option("--in", cur_in, "curve CSV (repeatable)")->required();
  cur->add_option("--out", cur_out, "output SVG path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(gen_out, gen_n, gen_benign,
                          gen_seed_opt->count() > 0 ? gen_seed : env_seed_or(0), gen_size);
    if (train->parsed()) {
      const auto cfg =
          load_run_config(train_config, train_preset, train_sets, train_seed_opt->count() > 0, train_seed);
      return cmd_train(train_data, train_out, cfg, train_fold);
    }
    if (inf->parsed()) {
      if (inf_image.empty() == inf_data.empty())
        throw UsageError("infer: exactly one of --image or --data is required");
      const auto cfg = load_run_config(inf_config, inf_preset, inf_sets, false, 0);
      return cmd_infer(inf_ckpt, inf_image, inf_data, inf_out, cfg);
    }
    if (ev->parsed()) return cmd_eval(ev_preds, ev_data, ev_out, ev_iou_tp, ev_iou_detected);
    if (cur->parsed()) return cmd_curves(cur_in, cur_out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericAbort& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const VersionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitVersion;
  } catch (const DataMismatchError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
  return 0;
}
