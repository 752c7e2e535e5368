#include "ftmtl/config.hpp"

#include <fstream>
#include <sstream>

#include "ftmtl/errors.hpp"

namespace ftmtl {

namespace {

struct KeySpec {
  const char* key;
  const char* def;
  const char* doc;
};

// The single source of truth for config keys.
const KeySpec kKeys[] = {
    {"data.image_size", "64", "synthetic image side in pixels, divisible by 16"},
    {"data.benign_fraction", "0.5", "fraction of benign samples in generated data"},
    {"model.preset", "desk", "desk | paper-shape; rewrites channels/delta/image size"},
    {"model.channels", "8,16,32,64", "backbone stage widths (4 comma-separated ints)"},
    {"model.blocks_per_stage", "1", "residual blocks per backbone stage"},
    {"model.delta", "64", "segmentation feature channels carried into the transfer"},
    {"model.transfer", "true", "enable the segmentation-to-classification transfer path"},
    {"model.stop_grad_weight_map", "false", "block gradients through the mask weight map"},
    {"rpn.anchor_scales", "0.25,0.5,0.75", "anchor scales as fractions of the short image side"},
    {"rpn.pos_iou", "0.5", "anchor IoU at or above which a match is positive"},
    {"rpn.neg_iou", "0.3", "anchor IoU below which a match is negative"},
    {"rpn.score_threshold", "0.5", "objectness needed to keep a candidate"},
    {"rpn.topn_train", "32", "candidate cap during training"},
    {"rpn.topn_infer", "16", "candidate cap during inference"},
    {"rpn.neg_ratio", "3", "max negatives per positive in the proposal loss"},
    {"train.lr", "0.005", "SGD learning rate"},
    {"train.momentum", "0.9", "SGD momentum"},
    {"train.batch_size", "4", "images per optimizer step"},
    {"train.epochs_per_phase", "10", "epochs for each trainable phase"},
    {"train.lambda_cls", "1", "classification loss weight"},
    {"train.lambda_box", "1", "box regression loss weight"},
    {"train.lambda_mask", "1", "mask loss weight"},
    {"train.seed", "0", "global seed (env FTMTL_SEED is the fallback)"},
    {"train.include_prop_in_joint", "true", "keep optimizing the proposal loss in the joint phase"},
    {"train.roi_per_image", "16", "ROIs sampled per image for head training"},
    {"train.benign_reps", "20", "augmentation replicas per benign sample"},
    {"train.malignant_reps", "10", "augmentation replicas per malignant sample"},
    {"infer.nms_iou", "0.5", "IoU at which overlapping detections merge"},
    {"eval.iou_tp", "0.2", "FROC true-positive IoU rule (strictly greater)"},
    {"eval.iou_detected", "0.4", "IoU defining a detected mass for AUC/Dice"},
};

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig::RunConfig() {
  for (const auto& k : kKeys) values_[k.key] = k.def;
}

RunConfig RunConfig::from_file(const std::string& path) {
  RunConfig cfg;
  cfg.apply_file(path);
  return cfg;
}

void RunConfig::apply_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw UsageError("config: line " + std::to_string(lineno) + " of " + path + " is not `key = value`");
    set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!values_.count(key)) throw UsageError("config: unknown key '" + key + "'");
  if (key == "model.preset") {
    if (value == "desk") {
      values_["model.channels"] = "8,16,32,64";
      values_["model.delta"] = "64";
      values_["data.image_size"] = "64";
    } else if (value == "paper-shape") {
      values_["model.channels"] = "64,256,512,1024";
      values_["model.delta"] = "256";
      values_["data.image_size"] = "512";
    } else {
      throw UsageError("config: model.preset must be desk or paper-shape, got '" + value + "'");
    }
  }
  values_[key] = value;
  explicit_.insert(key);
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw UsageError("config: unknown key '" + key + "'");
  return it->second;
}

long RunConfig::get_int(const std::string& key) const {
  try {
    return std::stol(get(key));
  } catch (const std::exception&) {
    throw UsageError("config: key '" + key + "' is not an integer: " + get(key));
  }
}

double RunConfig::get_real(const std::string& key) const {
  try {
    return std::stod(get(key));
  } catch (const std::exception&) {
    throw UsageError("config: key '" + key + "' is not a number: " + get(key));
  }
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw UsageError("config: key '" + key + "' is not a boolean: " + v);
}

std::vector<double> RunConfig::get_reals(const std::string& key) const {
  std::vector<double> out;
  std::stringstream ss(get(key));
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      out.push_back(std::stod(trim(tok)));
    } catch (const std::exception&) {
      throw UsageError("config: key '" + key + "' has a non-numeric entry: " + tok);
    }
  }
  return out;
}

std::string RunConfig::resolved_text() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
  return os.str();
}

std::string RunConfig::describe_keys() {
  std::ostringstream os;
  for (const auto& k : kKeys) os << k.key << " (default " << k.def << "): " << k.doc << "\n";
  return os.str();
}

ModelConfig model_config_from(const RunConfig& cfg) {
  ModelConfig mc;
  const auto channels = cfg.get_reals("model.channels");
  if (channels.size() != 4) throw UsageError("config: model.channels needs exactly 4 entries");
  for (int i = 0; i < 4; ++i)
    mc.backbone.stage_channels[static_cast<std::size_t>(i)] = static_cast<int>(channels[static_cast<std::size_t>(i)]);
  mc.backbone.blocks_per_stage = static_cast<int>(cfg.get_int("model.blocks_per_stage"));
  mc.delta = static_cast<int>(cfg.get_int("model.delta"));
  mc.transfer_enabled = cfg.get_bool("model.transfer");
  mc.stop_grad_weight_map = cfg.get_bool("model.stop_grad_weight_map");
  mc.anchor_scales = cfg.get_reals("rpn.anchor_scales");
  return mc;
}

TrainConfig train_config_from(const RunConfig& cfg) {
  TrainConfig tc;
  tc.lr = cfg.get_real("train.lr");
  tc.momentum = cfg.get_real("train.momentum");
  tc.batch_size = static_cast<int>(cfg.get_int("train.batch_size"));
  tc.epochs_per_phase = static_cast<int>(cfg.get_int("train.epochs_per_phase"));
  tc.lambdas = LossWeights{cfg.get_real("train.lambda_cls"), cfg.get_real("train.lambda_box"),
                           cfg.get_real("train.lambda_mask")};
  tc.seed = static_cast<std::uint64_t>(cfg.get_int("train.seed"));
  tc.include_prop_in_joint = cfg.get_bool("train.include_prop_in_joint");
  tc.rpn_pos_iou = cfg.get_real("rpn.pos_iou");
  tc.rpn_neg_iou = cfg.get_real("rpn.neg_iou");
  tc.score_threshold = cfg.get_real("rpn.score_threshold");
  tc.topn_train = static_cast<int>(cfg.get_int("rpn.topn_train"));
  tc.topn_infer = static_cast<int>(cfg.get_int("rpn.topn_infer"));
  tc.roi_per_image = static_cast<int>(cfg.get_int("train.roi_per_image"));
  tc.neg_ratio = static_cast<int>(cfg.get_int("rpn.neg_ratio"));
  tc.nms_iou = cfg.get_real("infer.nms_iou");
  return tc;
}

}  // namespace ftmtl
