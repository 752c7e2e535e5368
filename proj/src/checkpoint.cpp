#include "ftmtl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ftmtl/errors.hpp"

namespace ftmtl {

namespace {

constexpr char kMagic[8] = {'F', 'T', 'M', 'T', 'L', 'C', 'K', 'P'};

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}
void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  explicit Reader(const std::string& b) : buf(b) {}

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw IoError("checkpoint: truncated file");
  }
  std::uint16_t u16() {
    need(2);
    const auto v = static_cast<std::uint16_t>(static_cast<unsigned char>(buf[pos]) |
                                              (static_cast<unsigned char>(buf[pos + 1]) << 8));
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

std::string join_scales(const std::vector<double>& scales) {
  std::ostringstream os;
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (i) os << ',';
    char b[32];
    std::snprintf(b, sizeof b, "%.17g", scales[i]);
    os << b;
  }
  return os.str();
}

std::vector<double> parse_scales(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
  return out;
}

}  // namespace

MetaMap model_config_meta(const ModelConfig& cfg) {
  MetaMap m;
  std::ostringstream ch;
  for (int i = 0; i < 4; ++i) ch << (i ? "," : "") << cfg.backbone.stage_channels[static_cast<std::size_t>(i)];
  m["model.channels"] = ch.str();
  m["model.blocks_per_stage"] = std::to_string(cfg.backbone.blocks_per_stage);
  m["model.delta"] = std::to_string(cfg.delta);
  m["model.transfer"] = cfg.transfer_enabled ? "true" : "false";
  m["model.stop_grad_weight_map"] = cfg.stop_grad_weight_map ? "true" : "false";
  m["model.anchor_scales"] = join_scales(cfg.anchor_scales);
  return m;
}

ModelConfig model_config_from_meta(const MetaMap& meta) {
  ModelConfig cfg;
  auto get = [&meta](const std::string& key) -> const std::string& {
    auto it = meta.find(key);
    if (it == meta.end()) throw DataMismatchError("checkpoint: missing config key " + key);
    return it->second;
  };
  {
    std::stringstream ss(get("model.channels"));
    std::string tok;
    for (int i = 0; i < 4; ++i) {
      if (!std::getline(ss, tok, ',')) throw DataMismatchError("checkpoint: model.channels needs 4 entries");
      cfg.backbone.stage_channels[static_cast<std::size_t>(i)] = std::stoi(tok);
    }
  }
  cfg.backbone.blocks_per_stage = std::stoi(get("model.blocks_per_stage"));
  cfg.delta = std::stoi(get("model.delta"));
  cfg.transfer_enabled = get("model.transfer") == "true";
  cfg.stop_grad_weight_map = get("model.stop_grad_weight_map") == "true";
  cfg.anchor_scales = parse_scales(get("model.anchor_scales"));
  return cfg;
}

void save_checkpoint(const MtlModel<float>& model, const MetaMap& extra_meta, const std::string& path) {
  auto params = const_cast<MtlModel<float>&>(model).params().all();

  std::string header(kMagic, sizeof kMagic);
  put_u32(header, kCheckpointVersion);
  put_u32(header, static_cast<std::uint32_t>(params.size()));

  std::string data;
  for (const auto& p : params) {
    put_u16(header, static_cast<std::uint16_t>(p->name.size()));
    header += p->name;
    header.push_back(0);  // dtype f32
    header.push_back(static_cast<char>(p->tensor.rank()));
    for (int d : p->tensor.shape()) put_u32(header, static_cast<std::uint32_t>(d));
    put_u64(header, data.size());
    for (long i = 0; i < p->tensor.size(); ++i)
      put_u32(data, std::bit_cast<std::uint32_t>(p->tensor.value()[i]));
  }
  put_u64(header, data.size());

  MetaMap meta = model_config_meta(model.config());
  for (const auto& [k, v] : extra_meta) meta[k] = v;
  std::string config_text;
  for (const auto& [k, v] : meta) config_text += k + " = " + v + "\n";

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot open for writing: " + path);
  out << header << data;
  std::string tail;
  put_u64(tail, config_text.size());
  out << tail << config_text;
  if (!out) throw IoError("checkpoint: write failed: " + path);
}

std::unique_ptr<MtlModel<float>> load_checkpoint(const std::string& path, MetaMap* meta_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();

  Reader r(buf);
  if (r.bytes(8) != std::string(kMagic, 8)) throw IoError("checkpoint: bad magic bytes: " + path);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint: file has version " + std::to_string(version) +
                       ", this build reads version " + std::to_string(kCheckpointVersion));

  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  const std::uint32_t count = r.u32();
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.bytes(r.u16());
    const auto dtype = static_cast<unsigned char>(r.bytes(1)[0]);
    if (dtype != 0) throw DataMismatchError("checkpoint: unsupported dtype for " + e.name);
    const auto rank = static_cast<unsigned char>(r.bytes(1)[0]);
    for (int d = 0; d < rank; ++d) e.shape.push_back(static_cast<int>(r.u32()));
    e.offset = r.u64();
    entries.push_back(std::move(e));
  }
  const std::uint64_t data_size = r.u64();
  const std::string data = r.bytes(data_size);

  const std::uint64_t config_len = r.u64();
  const std::string config_text = r.bytes(config_len);
  MetaMap meta;
  std::stringstream cs(config_text);
  std::string line;
  while (std::getline(cs, line)) {
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    meta[line.substr(0, eq)] = line.substr(eq + 3);
  }

  auto model = std::make_unique<MtlModel<float>>(model_config_from_meta(meta));
  for (const auto& e : entries) {
    if (!model->params().has(e.name)) throw DataMismatchError("checkpoint: tensor name not in model: " + e.name);
    auto& p = model->params().at(e.name);
    if (p.tensor.shape() != e.shape)
      throw DataMismatchError("checkpoint: shape mismatch for " + e.name + ": file has " + shape_str(e.shape) +
                              ", model has " + shape_str(p.tensor.shape()));
    const std::uint64_t bytes = static_cast<std::uint64_t>(p.tensor.size()) * 4;
    if (e.offset + bytes > data.size()) throw IoError("checkpoint: truncated data block");
    for (long i = 0; i < p.tensor.size(); ++i) {
      std::uint32_t v = 0;
      for (int b = 0; b < 4; ++b)
        v |= static_cast<std::uint32_t>(
                 static_cast<unsigned char>(data[e.offset + static_cast<std::uint64_t>(i) * 4 + b]))
             << (8 * b);
      p.tensor.value()[i] = std::bit_cast<float>(v);
    }
  }
  for (const auto& p : model->params().all()) {
    bool found = false;
    for (const auto& e : entries) found |= e.name == p->name;
    if (!found) throw DataMismatchError("checkpoint: missing tensor name: " + p->name);
  }

  if (meta_out) *meta_out = std::move(meta);
  return model;
}

}  // namespace ftmtl
