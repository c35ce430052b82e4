#include "im/io.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace im::io {

namespace {

void put_u32(std::vector<std::byte>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xff));
}
void put_u64(std::vector<std::byte>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::span<const std::byte> b) : b_(b) {}
  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>(b_[pos_++]);
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  std::span<const std::byte> bytes(size_t n) {
    need(n);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  size_t pos() const { return pos_; }

 private:
  void need(size_t n) const {
    if (pos_ + n > b_.size()) fail(ErrKind::io, "truncated stream");
  }
  std::span<const std::byte> b_;
  size_t pos_ = 0;
};

constexpr char kTensorMagic[4] = {'I', 'M', 'T', 'N'};
constexpr char kWeightMagic[4] = {'I', 'M', 'W', 'T'};

}  // namespace

std::vector<std::byte> encode_tensor(const Tensor& t) {
  std::vector<std::byte> out;
  out.reserve(6 + 4 * t.rank() + 4 * t.numel());
  for (char c : kTensorMagic) out.push_back(static_cast<std::byte>(c));
  out.push_back(std::byte{1});
  out.push_back(static_cast<std::byte>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) put_u32(out, static_cast<uint32_t>(t.dim(i)));
  if (t.dtype() == DType::f32) {
    auto d = t.data<float>();
    const auto* raw = reinterpret_cast<const std::byte*>(d.data());
    out.insert(out.end(), raw, raw + d.size() * 4);
  } else {
    for (int64_t i = 0; i < t.numel(); ++i) {
      const float v = static_cast<float>(t.at(i));
      const auto* raw = reinterpret_cast<const std::byte*>(&v);
      out.insert(out.end(), raw, raw + 4);
    }
  }
  return out;
}

Tensor decode_tensor(std::span<const std::byte> bytes, size_t* consumed) {
  Reader r(bytes);
  for (char c : kTensorMagic)
    if (r.u8() != static_cast<uint8_t>(c)) fail(ErrKind::io, "bad tensor magic, expected IMTN");
  const uint8_t version = r.u8();
  if (version != 1) fail(ErrKind::io, "unsupported tensor version " + std::to_string(version));
  const uint8_t rank = r.u8();
  if (rank < 1 || rank > 4) fail(ErrKind::io, "bad tensor rank " + std::to_string(rank));
  Shape s;
  s.rank = rank;
  for (int i = 0; i < rank; ++i) s.d[i] = r.u32();
  s.validate();
  Tensor t = Tensor::zeros(s, DType::f32);
  auto payload = r.bytes(static_cast<size_t>(s.numel()) * 4);
  std::memcpy(t.raw(), payload.data(), payload.size());
  if (consumed) *consumed = r.pos();
  return t;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrKind::io, "cannot open " + path);
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return data;
}

void write_file(const std::string& path, std::span<const std::byte> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrKind::io, "cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrKind::io, "short write to " + path);
}

void write_tensor(const Tensor& t, const std::string& path) {
  auto bytes = encode_tensor(t);
  write_file(path, bytes);
}

Tensor read_tensor(const std::string& path) {
  const std::string data = read_file(path);
  return decode_tensor({reinterpret_cast<const std::byte*>(data.data()), data.size()});
}

namespace {

const char* mixer_name(nn::MixerKind k) {
  switch (k) {
    case nn::MixerKind::inception_band: return "inception_band";
    case nn::MixerKind::dw3x3: return "dw3x3";
    case nn::MixerKind::strip: return "strip";
    case nn::MixerKind::inception_dw: return "inception_dw";
  }
  return "?";
}
nn::MixerKind mixer_from(const std::string& s) {
  if (s == "inception_band") return nn::MixerKind::inception_band;
  if (s == "dw3x3") return nn::MixerKind::dw3x3;
  if (s == "strip") return nn::MixerKind::strip;
  if (s == "inception_dw") return nn::MixerKind::inception_dw;
  fail(ErrKind::config, "unknown mixer kind '" + s + "'");
}
const char* global_name(nn::GlobalKind k) {
  switch (k) {
    case nn::GlobalKind::bottleneck_ss2d: return "bottleneck_ss2d";
    case nn::GlobalKind::plain_ss2d: return "plain_ss2d";
    case nn::GlobalKind::none: return "none";
  }
  return "?";
}
nn::GlobalKind global_from(const std::string& s) {
  if (s == "bottleneck_ss2d") return nn::GlobalKind::bottleneck_ss2d;
  if (s == "plain_ss2d") return nn::GlobalKind::plain_ss2d;
  if (s == "none") return nn::GlobalKind::none;
  fail(ErrKind::config, "unknown global mixer kind '" + s + "'");
}

}  // namespace

std::string config_to_json(const zoo::ModelConfig& cfg) {
  nlohmann::json j;
  j["name"] = cfg.name;
  j["num_classes"] = cfg.num_classes;
  j["stem"] = cfg.stem == zoo::StemKind::patch_embed_x4 ? "patch_embed_x4" : "conv_x2";
  j["head_hidden_ratio"] = cfg.head_hidden_ratio;
  j["stages"] = nlohmann::json::array();
  for (const auto& s : cfg.stages) {
    const auto& b = s.block;
    j["stages"].push_back({{"embed_dim", s.embed_dim},
                           {"num_blocks", s.num_blocks},
                           {"block",
                            {{"conv_group_ratio", b.conv_group_ratio},
                             {"square_kernel", {b.square_kernel.first, b.square_kernel.second}},
                             {"band_kernel", {b.band_kernel.first, b.band_kernel.second}},
                             {"bottleneck_ratio", b.bottleneck_ratio},
                             {"mlp_ratio", b.mlp_ratio},
                             {"ssm", {{"state_dim", b.ssm.state_dim}, {"dt_rank", b.ssm.dt_rank}}},
                             {"mixer", mixer_name(b.mixer)},
                             {"global", global_name(b.global)}}}});
  }
  return j.dump(2);
}

zoo::ModelConfig config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    fail(ErrKind::io, std::string("config parse error: ") + e.what());
  }
  zoo::ModelConfig cfg;
  try {
    cfg.name = j.value("name", "custom");
    cfg.num_classes = j.at("num_classes").get<int>();
    cfg.stem = j.at("stem").get<std::string>() == "conv_x2" ? zoo::StemKind::conv_x2 : zoo::StemKind::patch_embed_x4;
    cfg.head_hidden_ratio = j.value("head_hidden_ratio", 3);
    const auto& stages = j.at("stages");
    if (stages.size() != 4) fail(ErrKind::config, "config must have exactly 4 stages");
    for (int i = 0; i < 4; ++i) {
      const auto& s = stages[i];
      cfg.stages[i].embed_dim = s.at("embed_dim").get<int>();
      cfg.stages[i].num_blocks = s.at("num_blocks").get<int>();
      auto& b = cfg.stages[i].block;
      const auto& jb = s.at("block");
      b.channels = cfg.stages[i].embed_dim;
      b.conv_group_ratio = jb.value("conv_group_ratio", 0.125);
      b.square_kernel = {jb.at("square_kernel")[0].get<int>(), jb.at("square_kernel")[1].get<int>()};
      b.band_kernel = {jb.at("band_kernel")[0].get<int>(), jb.at("band_kernel")[1].get<int>()};
      b.bottleneck_ratio = jb.value("bottleneck_ratio", 0.5);
      b.mlp_ratio = jb.value("mlp_ratio", 4);
      b.ssm.state_dim = jb.at("ssm").value("state_dim", 16);
      b.ssm.dt_rank = jb.at("ssm").value("dt_rank", 0);
      b.mixer = mixer_from(jb.value("mixer", "inception_band"));
      b.global = global_from(jb.value("global", "bottleneck_ss2d"));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrKind::io, std::string("config field error: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

void write_config(const zoo::ModelConfig& cfg, const std::string& path) {
  const std::string text = config_to_json(cfg);
  write_file(path, {reinterpret_cast<const std::byte*>(text.data()), text.size()});
}

zoo::ModelConfig read_config(const std::string& path) { return config_from_json(read_file(path)); }

uint64_t config_hash(const zoo::ModelConfig& cfg) {
  const std::string canon = config_to_json(cfg);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canon) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void save_weights(zoo::Model& model, const std::string& path) {
  std::vector<std::byte> out;
  for (char c : kWeightMagic) out.push_back(static_cast<std::byte>(c));
  out.push_back(std::byte{1});
  put_u64(out, config_hash(model.config()));
  auto params = model.named_params();
  put_u32(out, static_cast<uint32_t>(params.size()));
  for (auto& [name, p] : params) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    for (char c : name) out.push_back(static_cast<std::byte>(c));
    auto rec = encode_tensor(*p);
    out.insert(out.end(), rec.begin(), rec.end());
  }
  write_file(path, out);
}

void load_weights(zoo::Model& model, const std::string& path) {
  const std::string data = read_file(path);
  Reader r({reinterpret_cast<const std::byte*>(data.data()), data.size()});
  for (char c : kWeightMagic)
    if (r.u8() != static_cast<uint8_t>(c)) fail(ErrKind::io, "bad weight magic, expected IMWT");
  if (r.u8() != 1) fail(ErrKind::io, "unsupported weight file version");
  const uint64_t hash = r.u64();
  if (hash != config_hash(model.config()))
    fail(ErrKind::config, "weight file was written for a different model configuration");
  const uint32_t count = r.u32();
  auto params = model.named_params();
  if (count != params.size())
    fail(ErrKind::io, "weight file has " + std::to_string(count) + " records, model has " +
                          std::to_string(params.size()));
  for (auto& [name, p] : params) {
    const uint32_t len = r.u32();
    auto nb = r.bytes(len);
    std::string rec_name(reinterpret_cast<const char*>(nb.data()), len);
    if (rec_name != name)
      fail(ErrKind::io, "weight record '" + rec_name + "' does not match parameter '" + name + "'");
    size_t consumed = 0;
    const size_t start = r.pos();
    Tensor t = decode_tensor({reinterpret_cast<const std::byte*>(data.data()) + start, data.size() - start},
                             &consumed);
    r.bytes(consumed);
    if (!(t.shape() == p->shape()))
      fail(ErrKind::io, "weight record '" + name + "' shape " + t.shape().str() + " != " + p->shape().str());
    *p = model.dtype() == DType::f32 ? t : t.to(DType::f64);
  }
}

void write_pgm(const Tensor& plane, const std::string& path) {
  if (plane.rank() != 2) fail(ErrKind::shape, "write_pgm expects [H,W], got " + plane.shape().str());
  const int64_t h = plane.dim(0), w = plane.dim(1);
  double lo = plane.at(0), hi = plane.at(0);
  for (int64_t i = 1; i < plane.numel(); ++i) {
    lo = std::min(lo, plane.at(i));
    hi = std::max(hi, plane.at(i));
  }
  std::vector<std::byte> out;
  char header[64];
  const int hl = std::snprintf(header, sizeof(header), "P5\n%lld %lld\n255\n", static_cast<long long>(w),
                               static_cast<long long>(h));
  out.insert(out.end(), reinterpret_cast<const std::byte*>(header), reinterpret_cast<const std::byte*>(header) + hl);
  const double range = hi - lo;
  for (int64_t i = 0; i < plane.numel(); ++i) {
    const int v = range > 0 ? static_cast<int>(std::lround((plane.at(i) - lo) / range * 255.0)) : 128;
    out.push_back(static_cast<std::byte>(v));
  }
  write_file(path, out);
}

std::string cosine_csv(const Tensor& f) {
  if (f.rank() != 4 || f.dim(0) != 1) fail(ErrKind::shape, "cosine_csv expects [1,C,H,W], got " + f.shape().str());
  const int64_t c = f.dim(1), plane = f.dim(2) * f.dim(3);
  std::vector<double> norms(c, 0.0);
  for (int64_t i = 0; i < c; ++i) {
    double acc = 0;
    for (int64_t s = 0; s < plane; ++s) {
      const double v = f.at(i * plane + s);
      acc += v * v;
    }
    norms[i] = std::sqrt(acc);
  }
  std::string csv = "channel_i,channel_j,cosine\n";
  for (int64_t i = 0; i < c; ++i)
    for (int64_t j = i + 1; j < c; ++j) {
      double dot = 0;
      for (int64_t s = 0; s < plane; ++s) dot += f.at(i * plane + s) * f.at(j * plane + s);
      const double cosine = norms[i] > 0 && norms[j] > 0 ? dot / (norms[i] * norms[j]) : 0.0;
      char line[96];
      std::snprintf(line, sizeof(line), "%lld,%lld,%.6f\n", static_cast<long long>(i), static_cast<long long>(j),
                    cosine);
      csv += line;
    }
  return csv;
}

FeatureDump dump_features(const zoo::Model& model, const Tensor& x, int stage, int block,
                          const std::string& out_dir) {
  Tensor f = model.forward_collect(x, stage, block);
  const int64_t c = f.dim(1), h = f.dim(2), w = f.dim(3), plane = h * w;
  std::filesystem::create_directories(out_dir);
  FeatureDump result;
  result.channels = c;
  for (int64_t ch = 0; ch < c; ++ch) {
    Tensor pl = Tensor::zeros({h, w}, DType::f32);
    for (int64_t s = 0; s < plane; ++s) pl.set(s, f.at(f.idx4(0, ch, 0, 0) + s));
    char name[64];
    std::snprintf(name, sizeof(name), "stage%d_block%d_ch%03lld.pgm", stage, block, static_cast<long long>(ch));
    const std::string path = out_dir + "/" + name;
    write_pgm(pl, path);
    result.image_files.push_back(path);
  }

  const std::string csv = cosine_csv(f);
  result.csv_file = out_dir + "/cosine_similarity.csv";
  write_file(result.csv_file, {reinterpret_cast<const std::byte*>(csv.data()), csv.size()});
  return result;
}

}  // namespace im::io
