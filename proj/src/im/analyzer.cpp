#include "im/analyzer.hpp"

#include <json.hpp>

#include <cmath>
#include <map>
#include <sstream>

namespace im::analysis {

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::norm: return "norm";
    case LayerKind::activation: return "activation";
    case LayerKind::linear: return "linear";
    case LayerKind::scan: return "scan";
    case LayerKind::pool: return "pool";
  }
  return "?";
}

namespace {

struct Walker {
  std::vector<CostRow>& rows;
  int64_t res;  // 0 when only parameters are wanted

  void row(std::string path, LayerKind kind, int64_t params, int64_t macs) {
    rows.push_back(CostRow{std::move(path), kind, params, res > 0 ? macs : 0});
  }

  void conv(const std::string& path, int64_t sites, int64_t cin, int64_t cout, int64_t kh, int64_t kw,
            bool bias, bool depthwise = false) {
    const int64_t per_out = (depthwise ? 1 : cin) * kh * kw;
    row(path, LayerKind::conv, cout * per_out + (bias ? cout : 0), sites * cout * per_out);
  }
  void norm(const std::string& path, int64_t sites, int64_t channels) {
    row(path, LayerKind::norm, 2 * channels, 2 * sites * channels);
  }
  void act(const std::string& path, int64_t elements) { row(path, LayerKind::activation, 0, elements); }

  void ss2d(const std::string& path, int64_t w, int64_t l, int state_dim, int dt_rank) {
    const int64_t n = state_dim, r = dt_rank;
    conv(path + ".in_proj", l, w, w, 1, 1, false);
    conv(path + ".conv", l, w, w, 3, 3, true, true);
    act(path + ".silu", l * w);
    // four directions share the same shapes
    row(path + ".scan_proj", LayerKind::scan, 4 * (w * (r + 2 * n) + r * w + w),
        4 * (l * w * (r + 2 * n) + l * r * w));
    act(path + ".scan_softplus", 4 * l * w);
    row(path + ".scan_core", LayerKind::scan, 4 * (w * n + w), 4 * (5 * l * w * n + l * w));
    norm(path + ".out_norm", l, w);
    conv(path + ".out_proj", l, w, w, 1, 1, false);
  }

  void mixer(const std::string& path, const nn::BlockConfig& bc, int64_t l) {
    const auto [skh, skw] = bc.square_kernel;
    const auto [bkh, bkw] = bc.band_kernel;
    switch (bc.mixer) {
      case nn::MixerKind::dw3x3:
        conv(path + ".square", l, bc.channels, bc.channels, skh, skw, true, true);
        break;
      case nn::MixerKind::inception_band: {
        std::vector<double> rr{bc.conv_group_ratio, bc.conv_group_ratio, 1 - 2 * bc.conv_group_ratio};
        auto g = split_sizes(bc.channels, rr);
        conv(path + ".square", l, g[0], g[0], skh, skw, true, true);
        conv(path + ".band_h", l, g[1], g[1], bkh, bkw, true, true);
        conv(path + ".band_v", l, g[1], g[1], bkw, bkh, true, true);
        break;
      }
      case nn::MixerKind::strip: {
        std::vector<double> rr{bc.conv_group_ratio, bc.conv_group_ratio, 1 - 2 * bc.conv_group_ratio};
        auto g = split_sizes(bc.channels, rr);
        conv(path + ".square", l, g[0], g[0], skh, skw, true, true);
        conv(path + ".band_h", l, g[1], g[1], 1, bkw, true, true);
        conv(path + ".band_v", l, g[1], g[1], bkw, 1, true, true);
        break;
      }
      case nn::MixerKind::inception_dw: {
        std::vector<double> rr{bc.conv_group_ratio, bc.conv_group_ratio, bc.conv_group_ratio,
                               1 - 3 * bc.conv_group_ratio};
        auto g = split_sizes(bc.channels, rr);
        conv(path + ".square", l, g[0], g[0], skh, skw, true, true);
        conv(path + ".band_h", l, g[1], g[1], 1, bkw, true, true);
        conv(path + ".band_v", l, g[2], g[2], bkw, 1, true, true);
        break;
      }
    }
  }

  void block(const std::string& path, const nn::BlockConfig& bc, int64_t l, int state_dim) {
    const int64_t c = bc.channels;
    mixer(path + ".mixer", bc, l);
    if (bc.global != nn::GlobalKind::none) {
      const int64_t w = bc.global == nn::GlobalKind::bottleneck_ss2d ? bc.bottleneck_width() : c;
      const int rank = bc.ssm.dt_rank > 0 ? bc.ssm.dt_rank : ssm::default_dt_rank(static_cast<int>(w));
      if (bc.global == nn::GlobalKind::bottleneck_ss2d) {
        conv(path + ".global.compress", l, c, w, 1, 1, true);
        ss2d(path + ".global.ss2d", w, l, bc.ssm.state_dim, rank);
        conv(path + ".global.expand", l, w, c, 1, 1, true);
      } else {
        ss2d(path + ".global.ss2d", w, l, bc.ssm.state_dim, rank);
      }
    }
    norm(path + ".norm", l, c);
    const int64_t hidden = static_cast<int64_t>(bc.mlp_ratio) * c;
    conv(path + ".mlp.fc1", l, c, hidden, 1, 1, true);
    act(path + ".mlp.gelu", l * hidden);
    conv(path + ".mlp.fc2", l, hidden, c, 1, 1, true);
  }
};

}  // namespace

namespace {

CostReport analyze(const zoo::ModelConfig& cfg, int resolution) {
  cfg.validate();
  CostReport report;
  report.model_name = cfg.name;
  report.resolution = resolution;
  report.state_dim = cfg.stages[0].block.ssm.state_dim;
  report.dt_rank_rule = cfg.stages[0].block.ssm.dt_rank > 0
                            ? std::to_string(cfg.stages[0].block.ssm.dt_rank)
                            : "ceil(width/16)";
  Walker wk{report.rows, resolution};

  const bool x4 = cfg.stem == zoo::StemKind::patch_embed_x4;
  const int64_t r = resolution;
  const int64_t d0 = cfg.stages[0].embed_dim;
  if (x4) {
    wk.conv("stem.conv1", (r / 2) * (r / 2), 3, d0 / 2, 3, 3, false);
    wk.norm("stem.norm1", (r / 2) * (r / 2), d0 / 2);
    wk.conv("stem.conv2", (r / 4) * (r / 4), d0 / 2, d0, 3, 3, false);
    wk.norm("stem.norm2", (r / 4) * (r / 4), d0);
  } else {
    wk.conv("stem.conv1", (r / 2) * (r / 2), 3, d0, 3, 3, false);
    wk.norm("stem.norm1", (r / 2) * (r / 2), d0);
  }

  const int64_t stage0_div = x4 ? 4 : 2;
  for (int s = 0; s < 4; ++s) {
    const int64_t side = r / (stage0_div << s);
    const int64_t l = side * side;
    nn::BlockConfig bc = cfg.stages[s].block;
    bc.channels = cfg.stages[s].embed_dim;
    const std::string sp = "stages." + std::to_string(s);
    for (int b = 0; b < cfg.stages[s].num_blocks; ++b)
      wk.block(sp + ".blocks." + std::to_string(b), bc, l, bc.ssm.state_dim);
    if (s < 3) {
      const int64_t lnext = (side / 2) * (side / 2);
      wk.conv(sp + ".downsample.conv", lnext, cfg.stages[s].embed_dim, cfg.stages[s + 1].embed_dim, 3, 3, false);
      wk.norm(sp + ".downsample.norm", lnext, cfg.stages[s + 1].embed_dim);
    }
  }

  const int64_t d3 = cfg.stages[3].embed_dim;
  const int64_t l3 = (r / (stage0_div << 3)) * (r / (stage0_div << 3));
  const int64_t hidden = static_cast<int64_t>(cfg.head_hidden_ratio) * d3;
  wk.norm("final_norm", l3, d3);
  wk.row("head.gap", LayerKind::pool, 0, l3 * d3);
  wk.row("head.fc1", LayerKind::linear, d3 * hidden + hidden, d3 * hidden);
  wk.act("head.gelu", hidden);
  wk.row("head.norm", LayerKind::norm, 2 * hidden, 2 * hidden);
  wk.row("head.fc2", LayerKind::linear, hidden * cfg.num_classes + cfg.num_classes, hidden * cfg.num_classes);
  return report;
}

}  // namespace

CostReport count_params(const zoo::ModelConfig& cfg) { return analyze(cfg, 0); }

CostReport count_macs(const zoo::ModelConfig& cfg, int resolution) {
  const int div = cfg.spatial_divisor();
  if (resolution < div || resolution % div != 0)
    fail(ErrKind::config,
         "resolution " + std::to_string(resolution) + " must be a positive multiple of " + std::to_string(div));
  return analyze(cfg, resolution);
}

int64_t CostReport::total_params() const {
  int64_t t = 0;
  for (const CostRow& r : rows) t += r.params;
  return t;
}

int64_t CostReport::total_macs() const {
  int64_t t = 0;
  for (const CostRow& r : rows) t += r.macs;
  return t;
}

int64_t CostReport::macs_of_kind(LayerKind k) const {
  int64_t t = 0;
  for (const CostRow& r : rows)
    if (r.kind == k) t += r.macs;
  return t;
}

int64_t CostReport::conv_macs_body() const {
  int64_t t = 0;
  for (const CostRow& r : rows)
    if (r.kind == LayerKind::conv && r.path.rfind("head.", 0) != 0) t += r.macs;
  return t;
}

std::string CostReport::text() const {
  std::ostringstream os;
  os << "model " << model_name << "  (state_dim=" << state_dim << ", dt_rank=" << dt_rank_rule << ")\n";
  if (resolution > 0) os << "resolution " << resolution << "x" << resolution << ", batch 1\n";
  os << '\n';
  char line[160];
  std::snprintf(line, sizeof(line), "%-24s %16s %16s\n", "module", "params", resolution > 0 ? "macs" : "-");
  os << line;

  // roll up by top-level group to keep the table readable
  std::map<std::string, std::pair<int64_t, int64_t>> groups;
  std::vector<std::string> order;
  for (const CostRow& r : rows) {
    std::string key = r.path.substr(0, r.path.find('.'));
    if (key == "stages") {
      const size_t dot = r.path.find('.', 7);
      key = r.path.substr(0, dot);
    }
    if (!groups.count(key)) order.push_back(key);
    groups[key].first += r.params;
    groups[key].second += r.macs;
  }
  for (const std::string& key : order) {
    std::snprintf(line, sizeof(line), "%-24s %16lld %16lld\n", key.c_str(),
                  static_cast<long long>(groups[key].first), static_cast<long long>(groups[key].second));
    os << line;
  }
  std::snprintf(line, sizeof(line), "%-24s %16lld %16lld\n", "total",
                static_cast<long long>(total_params()), static_cast<long long>(total_macs()));
  os << line;
  std::snprintf(line, sizeof(line), "params %.3fM", total_params() / 1e6);
  os << '\n' << line;
  if (resolution > 0) {
    std::snprintf(line, sizeof(line), ", macs %.3fG", total_macs() / 1e9);
    os << line;
  }
  os << '\n';
  return os.str();
}

std::string CostReport::json() const {
  nlohmann::json j;
  j["model"] = model_name;
  j["resolution"] = resolution;
  j["state_dim"] = state_dim;
  j["dt_rank"] = dt_rank_rule;
  j["rows"] = nlohmann::json::array();
  for (const CostRow& r : rows)
    j["rows"].push_back({{"path", r.path}, {"kind", kind_name(r.kind)}, {"params", r.params}, {"macs", r.macs}});
  j["total_params"] = total_params();
  j["total_macs"] = total_macs();
  return j.dump(2);
}

bool verify_against_enumeration(const zoo::ModelConfig& cfg, std::string* detail) {
  const int64_t closed = count_params(cfg).total_params();
  zoo::Model model = zoo::Model::build(cfg, 1);
  const int64_t enumerated = model.parameter_count();
  if (detail) {
    std::ostringstream os;
    os << "closed-form " << closed << " vs enumerated " << enumerated
       << (closed == enumerated ? " (exact match)" : " (MISMATCH)");
    *detail = os.str();
  }
  return closed == enumerated;
}

}  // namespace im::analysis
