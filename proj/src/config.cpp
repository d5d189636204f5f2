#include "geohand/config.hpp"

#include <cctype>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace geohand {

namespace {

struct KeyDef {
  const char* name;
  std::function<void(Config&, const std::string&)> set;
  std::function<std::string(const Config&)> get;
};

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

int parse_int(const std::string& key, const std::string& v) {
  size_t pos = 0;
  int out = 0;
  try {
    out = std::stoi(v, &pos);
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (pos != v.size()) throw std::runtime_error("config: key '" + key + "' wants an integer, got '" + v + "'");
  return out;
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  size_t pos = 0;
  uint64_t out = 0;
  try {
    out = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (pos != v.size()) throw std::runtime_error("config: key '" + key + "' wants an unsigned integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  size_t pos = 0;
  double out = 0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (pos != v.size()) throw std::runtime_error("config: key '" + key + "' wants a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw std::runtime_error("config: key '" + key + "' wants true or false, got '" + v + "'");
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

#define INT_KEY(name, field)                                                               \
  KeyDef{name, [](Config& c, const std::string& v) { c.field = parse_int(name, v); },      \
         [](const Config& c) { return std::to_string(c.field); }}
#define DBL_KEY(name, field)                                                               \
  KeyDef{name, [](Config& c, const std::string& v) { c.field = parse_double(name, v); },   \
         [](const Config& c) { return fmt_double(c.field); }}
#define BOOL_KEY(name, field)                                                              \
  KeyDef{name, [](Config& c, const std::string& v) { c.field = parse_bool(name, v); },     \
         [](const Config& c) { return c.field ? std::string("true") : std::string("false"); }}
#define STR_KEY(name, field)                                                               \
  KeyDef{name, [](Config& c, const std::string& v) { c.field = v; },                       \
         [](const Config& c) { return c.field; }}

const std::vector<KeyDef>& key_table() {
  static const std::vector<KeyDef> table = {
      KeyDef{"seed", [](Config& c, const std::string& v) { c.seed = parse_u64("seed", v); },
             [](const Config& c) { return std::to_string(c.seed); }},
      STR_KEY("out", out),
      INT_KEY("model.image_h", model.image_h),
      INT_KEY("model.image_w", model.image_w),
      INT_KEY("model.patch", model.patch),
      INT_KEY("model.dim", model.dim),
      INT_KEY("model.depth", model.depth),
      INT_KEY("model.heads", model.heads),
      INT_KEY("model.mlp_ratio", model.mlp_ratio),
      INT_KEY("model.fusion_after_block", model.fusion_after_block),
      DBL_KEY("model.gate_init", model.gate_init),
      INT_KEY("model.geo_channels", model.geo_channels),
      INT_KEY("model.side_channels", model.side_channels),
      INT_KEY("model.adapter_depth", model.adapter_depth),
      INT_KEY("model.geo_h", model.geo_h),
      INT_KEY("model.geo_w", model.geo_w),
      STR_KEY("model.geo_mode", model.geo_mode),
      BOOL_KEY("model.use_adapter", model.use_adapter),
      BOOL_KEY("model.gate_bypass", model.gate_bypass),
      INT_KEY("model.decoder_layers", model.decoder_layers),
      INT_KEY("model.decoder_heads", model.decoder_heads),
      INT_KEY("model.ief_iterations", model.ief_iterations),
      DBL_KEY("model.cam_init", model.cam_init),
      INT_KEY("model.kqir_steps", model.kqir_steps),
      INT_KEY("model.kqir_dq", model.kqir_dq),
      INT_KEY("model.kqir_heads", model.kqir_heads),
      INT_KEY("model.kqir_hidden", model.kqir_hidden),
      BOOL_KEY("model.kqir_share", model.kqir_share),
      INT_KEY("model.vertex_count", model.vertex_count),
      DBL_KEY("model.deep_supervision", model.deep_supervision),
      DBL_KEY("loss.l2d", loss.l2d),
      DBL_KEY("loss.l3d", loss.l3d),
      DBL_KEY("loss.bone", loss.bone),
      DBL_KEY("loss.vert", loss.vert),
      DBL_KEY("loss.global_rot", loss.global_rot),
      DBL_KEY("loss.pose", loss.pose),
      DBL_KEY("loss.betas", loss.betas),
      DBL_KEY("loss.shape", loss.shape),
      DBL_KEY("loss.smooth_l1_delta", loss.smooth_l1_delta),
      DBL_KEY("optim.lr", optim.lr),
      DBL_KEY("optim.weight_decay", optim.weight_decay),
      DBL_KEY("optim.beta1", optim.beta1),
      DBL_KEY("optim.beta2", optim.beta2),
      INT_KEY("optim.batch", optim.batch),
      INT_KEY("optim.epochs", optim.epochs),
      INT_KEY("data.samples", data.samples),
      DBL_KEY("data.pose_noise", data.pose_noise),
      DBL_KEY("data.beta_noise", data.beta_noise),
      DBL_KEY("data.cam_scale_lo", data.cam_scale_lo),
      DBL_KEY("data.cam_scale_hi", data.cam_scale_hi),
      DBL_KEY("data.uv_noise", data.uv_noise),
      DBL_KEY("data.mask_corruption", data.mask_corruption),
      DBL_KEY("data.image_noise", data.image_noise),
  };
  return table;
}

#undef INT_KEY
#undef DBL_KEY
#undef BOOL_KEY
#undef STR_KEY

void require(bool cond, const std::string& what) {
  if (!cond) throw std::runtime_error("config: " + what);
}

}  // namespace

Config Config::parse_text(const std::string& text) {
  Config cfg;
  std::set<std::string> seen;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("config: line " + std::to_string(line_no) + " has no '='");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) {
      throw std::runtime_error("config: duplicate key '" + key + "'");
    }
    bool matched = false;
    for (const auto& def : key_table()) {
      if (key == def.name) {
        def.set(cfg, value);
        matched = true;
        break;
      }
    }
    if (!matched) throw std::runtime_error("config: unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

Config Config::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open '" + path + "'");
  std::ostringstream os;
  os << f.rdbuf();
  return parse_text(os.str());
}

std::string Config::to_text() const {
  std::ostringstream os;
  for (const auto& def : key_table()) os << def.name << " = " << def.get(*this) << "\n";
  return os.str();
}

void Config::save(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("config: cannot write '" + path + "'");
  f << to_text();
}

void Config::validate() const {
  require(model.image_h > 0 && model.image_w > 0, "image size must be positive");
  require(model.patch > 0, "patch must be positive");
  require(model.image_h % model.patch == 0 && model.image_w % model.patch == 0,
          "image size must be divisible by the patch size");
  require(model.dim > 0 && model.dim % model.heads == 0, "dim must be a positive multiple of heads");
  require(model.depth >= 0, "depth must be non-negative");
  require(model.mlp_ratio > 0, "mlp_ratio must be positive");
  require(model.fusion_after_block >= 0 && model.fusion_after_block <= model.depth,
          "fusion_after_block must lie in [0, depth]");
  require(model.geo_channels >= 1, "geo_channels must be positive");
  require(model.side_channels >= 1, "side_channels must be positive");
  require(model.adapter_depth >= 1, "adapter_depth must be positive");
  require(model.geo_h >= model.image_h / model.patch && model.geo_w >= model.image_w / model.patch,
          "geometry map must be at least the patch grid");
  require(model.geo_mode == "oracle" || model.geo_mode == "frozen_random",
          "geo_mode must be oracle or frozen_random");
  require(model.decoder_layers >= 1, "decoder_layers must be positive");
  require(model.dim % model.decoder_heads == 0, "dim must be divisible by decoder_heads");
  require(model.ief_iterations >= 0, "ief_iterations must be non-negative");
  require(model.kqir_steps >= 0, "kqir_steps must be non-negative");
  require(model.kqir_dq > 0 && model.kqir_dq % model.kqir_heads == 0,
          "kqir_dq must be a positive multiple of kqir_heads");
  require(model.kqir_hidden > 0, "kqir_hidden must be positive");
  require(model.vertex_count >= 68, "vertex_count too small for the tube template");
  require(model.deep_supervision >= 0.0, "deep_supervision must be non-negative");
  require(loss.smooth_l1_delta > 0.0, "smooth_l1_delta must be positive");
  require(optim.lr >= 0.0, "lr must be non-negative");
  require(optim.weight_decay >= 0.0, "weight_decay must be non-negative");
  require(optim.beta1 >= 0.0 && optim.beta1 < 1.0, "beta1 must lie in [0,1)");
  require(optim.beta2 >= 0.0 && optim.beta2 < 1.0, "beta2 must lie in [0,1)");
  require(optim.batch >= 1, "batch must be positive");
  require(optim.epochs >= 0, "epochs must be non-negative");
  require(data.samples >= 1, "samples must be positive");
  require(data.pose_noise >= 0.0 && data.beta_noise >= 0.0, "noise levels must be non-negative");
  require(data.cam_scale_lo > 0.0 && data.cam_scale_hi >= data.cam_scale_lo,
          "camera scale range must be positive and ordered");
  require(data.uv_noise >= 0.0 && data.image_noise >= 0.0, "noise levels must be non-negative");
  require(data.mask_corruption >= 0.0 && data.mask_corruption < 1.0,
          "mask_corruption must lie in [0,1)");
}

}  // namespace geohand
