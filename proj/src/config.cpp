#include "lara/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

namespace lara {

std::string query_mode_name(QueryMode m) {
  switch (m) {
    case QueryMode::kCoordsRadial: return "coords_radial";
    case QueryMode::kFourier: return "fourier";
    case QueryMode::kLearned: return "learned";
  }
  return "coords_radial";
}

QueryMode query_mode_from_name(const std::string& s) {
  if (s == "coords_radial") return QueryMode::kCoordsRadial;
  if (s == "fourier") return QueryMode::kFourier;
  if (s == "learned") return QueryMode::kLearned;
  throw ArgumentError("unknown query_mode \"" + s +
                      "\" (valid: coords_radial, fourier, learned)");
}

void LaRaConfig::validate() const {
  LARA_CHECK_ARG(cameras >= 1, "model.cameras must be >= 1");
  LARA_CHECK_ARG(stride >= 1 && (stride & (stride - 1)) == 0, "model.stride must be a power of 2");
  LARA_CHECK_ARG(image_h % stride == 0 && image_w % stride == 0,
                 "model.stride ", stride, " must divide image ", image_h, "x", image_w);
  LARA_CHECK_ARG(latent_count >= 1, "model.latent_count must be >= 1");
  LARA_CHECK_ARG(self_layers >= 0, "model.self_layers must be >= 0");
  LARA_CHECK_ARG(heads >= 1 && latent_dim % heads == 0,
                 "model.heads must divide model.latent_dim");
  LARA_CHECK_ARG(d_bev % heads == 0, "model.heads must divide model.d_bev");
  LARA_CHECK_ARG(bev_h % 8 == 0 && bev_w % 8 == 0,
                 "model.bev_h and model.bev_w must be divisible by 8 (BEV CNN 1:8 stage)");
  LARA_CHECK_ARG(bev_h >= 8 && bev_w >= 8, "BEV grid too small");
  LARA_CHECK_ARG(cell_meters > 0, "model.cell_meters must be positive");
  LARA_CHECK_ARG(fourier_bands >= 1, "model.fourier_bands must be >= 1");
  LARA_CHECK_ARG(fourier_max_freq >= 1.0, "model.fourier_max_freq must be >= 1");
  if (latent_count * 8 > token_count()) {
    std::cerr << "[lara] warning: latent_count " << latent_count
              << " is not small against token count " << token_count()
              << "; the bottleneck advantage degrades\n";
  }
}

void TrainConfig::validate() const {
  LARA_CHECK_ARG(lr > 0, "train.lr must be positive");
  LARA_CHECK_ARG(batch_size >= 1, "train.batch_size must be >= 1");
  LARA_CHECK_ARG(epochs >= 0 && steps >= 0, "train.epochs/steps must be non-negative");
  LARA_CHECK_ARG(eval_interval >= 1, "train.eval_interval must be >= 1");
}

namespace {

struct Field {
  enum Kind { kInt, kDouble, kBool, kString, kU64, kQueryMode } kind;
  std::function<void(AppConfig&, const std::string&)> set;
  std::function<std::string(const AppConfig&)> get;
};

int parse_int(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    int r = std::stoi(v, &pos);
    LARA_CHECK_ARG(pos == v.size(), "trailing characters");
    return r;
  } catch (const ArgumentError&) {
    throw;
  } catch (...) {
    throw ArgumentError("invalid integer \"" + v + "\" for " + key);
  }
}

uint64_t parse_u64(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    uint64_t r = std::stoull(v, &pos);
    LARA_CHECK_ARG(pos == v.size(), "trailing characters");
    return r;
  } catch (const ArgumentError&) {
    throw;
  } catch (...) {
    throw ArgumentError("invalid integer \"" + v + "\" for " + key);
  }
}

double parse_double(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    double r = std::stod(v, &pos);
    LARA_CHECK_ARG(pos == v.size(), "trailing characters");
    return r;
  } catch (const ArgumentError&) {
    throw;
  } catch (...) {
    throw ArgumentError("invalid float \"" + v + "\" for " + key);
  }
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ArgumentError("invalid bool \"" + v + "\" for " + key + " (use true/false)");
}

std::string unquote(const std::string& v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
  return v;
}

std::string fmt_double(double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof buf, v);  // shortest round-trip
  std::string s(buf, res.ptr);
  if (s.find('.') == std::string::npos && s.find('e') == std::string::npos &&
      s.find("inf") == std::string::npos && s.find("nan") == std::string::npos)
    s += ".0";
  return s;
}

#define INT_FIELD(key, member)                                                      \
  {key,                                                                             \
   {Field::kInt, [](AppConfig& c, const std::string& v) { c.member = parse_int(v, key); }, \
    [](const AppConfig& c) { return std::to_string(c.member); }}}
#define U64_FIELD(key, member)                                                      \
  {key,                                                                             \
   {Field::kU64, [](AppConfig& c, const std::string& v) { c.member = parse_u64(v, key); }, \
    [](const AppConfig& c) { return std::to_string(c.member); }}}
#define DBL_FIELD(key, member)                                                      \
  {key,                                                                             \
   {Field::kDouble,                                                                 \
    [](AppConfig& c, const std::string& v) { c.member = parse_double(v, key); },    \
    [](const AppConfig& c) { return fmt_double(c.member); }}}
#define BOOL_FIELD(key, member)                                                     \
  {key,                                                                             \
   {Field::kBool, [](AppConfig& c, const std::string& v) { c.member = parse_bool(v, key); }, \
    [](const AppConfig& c) { return c.member ? "true" : "false"; }}}
#define STR_FIELD(key, member)                                                      \
  {key,                                                                             \
   {Field::kString, [](AppConfig& c, const std::string& v) { c.member = unquote(v); }, \
    [](const AppConfig& c) { return "\"" + c.member + "\""; }}}

const std::map<std::string, Field>& field_table() {
  static const std::map<std::string, Field> table = {
      INT_FIELD("model.cameras", model.cameras),
      INT_FIELD("model.image_h", model.image_h),
      INT_FIELD("model.image_w", model.image_w),
      INT_FIELD("model.stride", model.stride),
      INT_FIELD("model.feat_channels", model.feat_channels),
      INT_FIELD("model.ray_dim", model.ray_dim),
      INT_FIELD("model.latent_count", model.latent_count),
      INT_FIELD("model.latent_dim", model.latent_dim),
      INT_FIELD("model.self_layers", model.self_layers),
      INT_FIELD("model.heads", model.heads),
      INT_FIELD("model.bev_h", model.bev_h),
      INT_FIELD("model.bev_w", model.bev_w),
      DBL_FIELD("model.cell_meters", model.cell_meters),
      INT_FIELD("model.d_bev", model.d_bev),
      {"model.query_mode",
       {Field::kQueryMode,
        [](AppConfig& c, const std::string& v) {
          c.model.query_mode = query_mode_from_name(unquote(v));
        },
        [](const AppConfig& c) { return "\"" + query_mode_name(c.model.query_mode) + "\""; }}},
      INT_FIELD("model.fourier_bands", model.fourier_bands),
      DBL_FIELD("model.fourier_max_freq", model.fourier_max_freq),
      BOOL_FIELD("model.normalize_rays", model.normalize_rays),
      DBL_FIELD("data.fov_deg", data.fov_deg),
      INT_FIELD("data.min_boxes", data.min_boxes),
      INT_FIELD("data.max_boxes", data.max_boxes),
      DBL_FIELD("data.camera_height", data.camera_height),
      DBL_FIELD("data.camera_offset", data.camera_offset),
      INT_FIELD("train.epochs", train.epochs),
      INT_FIELD("train.batch_size", train.batch_size),
      INT_FIELD("train.steps", train.steps),
      DBL_FIELD("train.lr", train.lr),
      DBL_FIELD("train.weight_decay", train.weight_decay),
      U64_FIELD("train.seed", train.seed),
      STR_FIELD("train.dataset", train.dataset),
      STR_FIELD("train.val_dataset", train.val_dataset),
      STR_FIELD("train.out_dir", train.out_dir),
      INT_FIELD("train.eval_interval", train.eval_interval),
  };
  return table;
}

std::string valid_keys_message() {
  std::string msg = "valid keys:";
  for (const auto& [k, f] : field_table()) {
    (void)f;
    msg += "\n  " + k;
  }
  return msg;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// Short sweep-axis spellings accepted as aliases.
std::string resolve_alias(const std::string& key) {
  if (key == "model.N") return "model.latent_count";
  if (key == "model.M") return "model.latent_dim";
  if (key == "model.L") return "model.self_layers";
  return key;
}

void set_key(AppConfig& cfg, const std::string& key, const std::string& value) {
  auto it = field_table().find(resolve_alias(key));
  if (it == field_table().end())
    throw ArgumentError("unknown config key \"" + key + "\"\n" + valid_keys_message());
  it->second.set(cfg, value);
}

}  // namespace

AppConfig parse_config_text(const std::string& text, const AppConfig& base) {
  AppConfig cfg = base;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    // strip comments outside quotes
    bool quoted = false;
    for (size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line = line.substr(0, i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      LARA_CHECK_ARG(line.back() == ']', "config line ", lineno, ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    size_t eq = line.find('=');
    LARA_CHECK_ARG(eq != std::string::npos, "config line ", lineno, ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (!section.empty()) key = section + "." + key;
    set_key(cfg, key, value);
  }
  return cfg;
}

AppConfig load_config(const std::string& path, const AppConfig& base) {
  std::ifstream f(path);
  LARA_CHECK_IO(f.good(), "cannot open config: ", path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_config_text(text, base);
}

void apply_override(AppConfig& cfg, const std::string& key_value) {
  size_t eq = key_value.find('=');
  LARA_CHECK_ARG(eq != std::string::npos, "override must look like key=value, got \"", key_value,
                 "\"");
  set_key(cfg, trim(key_value.substr(0, eq)), trim(key_value.substr(eq + 1)));
}

std::string config_to_toml(const AppConfig& cfg) {
  std::ostringstream os;
  std::string current_section;
  for (const auto& [key, field] : field_table()) {
    size_t dot = key.find('.');
    std::string section = key.substr(0, dot);
    if (section != current_section) {
      if (!current_section.empty()) os << "\n";
      os << "[" << section << "]\n";
      current_section = section;
    }
    os << key.substr(dot + 1) << " = " << field.get(cfg) << "\n";
  }
  return os.str();
}

}  // namespace lara
