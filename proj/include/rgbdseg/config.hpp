#pragma once

// Flat `key = value` run configuration. One file drives model assembly, data
// synthesis, and training; a field registry keeps parsing, serialization, and
// CLI overrides in sync. Unknown keys are rejected so typos fail loudly.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "rgbdseg/attention.hpp"
#include "rgbdseg/errors.hpp"
#include "rgbdseg/fusion.hpp"
#include "rgbdseg/posenc.hpp"
#include "rgbdseg/synth.hpp"

namespace rgbdseg {

enum class BranchMode { rgb_only, depth_only, dual };

inline const char* to_string(BranchMode m) {
  switch (m) {
    case BranchMode::rgb_only: return "rgb_only";
    case BranchMode::depth_only: return "depth_only";
    case BranchMode::dual: return "dual";
  }
  throw std::invalid_argument("unknown branch mode");
}

inline BranchMode parse_branch_mode(std::string_view s) {
  if (s == "rgb_only") return BranchMode::rgb_only;
  if (s == "depth_only") return BranchMode::depth_only;
  if (s == "dual") return BranchMode::dual;
  throw std::invalid_argument("branches must be rgb_only|depth_only|dual, got '" +
                              std::string(s) + "'");
}

struct RunConfig {
  // Model.
  int image_side = 64;
  int patch_size = 4;
  std::vector<int> stage_channels{32, 64};
  std::vector<int> stage_blocks{2, 2};
  std::vector<int> stage_heads{1, 2};
  int num_classes = 4;
  PeMode pe_mode = PeMode::three_d;
  SwapMode swap_mode = SwapMode::cross_k;
  FusionKind fusion = FusionKind::attention_mix;
  BranchMode branches = BranchMode::dual;
  double pe_scale = 512.0;
  double pe_dscale = 0.0;  // 0 = auto: the training split's maximum disparity
  int decoder_dim = 64;
  int mlp_ratio = 4;

  // Scene.
  std::uint64_t scene_seed = 7;
  int height = 64;
  int width = 64;
  int objects_min = 3;
  int objects_max = 6;
  int depth_planes = 4;
  bool color_ambiguity = true;
  double disp_noise = 0.05;
  double disp_dropout = 0.02;
  std::int64_t train_count = 512;
  std::int64_t val_count = 128;

  // Training.
  std::int64_t steps = 2000;
  int batch_size = 4;
  double lr = 6e-4;
  double weight_decay = 0.01;
  std::int64_t log_every = 50;
  std::int64_t eval_every = 250;
  std::uint64_t seed = 1;
  bool augment_flip = true;

  SceneSpec scene_spec() const {
    SceneSpec s;
    s.seed = scene_seed;
    s.height = height;
    s.width = width;
    s.num_classes = num_classes;
    s.objects_min = objects_min;
    s.objects_max = objects_max;
    s.depth_planes = depth_planes;
    s.color_ambiguity = color_ambiguity;
    s.disp_noise = disp_noise;
    s.disp_dropout = disp_dropout;
    return s;
  }

  void validate() const {
    scene_spec().validate();
    if (pe_scale <= 1.0) throw std::invalid_argument("config: pe_scale must exceed 1");
    if (pe_dscale < 0.0) throw std::invalid_argument("config: pe_dscale must be positive or auto");
    if (decoder_dim < 1) throw std::invalid_argument("config: decoder_dim must be positive");
    if (mlp_ratio < 1) throw std::invalid_argument("config: mlp_ratio must be positive");
    if (train_count < 1 || val_count < 0) throw std::invalid_argument("config: bad sample counts");
    if (steps < 0) throw std::invalid_argument("config: steps must be non-negative");
    if (batch_size < 1) throw std::invalid_argument("config: batch_size must be positive");
    if (!(lr > 0.0)) throw std::invalid_argument("config: lr must be positive");
    if (weight_decay < 0.0) throw std::invalid_argument("config: weight_decay must be non-negative");
    if (log_every < 1 || eval_every < 1)
      throw std::invalid_argument("config: log/eval intervals must be positive");
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string format_int_list(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

template <typename T>
T parse_number(const std::string& key, std::string_view text) {
  T value{};
  const char* begin = text.data();
  const char* end = begin + text.size();
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end)
    throw std::invalid_argument("config: bad value '" + std::string(text) + "' for key " + key);
  return value;
}

// libstdc++ from_chars handles doubles, but routing through strtod keeps the
// same error contract for values like "6e-4".
template <>
inline double parse_number<double>(const std::string& key, std::string_view text) {
  const std::string s(text);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || s.empty())
    throw std::invalid_argument("config: bad value '" + s + "' for key " + key);
  return v;
}

inline bool parse_bool(const std::string& key, std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw std::invalid_argument("config: bad boolean '" + std::string(text) + "' for key " + key);
}

inline std::vector<int> parse_int_list(const std::string& key, std::string_view text) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    const auto piece = trim(text.substr(pos, comma == std::string_view::npos ? text.size() - pos
                                                                             : comma - pos));
    if (piece.empty())
      throw std::invalid_argument("config: empty element in list for key " + key);
    out.push_back(parse_number<int>(key, piece));
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  if (out.empty()) throw std::invalid_argument("config: empty list for key " + key);
  return out;
}

struct ConfigField {
  const char* name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline const std::vector<ConfigField>& config_fields() {
  auto int_field = [](const char* name, int RunConfig::* member) {
    return ConfigField{name, [member](const RunConfig& c) { return std::to_string(c.*member); },
                       [name, member](RunConfig& c, const std::string& v) {
                         c.*member = parse_number<int>(name, v);
                       }};
  };
  auto i64_field = [](const char* name, std::int64_t RunConfig::* member) {
    return ConfigField{name, [member](const RunConfig& c) { return std::to_string(c.*member); },
                       [name, member](RunConfig& c, const std::string& v) {
                         c.*member = parse_number<std::int64_t>(name, v);
                       }};
  };
  auto u64_field = [](const char* name, std::uint64_t RunConfig::* member) {
    return ConfigField{name, [member](const RunConfig& c) { return std::to_string(c.*member); },
                       [name, member](RunConfig& c, const std::string& v) {
                         c.*member = parse_number<std::uint64_t>(name, v);
                       }};
  };
  auto dbl_field = [](const char* name, double RunConfig::* member) {
    return ConfigField{name, [member](const RunConfig& c) { return format_double(c.*member); },
                       [name, member](RunConfig& c, const std::string& v) {
                         c.*member = parse_number<double>(name, v);
                       }};
  };
  auto bool_field = [](const char* name, bool RunConfig::* member) {
    return ConfigField{name,
                       [member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); },
                       [name, member](RunConfig& c, const std::string& v) {
                         c.*member = parse_bool(name, v);
                       }};
  };
  auto list_field = [](const char* name, std::vector<int> RunConfig::* member) {
    return ConfigField{name, [member](const RunConfig& c) { return format_int_list(c.*member); },
                       [name, member](RunConfig& c, const std::string& v) {
                         c.*member = parse_int_list(name, v);
                       }};
  };

  static const std::vector<ConfigField> fields = {
      int_field("image_side", &RunConfig::image_side),
      int_field("patch_size", &RunConfig::patch_size),
      list_field("stage_channels", &RunConfig::stage_channels),
      list_field("stage_blocks", &RunConfig::stage_blocks),
      list_field("stage_heads", &RunConfig::stage_heads),
      int_field("num_classes", &RunConfig::num_classes),
      {"pe_mode", [](const RunConfig& c) { return std::string(to_string(c.pe_mode)); },
       [](RunConfig& c, const std::string& v) { c.pe_mode = parse_pe_mode(v); }},
      {"swap_mode", [](const RunConfig& c) { return std::string(to_string(c.swap_mode)); },
       [](RunConfig& c, const std::string& v) { c.swap_mode = parse_swap_mode(v); }},
      {"fusion", [](const RunConfig& c) { return std::string(to_string(c.fusion)); },
       [](RunConfig& c, const std::string& v) { c.fusion = parse_fusion_kind(v); }},
      {"branches", [](const RunConfig& c) { return std::string(to_string(c.branches)); },
       [](RunConfig& c, const std::string& v) { c.branches = parse_branch_mode(v); }},
      dbl_field("pe_scale", &RunConfig::pe_scale),
      {"pe_dscale",
       [](const RunConfig& c) {
         return c.pe_dscale == 0.0 ? std::string("auto") : format_double(c.pe_dscale);
       },
       [](RunConfig& c, const std::string& v) {
         if (v == "auto") {
           c.pe_dscale = 0.0;
           return;
         }
         const double d = parse_number<double>("pe_dscale", v);
         if (d <= 0.0) throw std::invalid_argument("config: pe_dscale must be positive or auto");
         c.pe_dscale = d;
       }},
      int_field("decoder_dim", &RunConfig::decoder_dim),
      int_field("mlp_ratio", &RunConfig::mlp_ratio),
      u64_field("scene_seed", &RunConfig::scene_seed),
      int_field("height", &RunConfig::height),
      int_field("width", &RunConfig::width),
      int_field("objects_min", &RunConfig::objects_min),
      int_field("objects_max", &RunConfig::objects_max),
      int_field("depth_planes", &RunConfig::depth_planes),
      bool_field("color_ambiguity", &RunConfig::color_ambiguity),
      dbl_field("disp_noise", &RunConfig::disp_noise),
      dbl_field("disp_dropout", &RunConfig::disp_dropout),
      i64_field("train_count", &RunConfig::train_count),
      i64_field("val_count", &RunConfig::val_count),
      i64_field("steps", &RunConfig::steps),
      int_field("batch_size", &RunConfig::batch_size),
      dbl_field("lr", &RunConfig::lr),
      dbl_field("weight_decay", &RunConfig::weight_decay),
      i64_field("log_every", &RunConfig::log_every),
      i64_field("eval_every", &RunConfig::eval_every),
      u64_field("seed", &RunConfig::seed),
      bool_field("augment_flip", &RunConfig::augment_flip),
  };
  return fields;
}

inline const ConfigField& find_field(const std::string& key) {
  for (const auto& f : config_fields())
    if (key == f.name) return f;
  throw std::invalid_argument("config: unknown key '" + key + "'");
}

}  // namespace detail

inline void apply_config_line(RunConfig& cfg, const std::string& key, const std::string& value) {
  detail::find_field(key).set(cfg, value);
}

// Accepts `key = value` lines, blank lines, and full-line `#` comments.
inline RunConfig parse_run_config(std::istream& in, RunConfig base = {}) {
  std::string line;
  std::vector<std::string> seen;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                  " is not of the form key = value");
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
    if (key.empty() || value.empty())
      throw std::invalid_argument("config: empty key or value at line " + std::to_string(lineno));
    for (const auto& s : seen)
      if (s == key) throw std::invalid_argument("config: duplicate key '" + key + "'");
    seen.push_back(key);
    apply_config_line(base, key, value);
  }
  return base;
}

inline RunConfig parse_run_config_text(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  return parse_run_config(in, std::move(base));
}

inline RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path.string());
  try {
    return parse_run_config(in, std::move(base));
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

inline std::string serialize_run_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : detail::config_fields()) {
    out += f.name;
    out += " = ";
    out += f.get(cfg);
    out += "\n";
  }
  return out;
}

inline void save_run_config(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write config file: " + path.string());
  out << serialize_run_config(cfg);
  if (!out) throw IoError("failed writing config file: " + path.string());
}

}  // namespace rgbdseg
