#include "bitr/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "bitr/binary_io.hpp"

namespace bitr {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": '" + value + "' is not a valid number");
  return out;
}

Index parse_count(const std::string& key, const std::string& value, Index min) {
  const auto v = parse_number<Index>(key, value);
  if (v < min) throw ConfigError(key + ": must be at least " + std::to_string(min));
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError(key + ": '" + value + "' is not a boolean");
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;
using Getter = std::function<std::string(const RunConfig&)>;

struct Key {
  Setter set;
  Getter get;
};

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

template <class Field>
Key count_key(Field field, Index min) {
  return {[field, min](RunConfig& c, const std::string& k, const std::string& v) { field(c) = parse_count(k, v, min); },
          [field](RunConfig c) { return std::to_string(field(c)); }};
}

template <class Field>
Key real_key(Field field) {
  return {[field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = parse_number<double>(k, v); },
          [field](RunConfig c) { return fmt(field(c)); }};
}

template <class Field>
Key bool_key(Field field) {
  return {[field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = parse_bool(k, v); },
          [field](RunConfig c) { return std::string(field(c) ? "true" : "false"); }};
}

Key threshold_key(int external) {
  const auto cls = static_cast<std::size_t>(internal_label(external));
  return {[cls](RunConfig& c, const std::string& k, const std::string& v) {
            c.postproc.thresholds[cls] = parse_count(k, v, 0);
          },
          [cls](const RunConfig& c) { return std::to_string(c.postproc.thresholds[cls]); }};
}

const std::map<std::string, Key>& keys() {
  static const std::map<std::string, Key> table{
      {"model.in_channels", count_key([](RunConfig& c) -> Index& { return c.model.in_channels; }, 1)},
      {"model.base_width", count_key([](RunConfig& c) -> Index& { return c.model.base_width; }, 1)},
      {"model.num_classes", count_key([](RunConfig& c) -> Index& { return c.model.num_classes; }, 2)},
      {"model.embed_dim", count_key([](RunConfig& c) -> Index& { return c.model.embed_dim; }, 1)},
      {"model.vit_layers", count_key([](RunConfig& c) -> Index& { return c.model.vit_layers; }, 0)},
      {"model.heads", count_key([](RunConfig& c) -> Index& { return c.model.heads; }, 1)},
      {"model.ffn_hidden", count_key([](RunConfig& c) -> Index& { return c.model.ffn_hidden; }, 0)},
      {"model.cbam_reduction", count_key([](RunConfig& c) -> Index& { return c.model.cbam_reduction; }, 1)},
      {"model.max_norm_groups", count_key([](RunConfig& c) -> Index& { return c.model.max_norm_groups; }, 1)},
      {"model.input_size",
       {[](RunConfig& c, const std::string& k, const std::string& v) {
          const auto items = split_list(v);
          if (items.size() == 1) {
            const auto n = parse_count(k, items[0], 16);
            c.model.input_size = {n, n, n};
          } else if (items.size() == 3) {
            for (std::size_t i = 0; i < 3; ++i) c.model.input_size[i] = parse_count(k, items[i], 16);
          } else {
            throw ConfigError(k + ": expected one size or x,y,z");
          }
        },
        [](const RunConfig& c) {
          const auto& s = c.model.input_size;
          return std::to_string(s[0]) + "," + std::to_string(s[1]) + "," + std::to_string(s[2]);
        }}},
      {"train.epochs", count_key([](RunConfig& c) -> Index& { return c.train.epochs; }, 0)},
      {"train.batch_size", count_key([](RunConfig& c) -> Index& { return c.train.batch_size; }, 1)},
      {"train.accumulation", count_key([](RunConfig& c) -> Index& { return c.train.accumulation; }, 1)},
      {"train.checkpoint_every", count_key([](RunConfig& c) -> Index& { return c.train.checkpoint_every; }, 0)},
      {"train.base_lr", real_key([](RunConfig& c) -> double& { return c.train.base_lr; })},
      {"train.lr_power", real_key([](RunConfig& c) -> double& { return c.train.lr_power; })},
      {"train.augment", bool_key([](RunConfig& c) -> bool& { return c.train.augment; })},
      {"train.intensity", bool_key([](RunConfig& c) -> bool& { return c.train.augmentation.intensity; })},
      {"train.intensity_shift", real_key([](RunConfig& c) -> double& { return c.train.augmentation.shift; })},
      {"train.intensity_scale", real_key([](RunConfig& c) -> double& { return c.train.augmentation.scale; })},
      {"train.ce_weight", real_key([](RunConfig& c) -> double& { return c.train.loss.ce_weight; })},
      {"train.dice_weight", real_key([](RunConfig& c) -> double& { return c.train.loss.dice_weight; })},
      {"train.dice_smooth", real_key([](RunConfig& c) -> double& { return c.train.loss.smooth; })},
      {"train.dice_present_only", bool_key([](RunConfig& c) -> bool& { return c.train.loss.present_classes_only; })},
      {"train.seed",
       {[](RunConfig& c, const std::string& k, const std::string& v) { c.train.seed = parse_number<std::uint64_t>(k, v); },
        [](const RunConfig& c) { return std::to_string(c.train.seed); }}},
      {"postproc.threshold.1", threshold_key(1)},
      {"postproc.threshold.2", threshold_key(2)},
      {"postproc.threshold.4", threshold_key(4)},
      {"postproc.strategy",
       {[](RunConfig& c, const std::string&, const std::string& v) { c.postproc.strategy = parse_strategy(v); },
        [](const RunConfig& c) { return to_string(c.postproc.strategy); }}},
      {"postproc.scope",
       {[](RunConfig& c, const std::string&, const std::string& v) { c.postproc.scope = parse_scope(v); },
        [](const RunConfig& c) { return to_string(c.postproc.scope); }}},
      {"postproc.fallback",
       {[](RunConfig& c, const std::string& k, const std::string& v) {
          c.postproc.fallback = internal_label(parse_number<int>(k, v));
        },
        [](const RunConfig& c) { return std::to_string(external_label(c.postproc.fallback)); }}},
  };
  return table;
}

}  // namespace

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto it = keys().find(key);
  if (it == keys().end()) throw ConfigError("unknown key '" + key + "'");
  try {
    it->second.set(cfg, key, value);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

RunConfig parse_config(std::istream& in, const std::string& source) {
  RunConfig cfg;
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(source + ":" + std::to_string(n) + ": expected key = value");
    try {
      apply_setting(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  try {
    cfg.model.validate();
    cfg.train.loss.validate();
    cfg.postproc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("file not found: " + path.string());
  return parse_config(in, path.string());
}

std::string describe(const RunConfig& cfg) {
  std::string out;
  for (const auto& [name, key] : keys()) out += name + " = " + key.get(cfg) + "\n";
  return out;
}

}  // namespace bitr
