#include "mflow/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace mflow {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string strip_comment(const std::string& line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') in_string = !in_string;
    if (line[i] == '#' && !in_string) return line.substr(0, i);
  }
  return line;
}

std::string qualified(const std::string& section, const std::string& key) {
  return section.empty() ? key : section + "." + key;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, res.ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

double parse_double(const std::string& key, const std::string& raw) {
  double v = 0.0;
  const auto res = std::from_chars(raw.data(), raw.data() + raw.size(), v);
  if (res.ec != std::errc() || res.ptr != raw.data() + raw.size()) {
    throw ConfigError("config: key '" + key + "' expects a number, got '" + raw + "'");
  }
  return v;
}

long long parse_int(const std::string& key, const std::string& raw) {
  long long v = 0;
  const auto res = std::from_chars(raw.data(), raw.data() + raw.size(), v);
  if (res.ec != std::errc() || res.ptr != raw.data() + raw.size()) {
    throw ConfigError("config: key '" + key + "' expects an integer, got '" + raw + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& raw) {
  if (raw == "true") return true;
  if (raw == "false") return false;
  throw ConfigError("config: key '" + key + "' expects true or false, got '" + raw + "'");
}

std::string parse_string(const std::string& key, const std::string& raw) {
  if (raw.size() < 2 || raw.front() != '"' || raw.back() != '"') {
    throw ConfigError("config: key '" + key + "' expects a quoted string, got '" + raw + "'");
  }
  return raw.substr(1, raw.size() - 2);
}

std::vector<int> parse_int_list(const std::string& key, const std::string& raw) {
  if (raw.size() < 2 || raw.front() != '[' || raw.back() != ']') {
    throw ConfigError("config: key '" + key + "' expects a list like [1, 2], got '" + raw + "'");
  }
  std::vector<int> out;
  std::stringstream ss(raw.substr(1, raw.size() - 2));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(static_cast<int>(parse_int(key, item)));
  }
  return out;
}

/// Two-way binding between a config key and a RunConfig field.
struct Field {
  std::string section;
  std::string key;
  std::function<void(RunConfig&, const std::string& qualified_key, const std::string& raw)> read;
  std::function<std::string(const RunConfig&)> write;
};

template <typename Get>
Field int_field(std::string section, std::string key, Get get) {
  return {section, key,
          [get](RunConfig& c, const std::string& k, const std::string& raw) { get(c) = static_cast<int>(parse_int(k, raw)); },
          [get](const RunConfig& c) { return std::to_string(get(const_cast<RunConfig&>(c))); }};
}

template <typename Get>
Field double_field(std::string section, std::string key, Get get) {
  return {section, key, [get](RunConfig& c, const std::string& k, const std::string& raw) { get(c) = parse_double(k, raw); },
          [get](const RunConfig& c) { return format_double(get(const_cast<RunConfig&>(c))); }};
}

template <typename Get>
Field bool_field(std::string section, std::string key, Get get) {
  return {section, key, [get](RunConfig& c, const std::string& k, const std::string& raw) { get(c) = parse_bool(k, raw); },
          [get](const RunConfig& c) { return std::string(get(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

template <typename Get>
Field string_field(std::string section, std::string key, Get get) {
  return {section, key, [get](RunConfig& c, const std::string& k, const std::string& raw) { get(c) = parse_string(k, raw); },
          [get](const RunConfig& c) { return "\"" + get(const_cast<RunConfig&>(c)) + "\""; }};
}

template <typename Enum>
Field enum_field(std::string section, std::string key, std::function<Enum&(RunConfig&)> get,
                 std::vector<std::pair<std::string, Enum>> names) {
  return {section, key,
          [get, names](RunConfig& c, const std::string& k, const std::string& raw) {
            const std::string s = parse_string(k, raw);
            for (const auto& [n, v] : names) {
              if (n == s) {
                get(c) = v;
                return;
              }
            }
            std::string allowed;
            for (const auto& [n, v] : names) allowed += (allowed.empty() ? "" : ", ") + n;
            throw ConfigError("config: key '" + k + "' must be one of {" + allowed + "}, got \"" + s + "\"");
          },
          [get, names](const RunConfig& c) {
            const Enum v = get(const_cast<RunConfig&>(c));
            for (const auto& [n, e] : names) {
              if (e == v) return "\"" + n + "\"";
            }
            return std::string("\"?\"");
          }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"", "seed",
                 [](RunConfig& c, const std::string& k, const std::string& raw) {
                   const long long v = parse_int(k, raw);
                   if (v < 0) throw ConfigError("config: key 'seed' must be >= 0");
                   c.seed = static_cast<std::uint64_t>(v);
                 },
                 [](const RunConfig& c) { return std::to_string(c.seed); }});

    f.push_back(string_field("dataset", "source", [](RunConfig& c) -> std::string& { return c.dataset.source; }));
    f.push_back(string_field("dataset", "path", [](RunConfig& c) -> std::string& { return c.dataset.path; }));
    f.push_back(string_field("dataset", "augmentation", [](RunConfig& c) -> std::string& { return c.dataset.augmentation; }));
    f.push_back(int_field("dataset", "count", [](RunConfig& c) -> int& { return c.dataset.count; }));
    f.push_back(int_field("dataset", "holdout", [](RunConfig& c) -> int& { return c.dataset.holdout; }));
    f.push_back(int_field("dataset", "side", [](RunConfig& c) -> int& { return c.dataset.side; }));

    f.push_back(int_field("model", "base_channels", [](RunConfig& c) -> int& { return c.model.base_channels; }));
    f.push_back({"model", "channel_mult",
                 [](RunConfig& c, const std::string& k, const std::string& raw) { c.model.channel_mult = parse_int_list(k, raw); },
                 [](const RunConfig& c) {
                   std::string s = "[";
                   for (std::size_t i = 0; i < c.model.channel_mult.size(); ++i) {
                     s += (i ? ", " : "") + std::to_string(c.model.channel_mult[i]);
                   }
                   return s + "]";
                 }});
    f.push_back(int_field("model", "stages", [](RunConfig& c) -> int& { return c.model.stages; }));
    f.push_back(int_field("model", "image_channels", [](RunConfig& c) -> int& { return c.model.image_channels; }));
    f.push_back(bool_field("model", "attention", [](RunConfig& c) -> bool& { return c.model.middle_attention; }));
    f.push_back(int_field("model", "middle_blocks", [](RunConfig& c) -> int& { return c.model.middle_blocks; }));
    f.push_back(int_field("model", "attention_heads", [](RunConfig& c) -> int& { return c.model.attention_heads; }));
    f.push_back(int_field("model", "norm_groups", [](RunConfig& c) -> int& { return c.model.norm_groups; }));
    f.push_back(enum_field<BlockType>("model", "block", [](RunConfig& c) -> BlockType& { return c.model.block; },
                                      {{"cde", BlockType::cde}, {"resnet", BlockType::resnet}}));
    f.push_back(double_field("model", "k", [](RunConfig& c) -> double& { return c.model.k; }));
    f.push_back(int_field("model", "window_radius", [](RunConfig& c) -> int& { return c.model.window_radius; }));
    f.push_back(enum_field<DistanceMode>("model", "distance_mode", [](RunConfig& c) -> DistanceMode& { return c.model.distance_mode; },
                                         {{"euclidean", DistanceMode::euclidean},
                                          {"hyperbolic", DistanceMode::hyperbolic_embedded}}));
    f.push_back(double_field("model", "metric_scale", [](RunConfig& c) -> double& { return c.model.metric_scale; }));
    f.push_back(double_field("model", "initial_scale", [](RunConfig& c) -> double& { return c.model.initial_scale; }));
    f.push_back(enum_field<ad::Padding>("model", "padding", [](RunConfig& c) -> ad::Padding& { return c.model.padding; },
                                        {{"zero", ad::Padding::zero}, {"periodic", ad::Padding::periodic}}));

    f.push_back(int_field("diffusion", "T", [](RunConfig& c) -> int& { return c.diffusion.T; }));
    f.push_back(double_field("diffusion", "beta_start", [](RunConfig& c) -> double& { return c.diffusion.beta_start; }));
    f.push_back(double_field("diffusion", "beta_end", [](RunConfig& c) -> double& { return c.diffusion.beta_end; }));

    f.push_back(double_field("optimizer", "lr", [](RunConfig& c) -> double& { return c.optimizer.lr; }));
    f.push_back(double_field("optimizer", "beta1", [](RunConfig& c) -> double& { return c.optimizer.beta1; }));
    f.push_back(double_field("optimizer", "beta2", [](RunConfig& c) -> double& { return c.optimizer.beta2; }));
    f.push_back(double_field("optimizer", "eps", [](RunConfig& c) -> double& { return c.optimizer.eps; }));
    f.push_back(double_field("optimizer", "ema_decay", [](RunConfig& c) -> double& { return c.optimizer.ema_decay; }));
    f.push_back(int_field("optimizer", "ema_interval", [](RunConfig& c) -> int& { return c.optimizer.ema_interval; }));
    f.push_back(bool_field("optimizer", "ema_warmup", [](RunConfig& c) -> bool& { return c.optimizer.ema_warmup; }));
    f.push_back(int_field("optimizer", "batch_size", [](RunConfig& c) -> int& { return c.optimizer.batch_size; }));
    f.push_back(int_field("optimizer", "iterations", [](RunConfig& c) -> int& { return c.optimizer.iterations; }));

    f.push_back(string_field("output", "dir", [](RunConfig& c) -> std::string& { return c.output.dir; }));
    f.push_back(int_field("output", "log_every", [](RunConfig& c) -> int& { return c.output.log_every; }));
    f.push_back(int_field("output", "sample_every", [](RunConfig& c) -> int& { return c.output.sample_every; }));
    f.push_back(int_field("output", "grid_count", [](RunConfig& c) -> int& { return c.output.grid_count; }));
    f.push_back(int_field("output", "grid_cols", [](RunConfig& c) -> int& { return c.output.grid_cols; }));
    f.push_back(int_field("output", "eval_every", [](RunConfig& c) -> int& { return c.output.eval_every; }));
    f.push_back(int_field("output", "eval_samples", [](RunConfig& c) -> int& { return c.output.eval_samples; }));
    f.push_back(int_field("output", "eval_batch", [](RunConfig& c) -> int& { return c.output.eval_batch; }));
    return f;
  }();
  return table;
}

}  // namespace

ConfigDocument parse_config_document(const std::string& text) {
  ConfigDocument doc;
  doc.sections[""];
  std::string section;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(strip_comment(line));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config: line " + std::to_string(lineno) + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError("config: line " + std::to_string(lineno) + ": empty section name");
      doc.sections[section];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config: line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) throw ConfigError("config: line " + std::to_string(lineno) + ": empty key or value");
    auto& sec = doc.sections[section];
    if (sec.count(key)) throw ConfigError("config: duplicate key '" + qualified(section, key) + "'");
    sec[key] = value;
  }
  return doc;
}

RunConfig default_config() { return RunConfig{}; }

RunConfig parse_config(const std::string& text) {
  const ConfigDocument doc = parse_config_document(text);
  RunConfig cfg = default_config();
  for (const auto& [section, entries] : doc.sections) {
    if (section == "checkpoint") continue;  // metadata written alongside the config in checkpoint headers
    bool known_section = section.empty();
    for (const auto& f : fields()) known_section = known_section || f.section == section;
    if (!known_section) throw ConfigError("config: unknown section [" + section + "]");
    for (const auto& [key, raw] : entries) {
      const Field* match = nullptr;
      for (const auto& f : fields()) {
        if (f.section == section && f.key == key) match = &f;
      }
      if (!match) throw ConfigError("config: unknown key '" + qualified(section, key) + "'");
      match->read(cfg, qualified(section, key), raw);
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string to_text(const RunConfig& cfg) {
  std::ostringstream os;
  std::string current = "\x01";
  for (const auto& f : fields()) {
    if (f.section != current) {
      if (!f.section.empty()) os << "\n[" << f.section << "]\n";
      current = f.section;
    }
    os << f.key << " = " << f.write(cfg) << '\n';
  }
  return os.str();
}

bool operator==(const RunConfig& a, const RunConfig& b) { return to_text(a) == to_text(b); }

void RunConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) { throw ConfigError("config: key '" + key + "' " + why); };
  if (dataset.source != "synthetic_shapes" && dataset.source != "idx_file" && dataset.source != "gaussian_toy") {
    fail("dataset.source", "must be one of {synthetic_shapes, idx_file, gaussian_toy}");
  }
  if (dataset.source == "idx_file" && dataset.path.empty()) fail("dataset.path", "is required for idx_file");
  if (dataset.augmentation != "none" && dataset.augmentation != "rotate") fail("dataset.augmentation", "must be none or rotate");
  if (dataset.count < 0) fail("dataset.count", "must be >= 0");
  if (dataset.holdout < 0) fail("dataset.holdout", "must be >= 0");
  if (dataset.side < 1) fail("dataset.side", "must be >= 1");
  if (dataset.source == "synthetic_shapes" && dataset.side < 8) fail("dataset.side", "must be >= 8 for synthetic_shapes");

  if (model.base_channels < 2 || model.base_channels % 2) fail("model.base_channels", "must be even and >= 2");
  if (model.stages < 0) fail("model.stages", "must be >= 0");
  if (static_cast<int>(model.channel_mult.size()) < model.stages) fail("model.channel_mult", "needs one entry per stage");
  for (int m : model.channel_mult) if (m < 1) fail("model.channel_mult", "entries must be >= 1");
  if (dataset.source != "idx_file" && dataset.side % (1 << model.stages) != 0) {
    fail("dataset.side", "must be divisible by 2^model.stages");
  }
  if (model.image_channels < 1) fail("model.image_channels", "must be >= 1");
  if (model.middle_blocks < 0) fail("model.middle_blocks", "must be >= 0");
  if (model.attention_heads < 1) fail("model.attention_heads", "must be >= 1");
  if (model.norm_groups < 1) fail("model.norm_groups", "must be >= 1");
  if (!(model.k > 1.0)) fail("model.k", "must be > 1");
  if (model.window_radius < 1) fail("model.window_radius", "must be >= 1");
  if (!(model.metric_scale > 0.0)) fail("model.metric_scale", "must be > 0");
  if (!(model.initial_scale > 0.0)) fail("model.initial_scale", "must be > 0");

  if (diffusion.T < 1) fail("diffusion.T", "must be >= 1");
  if (!(diffusion.beta_start > 0.0)) fail("diffusion.beta_start", "must be > 0");
  if (!(diffusion.beta_end >= diffusion.beta_start && diffusion.beta_end < 1.0)) {
    fail("diffusion.beta_end", "must satisfy beta_start <= beta_end < 1");
  }

  if (!(optimizer.lr > 0.0)) fail("optimizer.lr", "must be > 0");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0)) fail("optimizer.beta1", "must lie in [0, 1)");
  if (!(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) fail("optimizer.beta2", "must lie in [0, 1)");
  if (!(optimizer.eps > 0.0)) fail("optimizer.eps", "must be > 0");
  if (!(optimizer.ema_decay >= 0.0 && optimizer.ema_decay <= 1.0)) fail("optimizer.ema_decay", "must lie in [0, 1]");
  if (optimizer.ema_interval < 1) fail("optimizer.ema_interval", "must be >= 1");
  if (optimizer.batch_size < 1) fail("optimizer.batch_size", "must be >= 1");
  if (optimizer.iterations < 0) fail("optimizer.iterations", "must be >= 0");

  if (output.dir.empty()) fail("output.dir", "must not be empty");
  if (output.log_every < 1) fail("output.log_every", "must be >= 1");
  if (output.sample_every < 0) fail("output.sample_every", "must be >= 0");
  if (output.grid_count < 1) fail("output.grid_count", "must be >= 1");
  if (output.grid_cols < 1) fail("output.grid_cols", "must be >= 1");
  if (output.eval_every < 0) fail("output.eval_every", "must be >= 0");
  if (output.eval_samples < 2) fail("output.eval_samples", "must be >= 2");
  if (output.eval_batch < 1) fail("output.eval_batch", "must be >= 1");
  if (output.eval_every > 0 && dataset.holdout < 2) fail("dataset.holdout", "must be >= 2 when output.eval_every > 0");
}

}  // namespace mflow
