#include "ecm/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace ecm {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, b - a + 1);
}

int parse_int(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const int v = std::stoi(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("bad integer for " + key + ": " + value);
  }
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("bad number for " + key + ": " + value);
  }
}

uint64_t parse_u64(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const unsigned long long v = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return static_cast<uint64_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("bad unsigned integer for " + key + ": " + value);
  }
}

std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
  std::vector<int> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ConfigError("empty list item for " + key);
    out.push_back(parse_int(key, item));
  }
  if (out.empty()) throw ConfigError("empty list for " + key);
  return out;
}

}  // namespace

void RunConfig::validate() const {
  if (model.depth < 1 || model.dim < 1 || model.heads < 1 || model.vocab < 2 ||
      model.num_classes < 1)
    throw ConfigError("model dimensions must be positive (vocab >= 2)");
  if (model.dim % model.heads != 0) throw ConfigError("model.dim must be divisible by model.heads");
  try {
    ScaleSchedule check(model.schedule.sides);  // constructor enforces the invariants
    (void)check;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("model.schedule: ") + e.what());
  }
  if (anchors.empty()) throw ConfigError("adapter.anchors must be non-empty");
  for (size_t i = 0; i < anchors.size(); ++i) {
    if (anchors[i] < 1 || anchors[i] > model.depth)
      throw ConfigError("adapter.anchors entries must be in [1, model.depth]");
    if (i > 0 && anchors[i] <= anchors[i - 1])
      throw ConfigError("adapter.anchors must be strictly increasing");
  }
  if (ffn_groups < 1 || ffn_groups > static_cast<int>(anchors.size()))
    throw ConfigError("adapter.ffn_groups must be in [1, #anchors]");
  if (ffn_ratio < 1) throw ConfigError("adapter.ffn_ratio must be positive");
  if (!(gate.stddev > 0.0)) throw ConfigError("adapter.gate_std must be > 0");
  try {
    train.validate();
    sampler.validate(model.vocab);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (!(train.alpha >= 0.0)) throw ConfigError("train.alpha must be >= 0");
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::stringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError("line " + std::to_string(line_no) + ": empty key or value");

    if (key == "model.depth") cfg.model.depth = parse_int(key, value);
    else if (key == "model.dim") cfg.model.dim = parse_int(key, value);
    else if (key == "model.heads") cfg.model.heads = parse_int(key, value);
    else if (key == "model.vocab") cfg.model.vocab = parse_int(key, value);
    else if (key == "model.classes") cfg.model.num_classes = parse_int(key, value);
    else if (key == "model.schedule") {
      try {
        cfg.model.schedule = ScaleSchedule{parse_int_list(key, value)};
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        throw ConfigError("line " + std::to_string(line_no) + ": model.schedule: " + e.what());
      }
    }
    else if (key == "adapter.anchors") cfg.anchors = parse_int_list(key, value);
    else if (key == "adapter.ffn_groups") cfg.ffn_groups = parse_int(key, value);
    else if (key == "adapter.ffn_ratio") cfg.ffn_ratio = parse_int(key, value);
    else if (key == "adapter.gate_mean") cfg.gate.mean = parse_double(key, value);
    else if (key == "adapter.gate_std") cfg.gate.stddev = parse_double(key, value);
    else if (key == "train.alpha") cfg.train.alpha = parse_double(key, value);
    else if (key == "train.lr") cfg.train.lr = parse_double(key, value);
    else if (key == "train.epochs") cfg.train.epochs = parse_int(key, value);
    else if (key == "train.batch") cfg.train.batch = parse_int(key, value);
    else if (key == "train.cfg_dropout") cfg.train.cfg_dropout = parse_double(key, value);
    else if (key == "infer.top_k") cfg.sampler.top_k = parse_int(key, value);
    else if (key == "infer.top_p") cfg.sampler.top_p = parse_double(key, value);
    else if (key == "infer.t_high") cfg.sampler.t_high = parse_double(key, value);
    else if (key == "infer.t_low") cfg.sampler.t_low = parse_double(key, value);
    else if (key == "infer.cfg") cfg.sampler.cfg_strength = parse_double(key, value);
    else if (key == "seed") cfg.seed = parse_u64(key, value);
    else throw ConfigError("line " + std::to_string(line_no) + ": unknown key " + key);
  }
  cfg.sampler.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

}  // namespace ecm
