#include "bnnq/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "bnnq/errors.hpp"

namespace bnnq {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  }
}

long long to_int(const std::string& key, const std::string& v, long long lo) {
  long long n = 0;
  try {
    std::size_t used = 0;
    n = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects an integer, got '" + v + "'");
  }
  if (n < lo) throw ConfigError("'" + key + "' must be >= " + std::to_string(lo));
  return n;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    const unsigned long long n = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + v + "'");
}

/// "30:0.1,45:0.1"; empty means constant.
std::vector<std::pair<int, double>> parse_milestones(const std::string& key, const std::string& v) {
  std::vector<std::pair<int, double>> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("'" + key + "' entries are EPOCH:FACTOR, got '" + item + "'");
    const double f = to_double(key, item.substr(colon + 1));
    if (!(f > 0.0)) throw ConfigError("'" + key + "' factors must be positive");
    out.emplace_back(static_cast<int>(to_int(key, item.substr(0, colon), 0)), f);
  }
  return out;
}

std::string milestones_text(const std::vector<std::pair<int, double>>& ms) {
  std::string out;
  for (const auto& [e, f] : ms) {
    if (!out.empty()) out += ",";
    out += std::to_string(e) + ":" + fmt(f);
  }
  return out;
}

const std::vector<std::pair<std::string, SteKind>>& preset_stes() {
  static const std::vector<std::pair<std::string, SteKind>> v{
      {"ss", SteKind::swish_trainable(5.0)}, {"ss5", SteKind::swish(5.0)},   {"ss10", SteKind::swish(10.0)},
      {"htanh", SteKind::htanh()},           {"htanh3", SteKind::htanh_scaled(3.0)},
      {"tanh", SteKind::tanh()},             {"bireal", SteKind::bireal()}};
  return v;
}

const std::vector<std::pair<std::string, RegConfig>>& preset_regs() {
  static const std::vector<std::pair<std::string, RegConfig>> v{
      {"r1", {RegKind::R1, 5e-7, ScaleMode::TrainablePerFilter, {}}},
      {"r2", {RegKind::R2, 5e-7, ScaleMode::TrainablePerFilter, {}}},
      {"xnor", {RegKind::None, 0.0, ScaleMode::DynamicXnor, {}}},
      {"none", {RegKind::None, 0.0, ScaleMode::NoScale, {}}}};
  return v;
}

RunConfig conv4_base() {
  RunConfig c;
  c.train.topology = "conv4";
  c.train.epochs = 55;
  c.train.batch = 64;
  c.train.lr = LrSchedule(0.005, {{30, 0.1}, {45, 0.1}});
  c.train.augment = true;
  c.data.dataset = "cifar10";
  return c;
}

}  // namespace

std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const auto& [s, _] : preset_stes())
    for (const auto& [r, __] : preset_regs()) out.push_back("conv4-" + s + "-" + r);
  out.push_back("conv4-bnn");
  return out;
}

RunConfig preset_config(const std::string& name) {
  RunConfig c = conv4_base();
  c.preset = name;
  c.out_dir = "runs/" + name;
  if (name == "conv4-bnn") {
    c.train.ste = SteKind::htanh();
    c.train.reg = {RegKind::None, 0.0, ScaleMode::NoScale, {}};
    c.train.clip_latent = true;
    return c;
  }
  for (const auto& [s, ste] : preset_stes())
    for (const auto& [r, reg] : preset_regs())
      if (name == "conv4-" + s + "-" + r) {
        c.train.ste = ste;
        c.train.reg = reg;
        return c;
      }
  throw ConfigError("unknown preset '" + name + "' (see `bnnq presets`)");
}

std::vector<std::string> config_keys() {
  return {"preset",          "model.topology",   "model.ste",        "model.act_ste",   "model.binarize_activations",
          "reg.kind",        "reg.lambda",       "reg.scale_mode",   "train.epochs",    "train.batch",
          "train.seed",      "train.lr",         "train.milestones", "train.clip_latent", "train.augment",
          "data.dataset",    "data.dir",         "data.limit",       "data.test_limit", "data.synthetic_seed",
          "out.dir",         "out.checkpoint_every"};
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  TrainConfig& t = cfg.train;
  if (key == "preset") {
    const RunConfig p = preset_config(v);
    cfg = p;
  } else if (key == "model.topology") {
    named_topology(v);  // validates
    t.topology = v;
  } else if (key == "model.ste") {
    t.ste = SteKind::parse(v);
  } else if (key == "model.act_ste") {
    if (v.empty())
      t.act_ste.reset();
    else
      t.act_ste = SteKind::parse(v);
  } else if (key == "model.binarize_activations") {
    t.binarize_activations = to_bool(key, v);
  } else if (key == "reg.kind") {
    t.reg.kind = parse_reg_kind(v);
  } else if (key == "reg.lambda") {
    t.reg.lambda = to_double(key, v);
    if (!(t.reg.lambda >= 0.0)) throw ConfigError("reg.lambda must be >= 0");
  } else if (key == "reg.scale_mode") {
    t.reg.scale_mode = parse_scale_mode(v);
  } else if (key == "train.epochs") {
    t.epochs = static_cast<int>(to_int(key, v, 1));
  } else if (key == "train.batch") {
    t.batch = static_cast<Index>(to_int(key, v, 2));
  } else if (key == "train.seed") {
    t.seed = to_u64(key, v);
  } else if (key == "train.lr") {
    t.lr.base = to_double(key, v);
    t.lr.validate();
  } else if (key == "train.milestones") {
    t.lr.milestones = parse_milestones(key, v);
    t.lr.validate();
  } else if (key == "train.clip_latent") {
    t.clip_latent = to_bool(key, v);
  } else if (key == "train.augment") {
    t.augment = to_bool(key, v);
  } else if (key == "data.dataset") {
    if (v != "cifar10" && v != "mnist" && v != "synthetic")
      throw ConfigError("data.dataset must be cifar10, mnist or synthetic, got '" + v + "'");
    cfg.data.dataset = v;
  } else if (key == "data.dir") {
    cfg.data.dir = v;
  } else if (key == "data.limit") {
    cfg.data.limit = static_cast<Index>(to_int(key, v, 0));
  } else if (key == "data.test_limit") {
    cfg.data.test_limit = static_cast<Index>(to_int(key, v, 0));
  } else if (key == "data.synthetic_seed") {
    cfg.data.synthetic_seed = to_u64(key, v);
  } else if (key == "out.dir") {
    cfg.out_dir = v;
  } else if (key == "out.checkpoint_every") {
    cfg.checkpoint_every = static_cast<int>(to_int(key, v, 0));
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

RunConfig parse_config(const std::string& text, RunConfig base) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    entries.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  for (const auto& [k, v] : entries)
    if (k == "preset") apply_setting(base, k, v);
  for (const auto& [k, v] : entries)
    if (k != "preset") apply_setting(base, k, v);
  return base;
}

RunConfig load_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot read config file " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string train_config_text(const TrainConfig& t) {
  std::ostringstream o;
  o << "model.topology = " << t.topology << "\n";
  o << "model.ste = " << t.ste.name() << "\n";
  o << "model.act_ste = " << (t.act_ste ? t.act_ste->name() : std::string()) << "\n";
  o << "model.binarize_activations = " << (t.binarize_activations ? "true" : "false") << "\n";
  o << "reg.kind = " << to_string(t.reg.kind) << "\n";
  o << "reg.lambda = " << fmt(t.reg.lambda) << "\n";
  o << "reg.scale_mode = " << to_string(t.reg.scale_mode) << "\n";
  o << "train.epochs = " << t.epochs << "\n";
  o << "train.batch = " << t.batch << "\n";
  o << "train.seed = " << t.seed << "\n";
  o << "train.lr = " << fmt(t.lr.base) << "\n";
  o << "train.milestones = " << milestones_text(t.lr.milestones) << "\n";
  o << "train.clip_latent = " << (t.clip_latent ? "true" : "false") << "\n";
  o << "train.augment = " << (t.augment ? "true" : "false") << "\n";
  return o.str();
}

TrainConfig parse_train_config(const std::string& text) { return parse_config(text).train; }

std::string to_text(const RunConfig& cfg) {
  std::ostringstream o;
  if (!cfg.preset.empty()) o << "preset = " << cfg.preset << "\n";
  o << train_config_text(cfg.train);
  o << "data.dataset = " << cfg.data.dataset << "\n";
  o << "data.dir = " << cfg.data.dir.string() << "\n";
  o << "data.limit = " << cfg.data.limit << "\n";
  o << "data.test_limit = " << cfg.data.test_limit << "\n";
  o << "data.synthetic_seed = " << cfg.data.synthetic_seed << "\n";
  o << "out.dir = " << cfg.out_dir.string() << "\n";
  o << "out.checkpoint_every = " << cfg.checkpoint_every << "\n";
  return o.str();
}

std::filesystem::path cifar10_dir(const DataConfig& d) {
  if (!d.dir.empty()) return d.dir;
  if (const char* env = std::getenv("BNNQ_CIFAR10_DIR"); env && *env) return env;
  return {};
}

DatasetSplit load_dataset(const DataConfig& d) {
  DatasetSplit split;
  if (d.dataset == "synthetic") {
    SyntheticOptions o;
    o.seed = d.synthetic_seed;
    if (d.limit > 0) o.train = d.limit;
    if (d.test_limit > 0) o.test = d.test_limit;
    split = make_synthetic_cifar(o);
  } else if (d.dataset == "mnist") {
    if (d.dir.empty()) throw FormatError("MNIST needs data.dir pointing at the IDX files");
    split = load_mnist(d.dir);
  } else {
    const auto dir = cifar10_dir(d);
    if (dir.empty())
      throw FormatError("no CIFAR-10 directory: set data.dir (--data-dir) or BNNQ_CIFAR10_DIR");
    split = load_cifar10(dir);
  }
  if (d.limit > 0) split.train = split.train.head(d.limit);
  if (d.test_limit > 0) split.test = split.test.head(d.test_limit);
  return split;
}

}  // namespace bnnq
