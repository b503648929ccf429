#include "glorank/config.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace glorank {

namespace {

// strict merge of user json into defaults: unknown keys and type mismatches
// are collected as violations
void merge_strict(json& base, const json& user, const std::string& prefix,
                  std::vector<std::string>& errors) {
  for (const auto& [key, val] : user.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) {
      errors.push_back("unknown key: " + path);
      continue;
    }
    json& slot = base[key];
    if (slot.is_object()) {
      if (!val.is_object()) {
        errors.push_back("expected object at " + path);
        continue;
      }
      merge_strict(slot, val, path, errors);
    } else {
      if (slot.is_number() && val.is_number()) {
        slot = val;
      } else if (slot.type() == val.type()) {
        slot = val;
      } else if (slot.is_boolean() && val.is_boolean()) {
        slot = val;
      } else {
        errors.push_back("type mismatch at " + path + ": expected " +
                         std::string(slot.type_name()) + ", got " +
                         std::string(val.type_name()));
      }
    }
  }
}

}  // namespace

json ExperimentConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["determinism"] = determinism;
  j["data"] = {{"n_items", data.n_items},
               {"n_users", data.n_users},
               {"dim", data.dim},
               {"n_clusters", data.n_clusters},
               {"items_path", data.items_path},
               {"interactions_path", data.interactions_path},
               {"n_candidates", data.n_candidates},
               {"k", data.k},
               {"history_cap", data.history_cap},
               {"train_fraction", data.train_fraction}};
  j["tokenizer"] = {{"m_levels", tokenizer.m_levels},
                    {"codebook_size", tokenizer.codebook_size},
                    {"kmeans_iters", tokenizer.kmeans_iters}};
  j["model"] = {{"d_model", model.d_model},
                {"n_heads", model.n_heads},
                {"n_enc_layers", model.n_enc_layers},
                {"n_dec_layers", model.n_dec_layers},
                {"d_ff", model.d_ff},
                {"dropout", model.dropout},
                {"positional", model.positional},
                {"tie_output", model.tie_output}};
  j["pretrain"] = {{"num_sampled_lists", pretrain.num_sampled_lists},
                   {"scorer", pretrain.scorer},
                   {"epochs", pretrain.epochs},
                   {"lr", pretrain.lr},
                   {"weight_decay", pretrain.weight_decay},
                   {"max_requests", pretrain.max_requests},
                   {"reshuffle_candidates", pretrain.reshuffle_candidates}};
  j["posttrain"] = {{"group_size", posttrain.group_size},
                    {"temperature", posttrain.temperature},
                    {"beta", posttrain.beta},
                    {"clip", posttrain.clip},
                    {"steps", posttrain.steps},
                    {"lr", posttrain.lr},
                    {"weight_decay", posttrain.weight_decay},
                    {"batch_requests", posttrain.batch_requests},
                    {"eval_every", posttrain.eval_every},
                    {"max_requests", posttrain.max_requests}};
  j["decode"] = {{"beam_size", decode.beam_size}};
  j["coldstart"] = {{"fraction", coldstart.fraction}};
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& user) {
  ExperimentConfig defaults;
  json merged = defaults.to_json();
  std::vector<std::string> errors;
  if (!user.is_object()) {
    throw ConfigError("config must be a JSON object");
  }
  merge_strict(merged, user, "", errors);

  ExperimentConfig c;
  c.seed = merged["seed"].get<std::uint64_t>();
  c.determinism = merged["determinism"].get<bool>();
  const json& d = merged["data"];
  c.data.n_items = d["n_items"].get<int>();
  c.data.n_users = d["n_users"].get<int>();
  c.data.dim = d["dim"].get<int>();
  c.data.n_clusters = d["n_clusters"].get<int>();
  c.data.items_path = d["items_path"].get<std::string>();
  c.data.interactions_path = d["interactions_path"].get<std::string>();
  c.data.n_candidates = d["n_candidates"].get<int>();
  c.data.k = d["k"].get<int>();
  c.data.history_cap = d["history_cap"].get<int>();
  c.data.train_fraction = d["train_fraction"].get<double>();
  const json& t = merged["tokenizer"];
  c.tokenizer.m_levels = t["m_levels"].get<int>();
  c.tokenizer.codebook_size = t["codebook_size"].get<int>();
  c.tokenizer.kmeans_iters = t["kmeans_iters"].get<int>();
  const json& m = merged["model"];
  c.model.d_model = m["d_model"].get<int>();
  c.model.n_heads = m["n_heads"].get<int>();
  c.model.n_enc_layers = m["n_enc_layers"].get<int>();
  c.model.n_dec_layers = m["n_dec_layers"].get<int>();
  c.model.d_ff = m["d_ff"].get<int>();
  c.model.dropout = m["dropout"].get<double>();
  c.model.positional = m["positional"].get<std::string>();
  c.model.tie_output = m["tie_output"].get<bool>();
  const json& pre = merged["pretrain"];
  c.pretrain.num_sampled_lists = pre["num_sampled_lists"].get<int>();
  c.pretrain.scorer = pre["scorer"].get<std::string>();
  c.pretrain.epochs = pre["epochs"].get<int>();
  c.pretrain.lr = pre["lr"].get<double>();
  c.pretrain.weight_decay = pre["weight_decay"].get<double>();
  c.pretrain.max_requests = pre["max_requests"].get<int>();
  c.pretrain.reshuffle_candidates = pre["reshuffle_candidates"].get<bool>();
  const json& post = merged["posttrain"];
  c.posttrain.group_size = post["group_size"].get<int>();
  c.posttrain.temperature = post["temperature"].get<double>();
  c.posttrain.beta = post["beta"].get<double>();
  c.posttrain.clip = post["clip"].get<double>();
  c.posttrain.steps = post["steps"].get<int>();
  c.posttrain.lr = post["lr"].get<double>();
  c.posttrain.weight_decay = post["weight_decay"].get<double>();
  c.posttrain.batch_requests = post["batch_requests"].get<int>();
  c.posttrain.eval_every = post["eval_every"].get<int>();
  c.posttrain.max_requests = post["max_requests"].get<int>();
  c.decode.beam_size = merged["decode"]["beam_size"].get<int>();
  c.coldstart.fraction = merged["coldstart"]["fraction"].get<double>();

  // semantic validation, all violations reported together
  if (c.data.n_items < 1) errors.push_back("data.n_items must be >= 1");
  if (c.data.n_users < 1) errors.push_back("data.n_users must be >= 1");
  if (c.data.dim < 1) errors.push_back("data.dim must be >= 1");
  if (c.data.n_clusters < 1) errors.push_back("data.n_clusters must be >= 1");
  if (c.data.k < 1) errors.push_back("data.k must be >= 1");
  if (c.data.n_candidates < c.data.k) errors.push_back("data.n_candidates must be >= data.k");
  if (c.data.train_fraction <= 0.0 || c.data.train_fraction >= 1.0)
    errors.push_back("data.train_fraction must lie in (0,1)");
  if (c.tokenizer.m_levels < 1) errors.push_back("tokenizer.m_levels must be >= 1");
  if (c.tokenizer.codebook_size < 1) errors.push_back("tokenizer.codebook_size must be >= 1");
  if (c.tokenizer.kmeans_iters < 1) errors.push_back("tokenizer.kmeans_iters must be >= 1");
  if (c.model.d_model < 1 || c.model.d_model % c.model.n_heads != 0)
    errors.push_back("model.d_model must be positive and divisible by n_heads");
  if (c.model.dropout < 0.0 || c.model.dropout >= 1.0)
    errors.push_back("model.dropout must lie in [0,1)");
  if (c.model.positional != "absolute" && c.model.positional != "setlike")
    errors.push_back("model.positional must be 'absolute' or 'setlike'");
  if (c.pretrain.num_sampled_lists < 1) errors.push_back("pretrain.num_sampled_lists must be >= 1");
  if (c.pretrain.scorer != "mean_metrics" && c.pretrain.scorer != "click_prefix")
    errors.push_back("pretrain.scorer must be 'mean_metrics' or 'click_prefix'");
  if (c.pretrain.epochs < 0) errors.push_back("pretrain.epochs must be >= 0");
  if (c.posttrain.group_size < 2) errors.push_back("posttrain.group_size must be >= 2");
  if (c.posttrain.temperature <= 0.0) errors.push_back("posttrain.temperature must be > 0");
  if (c.posttrain.beta < 0.0) errors.push_back("posttrain.beta must be >= 0");
  if (c.posttrain.clip <= 0.0) errors.push_back("posttrain.clip must be > 0");
  if (c.posttrain.steps < 0) errors.push_back("posttrain.steps must be >= 0");
  if (c.decode.beam_size < 1) errors.push_back("decode.beam_size must be >= 1");
  if (c.coldstart.fraction < 0.0 || c.coldstart.fraction > 1.0)
    errors.push_back("coldstart.fraction must lie in [0,1]");

  if (!errors.empty()) {
    std::ostringstream os;
    os << "invalid configuration (" << errors.size() << " violation(s)):";
    for (const auto& e : errors) os << "\n  - " << e;
    throw ConfigError(os.str());
  }
  return c;
}

json apply_overrides(json config, const std::vector<std::string>& overrides) {
  for (const std::string& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override must look like path.to.key=value: " + ov);
    const std::string path = ov.substr(0, eq);
    const std::string raw = ov.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::parse_error&) {
      value = raw;  // plain string
    }
    json* slot = &config;
    std::size_t start = 0;
    for (;;) {
      const auto dot = path.find('.', start);
      const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
      if (key.empty()) throw ConfigError("bad override path: " + path);
      if (dot == std::string::npos) {
        (*slot)[key] = value;
        break;
      }
      slot = &(*slot)[key];
      start = dot + 1;
    }
  }
  return config;
}

std::string config_hash(const std::string& command, const json& config) {
  const std::string s = command + "\n" + config.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInputError("cannot hash missing file: " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[8192];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
    if (!in) break;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string create_run_dir(const std::string& root, const std::string& command,
                           const json& config, bool force) {
  namespace fs = std::filesystem;
  const std::string hash = config_hash(command, config);
  fs::create_directories(root);
  if (!force) {
    for (const auto& entry : fs::directory_iterator(root)) {
      const std::string name = entry.path().filename().string();
      if (name.rfind(command + "-" + hash, 0) == 0) return "";
    }
  }
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", std::gmtime(&tt));
  std::string dir = root + "/" + command + "-" + hash + "-" + stamp;
  // disambiguate if two runs land in the same second
  int suffix = 0;
  while (fs::exists(dir)) dir = root + "/" + command + "-" + hash + "-" + stamp + "." +
                                std::to_string(++suffix);
  fs::create_directories(dir);
  return dir;
}

void write_manifest(const std::string& run_dir, const std::string& command, const json& config,
                    const std::vector<std::pair<std::string, std::string>>& inputs,
                    const std::vector<std::string>& outputs) {
  json m;
  m["command"] = command;
  m["config"] = config;
  m["config_hash"] = config_hash(command, config);
  json in = json::object();
  for (const auto& [path, hash] : inputs) in[path] = hash;
  m["inputs"] = std::move(in);
  m["outputs"] = outputs;
  const auto now = std::chrono::system_clock::now();
  m["written_unix_ms"] =
      std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count();
  save_json_file(run_dir + "/manifest.json", m);
}

}  // namespace glorank
