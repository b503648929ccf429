#ifndef GLORANK_CONFIG_HPP_
#define GLORANK_CONFIG_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "glorank/jsonl.hpp"
#include "glorank/model.hpp"
#include "glorank/training.hpp"

namespace glorank {

// Whole-experiment configuration. Parsed strictly: unknown keys are rejected
// and validation reports every violation at once.
struct ExperimentConfig {
  std::uint64_t seed = 42;
  bool determinism = true;

  struct Data {
    // synthetic generation (used when items_path is empty)
    int n_items = 1000;
    int n_users = 200;
    int dim = 32;
    int n_clusters = 16;
    std::string items_path;
    std::string interactions_path;
    int n_candidates = 50;
    int k = 6;
    int history_cap = 8;
    double train_fraction = 0.8;
  } data;

  struct Tokenizer {
    int m_levels = 4;
    int codebook_size = 256;
    int kmeans_iters = 25;
  } tokenizer;

  struct Model {
    int d_model = 128;
    int n_heads = 4;
    int n_enc_layers = 2;
    int n_dec_layers = 2;
    int d_ff = 256;
    double dropout = 0.0;
    std::string positional = "absolute";
    bool tie_output = false;
  } model;

  struct Pretrain {
    int num_sampled_lists = 20;
    std::string scorer = "mean_metrics";
    int epochs = 30;
    double lr = 5e-4;
    double weight_decay = 0.01;
    int max_requests = 0;  // 0 = use every training request
    bool reshuffle_candidates = false;
  } pretrain;

  struct Posttrain {
    int group_size = 20;
    double temperature = 1.0;
    double beta = 0.0;
    double clip = 0.2;
    int steps = 200;
    double lr = 5e-6;
    double weight_decay = 0.0;
    int batch_requests = 2;
    int eval_every = 50;
    int max_requests = 0;
  } posttrain;

  struct Decode {
    int beam_size = 20;
  } decode;

  struct Coldstart {
    double fraction = 0.05;
  } coldstart;

  json to_json() const;
  // throws ConfigError listing all violations
  static ExperimentConfig from_json(const json& j);
};

// Apply dotted-path overrides like "posttrain.group_size=8"; values parse as
// JSON when possible, otherwise as strings.
json apply_overrides(json config, const std::vector<std::string>& overrides);

// 64-bit FNV-1a of the canonical dump, as 16 hex chars.
std::string config_hash(const std::string& command, const json& config);

std::string file_hash(const std::string& path);

// Append-only run directory scheme: <root>/<command>-<hash>-<timestamp>.
// Returns empty string when a directory for this hash already exists and
// force is false (re-running an identical config is a no-op).
std::string create_run_dir(const std::string& root, const std::string& command,
                           const json& config, bool force);

void write_manifest(const std::string& run_dir, const std::string& command, const json& config,
                    const std::vector<std::pair<std::string, std::string>>& inputs,
                    const std::vector<std::string>& outputs);

}  // namespace glorank

#endif  // GLORANK_CONFIG_HPP_
