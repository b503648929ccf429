#ifndef GLORANK_HARNESS_HPP_
#define GLORANK_HARNESS_HPP_

#include <string>
#include <vector>

#include "glorank/config.hpp"
#include "glorank/corpus.hpp"
#include "glorank/decode.hpp"
#include "glorank/metrics.hpp"
#include "glorank/model.hpp"
#include "glorank/tokenizer.hpp"
#include "glorank/training.hpp"

namespace glorank {

// Everything a training or evaluation stage needs, resolved in memory.
struct Workbench {
  Corpus corpus;
  std::vector<Interaction> interactions;
  std::vector<RerankRequest> train_requests;
  std::vector<RerankRequest> heldout_requests;
  RqCodebooks codebooks;
  SidTable sids;
  TokenVocabulary vocab;
};

// Generate-or-load data, fit the tokenizer, build and split requests.
// `atomic_ids` swaps the residual quantizer for one-token-per-item ids
// (the atomic control of the cold-start experiment). When `mask_fraction`
// is positive, masked items are removed from training interactions and the
// quantizer's fitting corpus, but persist in held-out requests.
struct WorkbenchOptions {
  bool atomic_ids = false;
  double mask_fraction = 0.0;
  std::uint64_t mask_seed = 1234;
};

Workbench build_workbench(const ExperimentConfig& cfg, const WorkbenchOptions& opts = {});

// One-token-per-item identifier table (codes index items in ascending id order).
SidTable make_atomic_sids(const Corpus& corpus);

// Derive the model configuration (vocab size, sequence caps, head widths)
// from the experiment config and the tokenized corpus.
ModelConfig derive_model_config(const ExperimentConfig& cfg, const TokenVocabulary& vocab,
                                bool local_head);

struct EvalRow {
  std::int64_t request_id = 0;
  MetricReport metrics;
  double reward = 0.0;
};

struct EvalSummary {
  std::vector<EvalRow> rows;
  MetricReport mean;
  double mean_reward = 0.0;
};

EvalSummary evaluate_lists(const std::vector<RerankRequest>& requests,
                           const std::vector<RankedList>& lists, int k);

// Greedy-decode every request and score it.
EvalSummary evaluate_greedy(const Parameters& params, const std::vector<RerankRequest>& requests,
                            const SidTable& sids, const TokenVocabulary& vocab, int history_cap,
                            int k, bool local_head);

std::string eval_csv(const EvalSummary& summary);
json eval_summary_json(const EvalSummary& summary);

// ---- experiment harnesses ----

struct AblationRow {
  std::string variant;  // full | no_posttrain | no_pretrain | local_action_space
  MetricReport metrics;
  double mean_reward = 0.0;
};

// Trains the four variants under identical data, seeds and budgets (candidate
// order is explicitly reshuffled per epoch for every variant) and evaluates
// each on the held-out split.
std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg);

struct ColdstartReport {
  double sid_map_normal = 0.0;
  double sid_map_masked = 0.0;
  double control_map_normal = 0.0;
  double control_map_masked = 0.0;

  double sid_relative_drop() const;
  double control_relative_drop() const;
};

// SID model vs atomic-id local-head control, trained on full and masked
// interactions, both evaluated on the same held-out requests.
ColdstartReport run_coldstart(const ExperimentConfig& cfg);

}  // namespace glorank

#endif  // GLORANK_HARNESS_HPP_
