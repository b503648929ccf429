#ifndef GLORANK_TRAINING_HPP_
#define GLORANK_TRAINING_HPP_

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "glorank/corpus.hpp"
#include "glorank/decode.hpp"
#include "glorank/metrics.hpp"
#include "glorank/model.hpp"

namespace glorank {

// Decoupled AdamW; moments keyed by tensor name.
class AdamW {
 public:
  AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8)
      : lr_(lr), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  std::int64_t step_count() const { return t_; }

  void step(Parameters& params, const std::map<std::string, Mat>& grads);

 private:
  double lr_;
  double weight_decay_;
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::map<std::string, Mat> m_, v_;
};

enum class ProxyScorer { kMeanMetrics, kClickPrefix };
ProxyScorer proxy_scorer_from_string(const std::string& s);

struct PretrainTarget {
  int request_index = 0;       // into the request vector used for building
  RankedList target_list;
  std::vector<int> target_tokens;  // BOS-free serialization (global head)
  std::vector<int> target_positions;  // 0-based candidate positions (local head)
  double proxy_score = 0.0;
};

// Samples L distinct K-permutations per request (full enumeration when the
// permutation count is <= enumeration_cap), scores each with the proxy scorer
// and keeps the argmax; ties break to the lexicographically smallest item_id
// sequence. Deterministic by seed.
std::vector<PretrainTarget> build_pretrain_targets(const std::vector<RerankRequest>& requests,
                                                   const SidTable& sids,
                                                   const TokenVocabulary& vocab, int k, int L,
                                                   ProxyScorer scorer, std::uint64_t seed,
                                                   int enumeration_cap = 720);

struct PretrainOptions {
  int epochs = 30;
  double lr = 5e-4;
  double weight_decay = 0.01;
  int history_cap = 8;
  bool local_head = false;
  // explicit candidate reshuffling per epoch (the sigma randomization of the
  // action-space experiments); off by default
  bool reshuffle_candidates = false;
  std::uint64_t seed = 0;
};

struct CurvePoint {
  std::int64_t step;
  double value;
};

struct PretrainResult {
  std::vector<CurvePoint> loss_curve;
  std::int64_t steps = 0;
};

// AdamW over shuffled per-target steps; mutates params in place.
PretrainResult pretrain(Parameters& params, const std::vector<RerankRequest>& requests,
                        const std::vector<PretrainTarget>& targets, const SidTable& sids,
                        const TokenVocabulary& vocab, const PretrainOptions& opts);

struct GrpoOptions {
  int group_size = 20;
  double temperature = 1.0;
  double clip = 0.2;
  double beta = 0.0;
  double lr = 5e-6;
  double weight_decay = 0.0;
  int batch_requests = 2;
  int history_cap = 8;
  int k = 6;
  bool local_head = false;
  std::uint64_t seed = 0;
};

struct GroupSample {
  std::vector<DecodedList> rollouts;
  std::vector<double> rewards;
  std::vector<double> advantages;
};

// Group-standardized advantages: (r - mean) / (population std + eps).
std::vector<double> group_advantages(const std::vector<double>& rewards, double eps = 1e-8);

struct GrpoStepStats {
  double mean_reward = 0.0;
  double objective = 0.0;
  double kl = 0.0;
  double mean_abs_advantage = 0.0;
};

// One GRPO update: G trie-constrained rollouts per request, rewards from the
// list-wise metric mean, group-relative advantages broadcast over tokens,
// clipped importance-ratio objective (single inner epoch; the sampling policy
// is the old policy), optional beta-weighted k3 KL penalty to a reference.
GrpoStepStats grpo_step(Parameters& params, const Parameters* reference,
                        const std::vector<RerankRequest>& batch, const SidTable& sids,
                        const TokenVocabulary& vocab, const GrpoOptions& opts, AdamW& optimizer,
                        Rng& rng);

struct PosttrainOptions {
  GrpoOptions grpo;
  int steps = 200;
  int eval_every = 50;
};

struct PosttrainResult {
  std::vector<CurvePoint> reward_curve;       // training batch mean reward
  std::vector<CurvePoint> heldout_curve;      // periodic held-out snapshots
};

using EvalHook = std::function<double(const Parameters&)>;

PosttrainResult posttrain(Parameters& params, const std::vector<RerankRequest>& requests,
                          const SidTable& sids, const TokenVocabulary& vocab,
                          const PosttrainOptions& opts, const EvalHook& heldout_eval);

// Greedy-decode token accuracy of targets (exact-match fraction of tokens).
double token_accuracy(const Parameters& params, const std::vector<RerankRequest>& requests,
                      const std::vector<PretrainTarget>& targets, const SidTable& sids,
                      const TokenVocabulary& vocab, int history_cap);

// Mean greedy-decode reward over requests (global or local head).
double mean_greedy_reward(const Parameters& params, const std::vector<RerankRequest>& requests,
                          const SidTable& sids, const TokenVocabulary& vocab, int history_cap,
                          int k, bool local_head);

}  // namespace glorank

#endif  // GLORANK_TRAINING_HPP_
