#include "glorank/training.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <set>

namespace glorank {

void AdamW::step(Parameters& params, const std::map<std::string, Mat>& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& [name, p] : params.tensors) {
    auto git = grads.find(name);
    const Mat grad = git != grads.end() ? git->second : Mat::Zero(p.rows(), p.cols());
    if (!grad.allFinite())
      throw NumericalError("AdamW: non-finite gradient in tensor " + name + " at step " +
                           std::to_string(t_));
    auto mit = m_.find(name);
    if (mit == m_.end()) {
      m_.emplace(name, Mat::Zero(p.rows(), p.cols()));
      v_.emplace(name, Mat::Zero(p.rows(), p.cols()));
    }
    Mat& m = m_.at(name);
    Mat& v = v_.at(name);
    m = beta1_ * m + (1.0 - beta1_) * grad;
    v = beta2_ * v + (1.0 - beta2_) * grad.cwiseProduct(grad);
    const Mat mhat = m / bc1;
    const Mat vhat = v / bc2;
    p -= lr_ * (mhat.array() / (vhat.array().sqrt() + eps_)).matrix();
    if (weight_decay_ > 0.0) p -= lr_ * weight_decay_ * p;
  }
}

ProxyScorer proxy_scorer_from_string(const std::string& s) {
  if (s == "mean_metrics") return ProxyScorer::kMeanMetrics;
  if (s == "click_prefix") return ProxyScorer::kClickPrefix;
  throw ArgumentError("unknown proxy scorer id: " + s);
}

namespace {

double proxy_score(ProxyScorer scorer, const std::vector<std::int64_t>& items,
                   const RerankRequest& req, int k) {
  switch (scorer) {
    case ProxyScorer::kMeanMetrics:
      return list_reward(items, req.relevance, k, req.total_relevant());
    case ProxyScorer::kClickPrefix: {
      // length of the leading run of relevant items, normalized by K
      int run = 0;
      for (const auto id : items) {
        auto it = req.relevance.find(id);
        if (it == req.relevance.end() || it->second == 0) break;
        ++run;
      }
      return static_cast<double>(run) / static_cast<double>(k);
    }
  }
  throw ArgumentError("proxy_score: bad scorer");
}

// ordered K-permutation count, saturating
double permutation_count(int n, int k) {
  double c = 1.0;
  for (int i = 0; i < k; ++i) {
    c *= static_cast<double>(n - i);
    if (c > 1e15) return 1e15;
  }
  return c;
}

void enumerate_permutations(int n, int k, std::vector<int>& current, std::vector<bool>& used,
                            const std::function<void(const std::vector<int>&)>& visit) {
  if (static_cast<int>(current.size()) == k) {
    visit(current);
    return;
  }
  for (int i = 0; i < n; ++i) {
    if (used[static_cast<std::size_t>(i)]) continue;
    used[static_cast<std::size_t>(i)] = true;
    current.push_back(i);
    enumerate_permutations(n, k, current, used, visit);
    current.pop_back();
    used[static_cast<std::size_t>(i)] = false;
  }
}

}  // namespace

std::vector<PretrainTarget> build_pretrain_targets(const std::vector<RerankRequest>& requests,
                                                   const SidTable& sids,
                                                   const TokenVocabulary& vocab, int k, int L,
                                                   ProxyScorer scorer, std::uint64_t seed,
                                                   int enumeration_cap) {
  if (L < 1) throw ArgumentError("build_pretrain_targets: L must be >= 1");
  std::vector<PretrainTarget> out;
  Rng master(seed);
  int enumerated = 0;
  for (std::size_t ri = 0; ri < requests.size(); ++ri) {
    const RerankRequest& req = requests[ri];
    const int n = static_cast<int>(req.candidates.size());
    if (k > n) throw ArgumentError("build_pretrain_targets: K exceeds candidate count");
    Rng rng = master.fork(ri + 1);

    std::vector<std::vector<int>> pool;  // candidate positions
    const double count = permutation_count(n, k);
    if (count <= static_cast<double>(std::max(L, enumeration_cap))) {
      std::vector<int> cur;
      std::vector<bool> used(static_cast<std::size_t>(n), false);
      enumerate_permutations(n, k, cur, used,
                             [&](const std::vector<int>& p) { pool.push_back(p); });
      ++enumerated;
    } else {
      std::set<std::vector<int>> seen;
      while (static_cast<int>(pool.size()) < L) {
        std::vector<int> p = rng.k_permutation(n, k);
        if (seen.insert(p).second) pool.push_back(std::move(p));
      }
    }

    PretrainTarget best;
    best.request_index = static_cast<int>(ri);
    bool have = false;
    std::vector<std::int64_t> best_items;
    for (const auto& positions : pool) {
      std::vector<std::int64_t> items;
      items.reserve(positions.size());
      for (const int p : positions) items.push_back(req.candidates[static_cast<std::size_t>(p)]);
      const double score = proxy_score(scorer, items, req, k);
      const bool better =
          !have || score > best.proxy_score ||
          (score == best.proxy_score && items < best_items);
      if (better) {
        have = true;
        best.proxy_score = score;
        best_items = items;
        best.target_positions = positions;
      }
    }
    best.target_list.items = best_items;
    validate_ranked_list(best.target_list, req);
    best.target_tokens.clear();
    for (const auto id : best_items) {
      const auto toks = vocab.tokens_of(sids.sid(id));
      best.target_tokens.insert(best.target_tokens.end(), toks.begin(), toks.end());
    }
    out.push_back(std::move(best));
  }
  if (enumerated > 0)
    std::cerr << "[targets] full permutation enumeration used for " << enumerated << "/"
              << requests.size() << " requests\n";
  return out;
}

namespace {

// positions of the target items under a (possibly reshuffled) candidate order
std::vector<int> positions_of(const RerankRequest& req, const std::vector<std::int64_t>& items) {
  std::vector<int> out;
  out.reserve(items.size());
  for (const auto id : items) {
    const auto it = std::find(req.candidates.begin(), req.candidates.end(), id);
    if (it == req.candidates.end())
      throw IntegrityError("target item is not a candidate after reshuffle");
    out.push_back(static_cast<int>(it - req.candidates.begin()));
  }
  return out;
}

}  // namespace

PretrainResult pretrain(Parameters& params, const std::vector<RerankRequest>& requests,
                        const std::vector<PretrainTarget>& targets, const SidTable& sids,
                        const TokenVocabulary& vocab, const PretrainOptions& opts) {
  if (targets.empty()) throw ArgumentError("pretrain: no targets");
  AdamW optimizer(opts.lr, opts.weight_decay);
  Rng rng(opts.seed ^ 0x5eedbeefULL);
  PretrainResult res;

  std::vector<RerankRequest> working = requests;  // reshuffling operates on a copy
  std::vector<std::size_t> order(targets.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    if (opts.reshuffle_candidates) {
      for (auto& req : working) rng.shuffle(req.candidates);
    }
    rng.shuffle(order);
    for (const std::size_t ti : order) {
      const PretrainTarget& tgt = targets[ti];
      const RerankRequest& req = working[static_cast<std::size_t>(tgt.request_index)];
      const InputSequence input =
          serialize_input(req, sids, vocab, opts.history_cap, params.config.max_enc_len);
      std::vector<int> target_seq;
      if (opts.local_head)
        target_seq = positions_of(req, tgt.target_list.items);
      else
        target_seq = tgt.target_tokens;

      const LossAndGrads lg = loss_and_grads(params, input, target_seq, opts.local_head);
      if (!std::isfinite(lg.loss))
        throw NumericalError("pretrain: NaN loss at step " + std::to_string(res.steps) +
                             ", request " + std::to_string(req.request_id));
      optimizer.step(params, lg.grads);
      res.loss_curve.push_back({res.steps, lg.loss});
      ++res.steps;
    }
  }
  return res;
}

std::vector<double> group_advantages(const std::vector<double>& rewards, double eps) {
  const double n = static_cast<double>(rewards.size());
  if (rewards.empty()) throw ArgumentError("group_advantages: empty group");
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (const double r : rewards) var += (r - mean) * (r - mean);
  var /= n;  // population variance
  const double std = std::sqrt(var);
  std::vector<double> adv(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / (std + eps);
  return adv;
}

namespace {

// Additive -inf masks replaying the legality constraints that generated a
// rollout, so the training-side distribution matches the sampler's exactly.
Mat trie_mask_for(const CandidateTrie& trie, const std::vector<int>& tokens, int vocab_size) {
  Mat mask = Mat::Constant(static_cast<Eigen::Index>(tokens.size()), vocab_size, kMaskNegInf);
  PruneState pruned(trie);
  TrieCursor cursor;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    for (const int t : legal_tokens(trie, pruned, cursor))
      mask(static_cast<Eigen::Index>(i), t) = 0.0;
    const AdvanceResult adv = advance(trie, pruned, cursor, tokens[i]);
    cursor = adv.cursor;
    if (adv.completed) pruned.prune(trie, *adv.completed);
  }
  return mask;
}

Mat slot_mask_for(const std::vector<int>& positions, int n) {
  Mat mask = Mat::Constant(static_cast<Eigen::Index>(positions.size()), n, kMaskNegInf);
  std::vector<bool> taken(static_cast<std::size_t>(n), false);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    for (int p = 0; p < n; ++p)
      if (!taken[static_cast<std::size_t>(p)]) mask(static_cast<Eigen::Index>(i), p) = 0.0;
    taken[static_cast<std::size_t>(positions[i])] = true;
  }
  return mask;
}

std::vector<int> decoder_inputs_for(const std::vector<int>& targets, bool local_head,
                                    const ModelConfig& config) {
  std::vector<int> inputs;
  inputs.reserve(targets.size());
  inputs.push_back(local_head ? 0 : bos_token_id(config));
  for (std::size_t i = 0; i + 1 < targets.size(); ++i)
    inputs.push_back(local_head ? local_input_of_position(targets[i]) : targets[i]);
  return inputs;
}

// per-token masked tempered log-probs of a fixed token string (no grad)
std::vector<double> replay_logprobs(const Parameters& params, const PreparedRequest& prep,
                                    const std::vector<int>& tokens, bool local_head,
                                    double temperature, int n_candidates) {
  DecoderRun run(params, prep.ctx, local_head);
  Eigen::VectorXd logits =
      run.step(local_head ? 0 : bos_token_id(params.config)).logits;
  std::vector<double> out;
  PruneState pruned(prep.trie);
  TrieCursor cursor;
  std::vector<bool> taken(static_cast<std::size_t>(n_candidates), false);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    std::vector<int> legal;
    if (local_head) {
      for (int p = 0; p < n_candidates; ++p)
        if (!taken[static_cast<std::size_t>(p)]) legal.push_back(p);
    } else {
      legal = legal_tokens(prep.trie, pruned, cursor);
    }
    const Eigen::VectorXd logp = masked_log_softmax(logits, legal, temperature);
    out.push_back(logp[tokens[i]]);
    if (local_head) {
      taken[static_cast<std::size_t>(tokens[i])] = true;
    } else {
      const AdvanceResult adv = advance(prep.trie, pruned, cursor, tokens[i]);
      cursor = adv.cursor;
      if (adv.completed) pruned.prune(prep.trie, *adv.completed);
    }
    if (i + 1 < tokens.size())
      logits = run
                   .step(local_head ? local_input_of_position(tokens[i]) : tokens[i])
                   .logits;
  }
  return out;
}

}  // namespace

GrpoStepStats grpo_step(Parameters& params, const Parameters* reference,
                        const std::vector<RerankRequest>& batch, const SidTable& sids,
                        const TokenVocabulary& vocab, const GrpoOptions& opts, AdamW& optimizer,
                        Rng& rng) {
  if (opts.group_size < 2) throw ArgumentError("grpo_step: group size must be >= 2");
  if (batch.empty()) throw ArgumentError("grpo_step: empty batch");

  const Reranker ranker(params, sids, vocab, opts.history_cap);

  GrpoStepStats stats;
  std::map<std::string, Mat> grad_acc;
  long total_tokens = 0;
  long total_rollouts = 0;

  struct RequestGroup {
    PreparedRequest prep;
    GroupSample group;
  };
  std::vector<RequestGroup> groups;
  for (const RerankRequest& req : batch) {
    RequestGroup g;
    g.prep = ranker.prepare(req);
    for (int i = 0; i < opts.group_size; ++i) {
      DecodedList roll =
          opts.local_head
              ? ranker.sample_local_prepared(g.prep, req, opts.temperature, opts.k,
                                             rng.next_u64(), false)
              : ranker.sample_prepared(g.prep, req, opts.temperature, opts.k, rng.next_u64(),
                                       false);
      const double reward = list_reward(roll.list.items, req.relevance, opts.k,
                                        req.total_relevant());
      if (!std::isfinite(reward)) throw NumericalError("grpo_step: non-finite reward");
      g.group.rewards.push_back(reward);
      g.group.rollouts.push_back(std::move(roll));
      total_tokens += static_cast<long>(g.group.rollouts.back().tokens.size());
      ++total_rollouts;
    }
    g.group.advantages = group_advantages(g.group.rewards);
    groups.push_back(std::move(g));
  }

  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const RerankRequest& req = batch[gi];
    RequestGroup& g = groups[gi];
    TrainGraph graph(params, g.prep.input);
    Tape& tape = graph.tape();

    Tape::Ref objective = -1;
    Tape::Ref kl_total = -1;
    for (int i = 0; i < opts.group_size; ++i) {
      const DecodedList& roll = g.group.rollouts[static_cast<std::size_t>(i)];
      const double advantage = g.group.advantages[static_cast<std::size_t>(i)];
      const std::vector<int>& targets = roll.tokens;
      const auto dec_inputs = decoder_inputs_for(targets, opts.local_head, params.config);
      const auto dec_out = graph.decode(dec_inputs, opts.local_head);

      const Mat mask = opts.local_head
                           ? slot_mask_for(targets, params.config.local_slots)
                           : trie_mask_for(g.prep.trie, targets, params.config.vocab_size);
      const Tape::Ref lp_new =
          tape.log_softmax_select(dec_out.logits, targets, &mask, opts.temperature);

      Mat lp_old(static_cast<Eigen::Index>(targets.size()), 1);
      for (std::size_t t = 0; t < targets.size(); ++t)
        lp_old(static_cast<Eigen::Index>(t), 0) = roll.token_logprobs[t];
      const Tape::Ref lp_old_leaf = tape.leaf(lp_old, false);

      const Tape::Ref ratio = tape.exp(tape.sub(lp_new, lp_old_leaf));
      const Tape::Ref surr = tape.minimum(
          tape.scale(ratio, advantage),
          tape.scale(tape.clamp(ratio, 1.0 - opts.clip, 1.0 + opts.clip), advantage));
      const Tape::Ref obj_i = tape.sum(surr);
      objective = objective < 0 ? obj_i : tape.add(objective, obj_i);

      if (opts.beta > 0.0) {
        if (reference == nullptr)
          throw ArgumentError("grpo_step: beta > 0 requires a reference model");
        const Reranker ref_ranker(*reference, sids, vocab, opts.history_cap);
        PreparedRequest ref_prep = ref_ranker.prepare(req);
        const auto ref_lp = replay_logprobs(*reference, ref_prep, targets, opts.local_head,
                                            opts.temperature,
                                            static_cast<int>(req.candidates.size()));
        Mat lp_ref(static_cast<Eigen::Index>(targets.size()), 1);
        for (std::size_t t = 0; t < targets.size(); ++t)
          lp_ref(static_cast<Eigen::Index>(t), 0) = ref_lp[t];
        const Tape::Ref d = tape.sub(tape.leaf(lp_ref, false), lp_new);
        // k3 estimator: exp(d) - d - 1 >= 0
        const Tape::Ref k3 = tape.add_scalar(tape.sub(tape.exp(d), d), -1.0);
        const Tape::Ref kl_i = tape.sum(k3);
        kl_total = kl_total < 0 ? kl_i : tape.add(kl_total, kl_i);
      }
    }

    const double inv_tokens = 1.0 / static_cast<double>(total_tokens);
    Tape::Ref loss = tape.scale(objective, -inv_tokens);
    if (opts.beta > 0.0 && kl_total >= 0)
      loss = tape.add(loss, tape.scale(kl_total, opts.beta * inv_tokens));
    tape.backward(loss);
    stats.objective += tape.value(objective)(0, 0) * inv_tokens;
    if (kl_total >= 0) stats.kl += tape.value(kl_total)(0, 0) * inv_tokens;

    for (auto& [name, grad] : graph.collect_grads()) {
      auto it = grad_acc.find(name);
      if (it == grad_acc.end())
        grad_acc.emplace(name, std::move(grad));
      else
        it->second += grad;
    }
  }

  optimizer.step(params, grad_acc);

  double reward_sum = 0.0, adv_sum = 0.0;
  for (const auto& g : groups) {
    for (const double r : g.group.rewards) reward_sum += r;
    for (const double a : g.group.advantages) adv_sum += std::abs(a);
  }
  stats.mean_reward = reward_sum / static_cast<double>(total_rollouts);
  stats.mean_abs_advantage = adv_sum / static_cast<double>(total_rollouts);
  return stats;
}

PosttrainResult posttrain(Parameters& params, const std::vector<RerankRequest>& requests,
                          const SidTable& sids, const TokenVocabulary& vocab,
                          const PosttrainOptions& opts, const EvalHook& heldout_eval) {
  if (requests.empty()) throw ArgumentError("posttrain: no requests");
  PosttrainResult res;
  AdamW optimizer(opts.grpo.lr, opts.grpo.weight_decay);
  Rng rng(opts.grpo.seed ^ 0x6e0a11edULL);
  Parameters reference = params;  // frozen pre-trained policy for the KL term

  std::vector<std::size_t> order(requests.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = 0;

  for (int step = 0; step < opts.steps; ++step) {
    std::vector<RerankRequest> batch;
    for (int b = 0; b < opts.grpo.batch_requests; ++b) {
      if (cursor == 0) rng.shuffle(order);
      batch.push_back(requests[order[cursor]]);
      cursor = (cursor + 1) % order.size();
    }
    const GrpoStepStats stats =
        grpo_step(params, opts.grpo.beta > 0.0 ? &reference : nullptr, batch, sids, vocab,
                  opts.grpo, optimizer, rng);
    res.reward_curve.push_back({step, stats.mean_reward});
    if (heldout_eval && opts.eval_every > 0 &&
        ((step + 1) % opts.eval_every == 0 || step + 1 == opts.steps)) {
      res.heldout_curve.push_back({step + 1, heldout_eval(params)});
    }
  }
  return res;
}

double token_accuracy(const Parameters& params, const std::vector<RerankRequest>& requests,
                      const std::vector<PretrainTarget>& targets, const SidTable& sids,
                      const TokenVocabulary& vocab, int history_cap) {
  const Reranker ranker(params, sids, vocab, history_cap);
  long correct = 0, total = 0;
  for (const auto& tgt : targets) {
    const RerankRequest& req = requests[static_cast<std::size_t>(tgt.request_index)];
    const int k = static_cast<int>(tgt.target_list.items.size());
    const DecodedList d = ranker.greedy(req, k);
    for (std::size_t i = 0; i < tgt.target_tokens.size(); ++i) {
      ++total;
      if (i < d.tokens.size() && d.tokens[i] == tgt.target_tokens[i]) ++correct;
    }
  }
  return total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

double mean_greedy_reward(const Parameters& params, const std::vector<RerankRequest>& requests,
                          const SidTable& sids, const TokenVocabulary& vocab, int history_cap,
                          int k, bool local_head) {
  const Reranker ranker(params, sids, vocab, history_cap);
  double total = 0.0;
  for (const auto& req : requests) {
    const DecodedList d = local_head ? ranker.greedy_local(req, k) : ranker.greedy(req, k);
    total += list_reward(d.list.items, req.relevance, k, req.total_relevant());
  }
  return requests.empty() ? 0.0 : total / static_cast<double>(requests.size());
}

}  // namespace glorank
