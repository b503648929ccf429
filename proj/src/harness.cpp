#include "glorank/harness.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace glorank {

SidTable make_atomic_sids(const Corpus& corpus) {
  std::map<std::int64_t, SemanticId> table;
  int idx = 0;
  for (const auto id : corpus.sorted_ids()) {
    SemanticId sid;
    sid.codes = {idx++};
    table.emplace(id, std::move(sid));
  }
  return SidTable(std::move(table), 1);
}

Workbench build_workbench(const ExperimentConfig& cfg, const WorkbenchOptions& opts) {
  Workbench wb;
  if (cfg.data.items_path.empty()) {
    SyntheticData data = generate_synthetic(cfg.seed, cfg.data.n_items, cfg.data.n_users,
                                            cfg.data.dim, cfg.data.n_clusters);
    wb.corpus = std::move(data.corpus);
    wb.interactions = std::move(data.interactions);
  } else {
    wb.corpus = Corpus::load_jsonl(cfg.data.items_path);
    if (cfg.data.interactions_path.empty())
      throw ConfigError("data.interactions_path required when items_path is set");
    wb.interactions = load_interactions_jsonl(cfg.data.interactions_path);
  }

  std::vector<Interaction> train_interactions = wb.interactions;
  std::vector<std::int64_t> masked;
  if (opts.mask_fraction > 0.0) {
    MaskSplit split = mask_items(wb.corpus, wb.interactions, opts.mask_fraction, opts.mask_seed);
    train_interactions = std::move(split.train);
    masked = std::move(split.masked_items);
  }

  // the world visible to training: masked items removed entirely
  Corpus visible_corpus;
  if (masked.empty()) {
    visible_corpus = wb.corpus;
  } else {
    const std::set<std::int64_t> masked_set(masked.begin(), masked.end());
    for (const auto& item : wb.corpus.items())
      if (!masked_set.count(item.item_id)) visible_corpus.add_item(item);
  }

  // quantizer fit only on items visible to training; cold items are assigned
  // by content afterwards
  if (opts.atomic_ids) {
    wb.sids = make_atomic_sids(wb.corpus);
    wb.vocab = TokenVocabulary(1, static_cast<int>(wb.corpus.size()), 0);
  } else {
    wb.codebooks = fit_rq_kmeans(visible_corpus, cfg.tokenizer.m_levels,
                                 cfg.tokenizer.codebook_size, cfg.tokenizer.kmeans_iters,
                                 cfg.seed + 101);
    wb.sids = assign_sids(wb.corpus, wb.codebooks);
    wb.vocab = TokenVocabulary::for_table(wb.sids, cfg.tokenizer.codebook_size);
  }

  // requests: training ones drawn entirely inside the visible world (negatives
  // included), held-out ones from the full log of the remaining users
  const RequestBuildResult train_built =
      build_requests(visible_corpus, train_interactions, cfg.data.n_candidates, cfg.data.k,
                     cfg.seed + 202);
  const RequestBuildResult full_built = build_requests(
      wb.corpus, wb.interactions, cfg.data.n_candidates, cfg.data.k, cfg.seed + 202);

  std::set<std::int64_t> users;
  for (const auto& r : full_built.requests) users.insert(r.user_id);
  const int n_train_users =
      static_cast<int>(std::lround(cfg.data.train_fraction * static_cast<double>(users.size())));
  std::set<std::int64_t> train_users;
  for (const auto u : users) {
    if (static_cast<int>(train_users.size()) >= n_train_users) break;
    train_users.insert(u);
  }
  for (const auto& r : train_built.requests)
    if (train_users.count(r.user_id)) wb.train_requests.push_back(r);
  for (const auto& r : full_built.requests)
    if (!train_users.count(r.user_id)) wb.heldout_requests.push_back(r);
  return wb;
}

ModelConfig derive_model_config(const ExperimentConfig& cfg, const TokenVocabulary& vocab,
                                bool local_head) {
  ModelConfig mc;
  mc.d_model = cfg.model.d_model;
  mc.n_heads = cfg.model.n_heads;
  mc.n_enc_layers = cfg.model.n_enc_layers;
  mc.n_dec_layers = cfg.model.n_dec_layers;
  mc.d_ff = cfg.model.d_ff;
  mc.dropout = cfg.model.dropout;
  mc.positional = positional_mode_from_string(cfg.model.positional);
  mc.tie_output = cfg.model.tie_output;
  mc.vocab_size = vocab.vocab_size();
  const int il = vocab.item_token_len();
  mc.max_enc_len = (cfg.data.n_candidates + cfg.data.history_cap) * il + 4;
  mc.max_dec_len = cfg.data.k * il + 2;
  mc.local_slots = local_head ? cfg.data.n_candidates : 0;
  mc.validate();
  return mc;
}

EvalSummary evaluate_lists(const std::vector<RerankRequest>& requests,
                           const std::vector<RankedList>& lists, int k) {
  if (requests.size() != lists.size())
    throw ArgumentError("evaluate_lists: request/list count mismatch");
  EvalSummary out;
  std::vector<MetricReport> reports;
  for (std::size_t i = 0; i < requests.size(); ++i) {
    validate_ranked_list(lists[i], requests[i]);
    EvalRow row;
    row.request_id = requests[i].request_id;
    row.metrics = metrics_at_k(lists[i].items, requests[i].relevance, k,
                               requests[i].total_relevant());
    row.reward = row.metrics.mean();
    out.mean_reward += row.reward;
    reports.push_back(row.metrics);
    out.rows.push_back(std::move(row));
  }
  if (!out.rows.empty()) out.mean_reward /= static_cast<double>(out.rows.size());
  out.mean = mean_report(reports);
  return out;
}

EvalSummary evaluate_greedy(const Parameters& params, const std::vector<RerankRequest>& requests,
                            const SidTable& sids, const TokenVocabulary& vocab, int history_cap,
                            int k, bool local_head) {
  const Reranker ranker(params, sids, vocab, history_cap);
  std::vector<RankedList> lists;
  lists.reserve(requests.size());
  for (const auto& req : requests) {
    const DecodedList d = local_head ? ranker.greedy_local(req, k) : ranker.greedy(req, k);
    lists.push_back(d.list);
  }
  return evaluate_lists(requests, lists, k);
}

std::string eval_csv(const EvalSummary& summary) {
  std::ostringstream os;
  os.precision(17);
  os << "request_id,precision,ndcg,map,f1,reward\n";
  for (const auto& row : summary.rows) {
    os << row.request_id << ',' << row.metrics.precision << ',' << row.metrics.ndcg << ','
       << row.metrics.map << ',' << row.metrics.f1 << ',' << row.reward << '\n';
  }
  return os.str();
}

json eval_summary_json(const EvalSummary& summary) {
  return json{{"requests", summary.rows.size()},
              {"precision", summary.mean.precision},
              {"ndcg", summary.mean.ndcg},
              {"map", summary.mean.map},
              {"f1", summary.mean.f1},
              {"mean_reward", summary.mean_reward}};
}

namespace {

PosttrainOptions posttrain_options(const ExperimentConfig& cfg, bool local_head) {
  PosttrainOptions opts;
  opts.grpo.group_size = cfg.posttrain.group_size;
  opts.grpo.temperature = cfg.posttrain.temperature;
  opts.grpo.beta = cfg.posttrain.beta;
  opts.grpo.clip = cfg.posttrain.clip;
  opts.grpo.lr = cfg.posttrain.lr;
  opts.grpo.weight_decay = cfg.posttrain.weight_decay;
  opts.grpo.batch_requests = cfg.posttrain.batch_requests;
  opts.grpo.history_cap = cfg.data.history_cap;
  opts.grpo.k = cfg.data.k;
  opts.grpo.local_head = local_head;
  opts.grpo.seed = cfg.seed + 606;
  opts.steps = cfg.posttrain.steps;
  opts.eval_every = 0;
  return opts;
}

std::vector<RerankRequest> posttrain_pool(const ExperimentConfig& cfg, const Workbench& wb) {
  std::vector<RerankRequest> pool = wb.train_requests;
  if (cfg.posttrain.max_requests > 0 &&
      static_cast<int>(pool.size()) > cfg.posttrain.max_requests)
    pool.resize(static_cast<std::size_t>(cfg.posttrain.max_requests));
  return pool;
}

Parameters train_variant(const ExperimentConfig& cfg, const Workbench& wb, bool local_head,
                         bool do_pretrain, bool do_posttrain) {
  const ModelConfig mc = derive_model_config(cfg, wb.vocab, local_head);
  Parameters params = Parameters::init(mc, cfg.seed + 303);

  std::vector<RerankRequest> pretrain_pool = wb.train_requests;
  if (cfg.pretrain.max_requests > 0 &&
      static_cast<int>(pretrain_pool.size()) > cfg.pretrain.max_requests)
    pretrain_pool.resize(static_cast<std::size_t>(cfg.pretrain.max_requests));

  if (do_pretrain && cfg.pretrain.epochs > 0 && !pretrain_pool.empty()) {
    const auto targets = build_pretrain_targets(
        pretrain_pool, wb.sids, wb.vocab, cfg.data.k, cfg.pretrain.num_sampled_lists,
        proxy_scorer_from_string(cfg.pretrain.scorer), cfg.seed + 404);
    PretrainOptions opts;
    opts.epochs = cfg.pretrain.epochs;
    opts.lr = cfg.pretrain.lr;
    opts.weight_decay = cfg.pretrain.weight_decay;
    opts.history_cap = cfg.data.history_cap;
    opts.local_head = local_head;
    opts.reshuffle_candidates = cfg.pretrain.reshuffle_candidates;
    opts.seed = cfg.seed + 505;
    pretrain(params, pretrain_pool, targets, wb.sids, wb.vocab, opts);
  }

  if (do_posttrain && cfg.posttrain.steps > 0) {
    const auto pool = posttrain_pool(cfg, wb);
    posttrain(params, pool, wb.sids, wb.vocab, posttrain_options(cfg, local_head), nullptr);
  }
  return params;
}

}  // namespace

std::vector<AblationRow> run_ablation(const ExperimentConfig& base_cfg) {
  ExperimentConfig cfg = base_cfg;
  cfg.pretrain.reshuffle_candidates = true;  // the sigma randomization under study

  const Workbench wb = build_workbench(cfg);
  std::vector<AblationRow> rows;

  auto eval_variant = [&](const std::string& name, const Parameters& params, bool local_head) {
    const EvalSummary s = evaluate_greedy(params, wb.heldout_requests, wb.sids, wb.vocab,
                                          cfg.data.history_cap, cfg.data.k, local_head);
    AblationRow row;
    row.variant = name;
    row.metrics = s.mean;
    row.mean_reward = s.mean_reward;
    rows.push_back(row);
  };

  // full shares its pre-training leg with no_posttrain
  Parameters pretrained = train_variant(cfg, wb, false, true, false);
  eval_variant("no_posttrain", pretrained, false);
  {
    Parameters full = pretrained;
    const auto pool = posttrain_pool(cfg, wb);
    posttrain(full, pool, wb.sids, wb.vocab, posttrain_options(cfg, false), nullptr);
    eval_variant("full", full, false);
  }
  {
    Parameters no_pre = train_variant(cfg, wb, false, false, true);
    eval_variant("no_pretrain", no_pre, false);
  }
  {
    Parameters las = train_variant(cfg, wb, true, true, true);
    eval_variant("local_action_space", las, true);
  }
  std::sort(rows.begin(), rows.end(),
            [](const AblationRow& a, const AblationRow& b) { return a.variant < b.variant; });
  return rows;
}

double ColdstartReport::sid_relative_drop() const {
  return (sid_map_normal - sid_map_masked) / std::max(sid_map_normal, 1e-9);
}

double ColdstartReport::control_relative_drop() const {
  return (control_map_normal - control_map_masked) / std::max(control_map_normal, 1e-9);
}

ColdstartReport run_coldstart(const ExperimentConfig& cfg) {
  ColdstartReport report;

  auto run_one = [&](bool atomic_control, double fraction) -> double {
    WorkbenchOptions wopts;
    wopts.atomic_ids = atomic_control;
    wopts.mask_fraction = fraction;
    wopts.mask_seed = cfg.seed + 707;
    const Workbench wb = build_workbench(cfg, wopts);
    const Parameters params = train_variant(cfg, wb, atomic_control, true, false);
    const EvalSummary s = evaluate_greedy(params, wb.heldout_requests, wb.sids, wb.vocab,
                                          cfg.data.history_cap, cfg.data.k, atomic_control);
    return s.mean.map;
  };

  report.sid_map_normal = run_one(false, 0.0);
  report.sid_map_masked = run_one(false, cfg.coldstart.fraction);
  report.control_map_normal = run_one(true, 0.0);
  report.control_map_masked = run_one(true, cfg.coldstart.fraction);
  return report;
}

}  // namespace glorank
