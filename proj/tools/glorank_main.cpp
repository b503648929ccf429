#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "glorank/config.hpp"
#include "glorank/harness.hpp"
#include "glorank/variance.hpp"

namespace fs = std::filesystem;
using namespace glorank;

namespace {

json load_config_json(const std::string& path, const std::vector<std::string>& overrides) {
  json j = path.empty() ? json::object() : load_json_file(path);
  return apply_overrides(std::move(j), overrides);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << text;
}

std::string curve_csv(const std::vector<CurvePoint>& curve) {
  std::ostringstream os;
  os.precision(17);
  os << "step,value\n";
  for (const auto& p : curve) os << p.step << ',' << p.value << '\n';
  return os.str();
}

struct StageIo {
  std::vector<std::pair<std::string, std::string>> inputs;
  std::vector<std::string> outputs;
  void in(const std::string& path) { inputs.emplace_back(path, file_hash(path)); }
  void out(const std::string& path) { outputs.push_back(path); }
};

void require_input(const std::string& path, const std::string& producer) {
  if (path.empty() || !fs::exists(path))
    throw MissingInputError("required input '" + path + "' is missing; produce it with `glorank " +
                            producer + "` first");
}

int run_gen_data(const ExperimentConfig& cfg, const json& cfg_json, const std::string& run_root,
                 bool force) {
  const std::string dir = create_run_dir(run_root, "gen-data", cfg_json, force);
  if (dir.empty()) {
    std::cout << "gen-data: identical config already ran (use --force to repeat)\n";
    return 0;
  }
  const Workbench wb = build_workbench(cfg);
  StageIo io;
  wb.corpus.save_jsonl(dir + "/items.jsonl");
  io.out(dir + "/items.jsonl");
  save_interactions_jsonl(dir + "/interactions.jsonl", wb.interactions);
  io.out(dir + "/interactions.jsonl");
  save_requests_jsonl(dir + "/requests_train.jsonl", wb.train_requests);
  io.out(dir + "/requests_train.jsonl");
  save_requests_jsonl(dir + "/requests_heldout.jsonl", wb.heldout_requests);
  io.out(dir + "/requests_heldout.jsonl");
  write_manifest(dir, "gen-data", cfg_json, io.inputs, io.outputs);
  std::cout << "gen-data: " << wb.corpus.size() << " items, " << wb.interactions.size()
            << " interactions, " << wb.train_requests.size() << " train / "
            << wb.heldout_requests.size() << " held-out requests -> " << dir << "\n";
  return 0;
}

int run_tokenize(const ExperimentConfig& cfg, const json& cfg_json, const std::string& run_root,
                 bool force, const std::string& items_path) {
  require_input(items_path, "gen-data");
  const std::string dir = create_run_dir(run_root, "tokenize", cfg_json, force);
  if (dir.empty()) {
    std::cout << "tokenize: identical config already ran (use --force to repeat)\n";
    return 0;
  }
  StageIo io;
  io.in(items_path);
  const Corpus corpus = Corpus::load_jsonl(items_path);
  const RqCodebooks cb = fit_rq_kmeans(corpus, cfg.tokenizer.m_levels, cfg.tokenizer.codebook_size,
                                       cfg.tokenizer.kmeans_iters, cfg.seed + 101);
  const SidTable sids = assign_sids(corpus, cb);
  cb.save_json(dir + "/codebooks.json");
  io.out(dir + "/codebooks.json");
  sids.save_jsonl(dir + "/sid_table.jsonl");
  io.out(dir + "/sid_table.jsonl");
  write_manifest(dir, "tokenize", cfg_json, io.inputs, io.outputs);
  std::cout << "tokenize: M=" << cb.num_levels() << " codebook_size=" << cb.codebook_size
            << " items=" << sids.size() << " collisions=" << (sids.has_collisions() ? "yes" : "no")
            << " -> " << dir << "\n";
  for (const auto& level : cb.levels)
    std::cout << "  level " << level.level << " mean_sq_residual " << level.mean_sq_residual
              << "\n";
  return 0;
}

int run_pretrain(const ExperimentConfig& cfg, const json& cfg_json, const std::string& run_root,
                 bool force, const std::string& requests_path, const std::string& sids_path) {
  require_input(requests_path, "gen-data");
  require_input(sids_path, "tokenize");
  const std::string dir = create_run_dir(run_root, "pretrain", cfg_json, force);
  if (dir.empty()) {
    std::cout << "pretrain: identical config already ran (use --force to repeat)\n";
    return 0;
  }
  StageIo io;
  io.in(requests_path);
  io.in(sids_path);

  std::vector<RerankRequest> requests = load_requests_jsonl(requests_path);
  if (cfg.pretrain.max_requests > 0 &&
      static_cast<int>(requests.size()) > cfg.pretrain.max_requests)
    requests.resize(static_cast<std::size_t>(cfg.pretrain.max_requests));
  const SidTable sids = SidTable::load_jsonl(sids_path);
  const TokenVocabulary vocab = TokenVocabulary::for_table(sids, cfg.tokenizer.codebook_size);

  const ModelConfig mc = derive_model_config(cfg, vocab, false);
  Parameters params = Parameters::init(mc, cfg.seed + 303);

  const auto targets = build_pretrain_targets(requests, sids, vocab, cfg.data.k,
                                              cfg.pretrain.num_sampled_lists,
                                              proxy_scorer_from_string(cfg.pretrain.scorer),
                                              cfg.seed + 404);
  PretrainOptions opts;
  opts.epochs = cfg.pretrain.epochs;
  opts.lr = cfg.pretrain.lr;
  opts.weight_decay = cfg.pretrain.weight_decay;
  opts.history_cap = cfg.data.history_cap;
  opts.reshuffle_candidates = cfg.pretrain.reshuffle_candidates;
  opts.seed = cfg.seed + 505;
  const PretrainResult res = pretrain(params, requests, targets, sids, vocab, opts);

  Checkpoint ckpt;
  ckpt.params = std::move(params);
  ckpt.step = res.steps;
  ckpt.rng_state = Rng(cfg.seed).serialize();
  save_checkpoint(dir + "/checkpoint.bin", ckpt);
  io.out(dir + "/checkpoint.bin");
  write_text(dir + "/loss_curve.csv", curve_csv(res.loss_curve));
  io.out(dir + "/loss_curve.csv");
  save_json_file(dir + "/config.json", cfg_json);
  io.out(dir + "/config.json");
  write_manifest(dir, "pretrain", cfg_json, io.inputs, io.outputs);
  const double acc = token_accuracy(ckpt.params, requests, targets, sids, vocab,
                                    cfg.data.history_cap);
  std::cout << "pretrain: " << res.steps << " steps, final loss "
            << (res.loss_curve.empty() ? 0.0 : res.loss_curve.back().value)
            << ", train token accuracy " << acc << " -> " << dir << "\n";
  return 0;
}

int run_posttrain(const ExperimentConfig& cfg, const json& cfg_json, const std::string& run_root,
                  bool force, const std::string& checkpoint_path,
                  const std::string& requests_path, const std::string& sids_path,
                  bool allow_random) {
  require_input(requests_path, "gen-data");
  require_input(sids_path, "tokenize");
  if (!allow_random) require_input(checkpoint_path, "pretrain");
  const std::string dir = create_run_dir(run_root, "posttrain", cfg_json, force);
  if (dir.empty()) {
    std::cout << "posttrain: identical config already ran (use --force to repeat)\n";
    return 0;
  }
  StageIo io;
  io.in(requests_path);
  io.in(sids_path);

  std::vector<RerankRequest> requests = load_requests_jsonl(requests_path);
  if (cfg.posttrain.max_requests > 0 &&
      static_cast<int>(requests.size()) > cfg.posttrain.max_requests)
    requests.resize(static_cast<std::size_t>(cfg.posttrain.max_requests));

  const SidTable sids = SidTable::load_jsonl(sids_path);
  const TokenVocabulary vocab = TokenVocabulary::for_table(sids, cfg.tokenizer.codebook_size);

  Parameters params = [&] {
    if (!checkpoint_path.empty() && fs::exists(checkpoint_path)) {
      io.in(checkpoint_path);
      return load_checkpoint(checkpoint_path).params;
    }
    // --allow-random: the w/o-pretraining ablation starts from scratch
    return Parameters::init(derive_model_config(cfg, vocab, false), cfg.seed + 303);
  }();

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
  opts.grpo.seed = cfg.seed + 606;
  opts.steps = cfg.posttrain.steps;
  opts.eval_every = cfg.posttrain.eval_every;
  const PosttrainResult res = posttrain(params, requests, sids, vocab, opts, nullptr);

  Checkpoint ckpt;
  ckpt.params = std::move(params);
  ckpt.step = opts.steps;
  ckpt.rng_state = Rng(cfg.seed).serialize();
  save_checkpoint(dir + "/checkpoint.bin", ckpt);
  io.out(dir + "/checkpoint.bin");
  write_text(dir + "/reward_curve.csv", curve_csv(res.reward_curve));
  io.out(dir + "/reward_curve.csv");
  save_json_file(dir + "/config.json", cfg_json);
  io.out(dir + "/config.json");
  write_manifest(dir, "posttrain", cfg_json, io.inputs, io.outputs);
  std::cout << "posttrain: " << opts.steps << " steps, final batch reward "
            << (res.reward_curve.empty() ? 0.0 : res.reward_curve.back().value) << " -> " << dir
            << "\n";
  return 0;
}

int run_decode(const ExperimentConfig& cfg, const json& cfg_json, const std::string& run_root,
               bool force, const std::string& checkpoint_path, const std::string& requests_path,
               const std::string& sids_path, bool dump_trie) {
  require_input(checkpoint_path, "pretrain");
  require_input(requests_path, "gen-data");
  require_input(sids_path, "tokenize");
  const std::string dir = create_run_dir(run_root, "decode", cfg_json, force);
  if (dir.empty()) {
    std::cout << "decode: identical config already ran (use --force to repeat)\n";
    return 0;
  }
  StageIo io;
  io.in(checkpoint_path);
  io.in(requests_path);
  io.in(sids_path);

  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  const std::vector<RerankRequest> requests = load_requests_jsonl(requests_path);
  const SidTable sids = SidTable::load_jsonl(sids_path);
  const TokenVocabulary vocab = TokenVocabulary::for_table(sids, cfg.tokenizer.codebook_size);
  const Reranker ranker(ckpt.params, sids, vocab, cfg.data.history_cap);

  JsonlWriter out(dir + "/decode.jsonl");
  for (const auto& req : requests) {
    const auto lists = ranker.beam_search(req, cfg.decode.beam_size, cfg.data.k);
    for (const auto& d : lists) {
      out.write(json{{"request_id", req.request_id},
                     {"items", d.list.items},
                     {"logprob", d.logprob},
                     {"beam_rank", d.beam_rank}});
    }
    if (dump_trie) {
      const CandidateTrie trie = CandidateTrie::build(req.candidates, sids, vocab);
      write_text(dir + "/trie_" + std::to_string(req.request_id) + ".dot", trie.to_dot());
    }
  }
  out.close();
  io.out(dir + "/decode.jsonl");
  write_manifest(dir, "decode", cfg_json, io.inputs, io.outputs);
  std::cout << "decode: " << requests.size() << " requests, beam " << cfg.decode.beam_size
            << " -> " << dir << "\n";
  return 0;
}

int run_eval(const ExperimentConfig& cfg, const json& cfg_json, const std::string& run_root,
             bool force, const std::string& decode_path, const std::string& requests_path) {
  require_input(decode_path, "decode");
  require_input(requests_path, "gen-data");
  const std::string dir = create_run_dir(run_root, "eval", cfg_json, force);
  if (dir.empty()) {
    std::cout << "eval: identical config already ran (use --force to repeat)\n";
    return 0;
  }
  StageIo io;
  io.in(decode_path);
  io.in(requests_path);

  const std::vector<RerankRequest> requests = load_requests_jsonl(requests_path);
  std::map<std::int64_t, RankedList> top_lists;
  read_jsonl(decode_path, [&](int, const json& obj) {
    if (obj.at("beam_rank").get<int>() != 0) return;
    RankedList list;
    list.items = obj.at("items").get<std::vector<std::int64_t>>();
    top_lists[obj.at("request_id").get<std::int64_t>()] = std::move(list);
  });
  std::vector<RerankRequest> matched;
  std::vector<RankedList> lists;
  for (const auto& req : requests) {
    auto it = top_lists.find(req.request_id);
    if (it == top_lists.end())
      throw MissingInputError("eval: no decoded list for request " +
                              std::to_string(req.request_id));
    matched.push_back(req);
    lists.push_back(it->second);
  }
  const EvalSummary summary = evaluate_lists(matched, lists, cfg.data.k);
  write_text(dir + "/eval.csv", eval_csv(summary));
  io.out(dir + "/eval.csv");
  save_json_file(dir + "/summary.json", eval_summary_json(summary));
  io.out(dir + "/summary.json");
  write_manifest(dir, "eval", cfg_json, io.inputs, io.outputs);
  std::cout << "eval: " << eval_summary_json(summary).dump() << " -> " << dir << "\n";
  return 0;
}

int run_variance_lab(const json& cfg_json, const std::string& run_root, bool force, int n,
                     int samples, const std::string& mode, const std::string& labeling, int row) {
  const std::string dir = create_run_dir(run_root, "variance-lab", cfg_json, force);
  if (dir.empty()) {
    std::cout << "variance-lab: identical config already ran (use --force to repeat)\n";
    return 0;
  }
  VarianceReportOptions opts;
  opts.candidate_counts = {n};
  opts.n_samples = samples;
  const auto all_rows = variance_report(opts);
  std::vector<VarianceRow> rows;
  for (const auto& r : all_rows) {
    if (r.mode != mode) continue;
    if (r.labeling != labeling) continue;
    if (labeling == "local" && row != 0 && r.row_j != row) continue;
    rows.push_back(r);
  }
  const std::string csv = variance_rows_to_csv(rows);
  write_text(dir + "/variance.csv", csv);
  write_manifest(dir, "variance-lab", cfg_json, {}, {dir + "/variance.csv"});
  std::cout << csv;
  return 0;
}

int run_ablation_cmd(const ExperimentConfig& cfg, const json& cfg_json,
                     const std::string& run_root, bool force) {
  const std::string dir = create_run_dir(run_root, "ablation", cfg_json, force);
  if (dir.empty()) {
    std::cout << "ablation: identical config already ran (use --force to repeat)\n";
    return 0;
  }
  const auto rows = run_ablation(cfg);
  std::ostringstream os;
  os.precision(17);
  os << "variant,precision,ndcg,map,f1,mean_reward\n";
  for (const auto& r : rows)
    os << r.variant << ',' << r.metrics.precision << ',' << r.metrics.ndcg << ',' << r.metrics.map
       << ',' << r.metrics.f1 << ',' << r.mean_reward << '\n';
  write_text(dir + "/ablation.csv", os.str());
  write_manifest(dir, "ablation", cfg_json, {}, {dir + "/ablation.csv"});
  std::cout << os.str();
  return 0;
}

int run_coldstart_cmd(const ExperimentConfig& cfg, const json& cfg_json,
                      const std::string& run_root, bool force) {
  const std::string dir = create_run_dir(run_root, "coldstart", cfg_json, force);
  if (dir.empty()) {
    std::cout << "coldstart: identical config already ran (use --force to repeat)\n";
    return 0;
  }
  const ColdstartReport rep = run_coldstart(cfg);
  std::ostringstream seen, unseen;
  seen.precision(17);
  unseen.precision(17);
  seen << "model,map\nsid," << rep.sid_map_normal << "\natomic_control," << rep.control_map_normal
       << "\n";
  unseen << "model,map\nsid," << rep.sid_map_masked << "\natomic_control,"
         << rep.control_map_masked << "\n";
  write_text(dir + "/eval_normal.csv", seen.str());
  write_text(dir + "/eval_coldstart.csv", unseen.str());
  save_json_file(dir + "/delta_summary.json",
                 json{{"sid_map_normal", rep.sid_map_normal},
                      {"sid_map_masked", rep.sid_map_masked},
                      {"control_map_normal", rep.control_map_normal},
                      {"control_map_masked", rep.control_map_masked},
                      {"sid_relative_drop", rep.sid_relative_drop()},
                      {"control_relative_drop", rep.control_relative_drop()}});
  write_manifest(dir, "coldstart", cfg_json, {},
                 {dir + "/eval_normal.csv", dir + "/eval_coldstart.csv",
                  dir + "/delta_summary.json"});
  std::cout << "coldstart: sid drop " << rep.sid_relative_drop() << ", control drop "
            << rep.control_relative_drop() << " -> " << dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GloRank: generative list reranking over a global semantic-id action space"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string run_root = std::getenv("GLORANK_RUN_ROOT") ? std::getenv("GLORANK_RUN_ROOT")
                                                         : "runs";
  bool force = false;
  app.add_option("--config", config_path, "experiment config JSON");
  app.add_option("--set", overrides, "dotted overrides, e.g. --set posttrain.group_size=8");
  app.add_option("--run-root", run_root, "root directory for run outputs");
  app.add_flag("--force", force, "repeat a command even if this config already ran");

  // hyperparameter shortcuts routed through the same override machinery
  auto add_posttrain_flags = [&overrides](CLI::App* cmd) {
    const std::pair<const char*, const char*> flags[] = {
        {"--group-size", "posttrain.group_size"}, {"--temperature", "posttrain.temperature"},
        {"--beta", "posttrain.beta"},             {"--clip", "posttrain.clip"},
        {"--lr", "posttrain.lr"},                 {"--steps", "posttrain.steps"},
        {"--seed", "seed"}};
    for (const auto& [flag, path] : flags) {
      const std::string key = path;
      cmd->add_option_function<std::string>(
          flag, [&overrides, key](const std::string& v) { overrides.push_back(key + "=" + v); });
    }
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate or ingest the data universe");

  std::string items_path;
  CLI::App* tok = app.add_subcommand("tokenize", "fit residual k-means codebooks and assign SIDs");
  tok->add_option("--items", items_path, "items JSONL")->required();

  std::string requests_path, sids_path;
  CLI::App* pre = app.add_subcommand("pretrain", "supervised next-token pre-training");
  pre->add_option("--requests", requests_path, "training requests JSONL")->required();
  pre->add_option("--sids", sids_path, "sid table JSONL")->required();

  std::string checkpoint_path;
  bool allow_random = false;
  CLI::App* post = app.add_subcommand("posttrain", "GRPO post-training");
  post->add_option("--checkpoint", checkpoint_path, "pre-trained checkpoint");
  post->add_option("--requests", requests_path, "training requests JSONL")->required();
  post->add_option("--sids", sids_path, "sid table JSONL")->required();
  post->add_flag("--allow-random", allow_random, "start from random weights (ablation)");
  add_posttrain_flags(post);

  bool dump_trie = false;
  CLI::App* dec = app.add_subcommand("decode", "trie-constrained beam search");
  dec->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
  dec->add_option("--requests", requests_path, "requests JSONL")->required();
  dec->add_option("--sids", sids_path, "sid table JSONL")->required();
  dec->add_flag("--dump-trie", dump_trie, "write per-request trie dot files");

  std::string decode_path;
  CLI::App* ev = app.add_subcommand("eval", "score decoded lists");
  ev->add_option("--decode", decode_path, "decode JSONL")->required();
  ev->add_option("--requests", requests_path, "requests JSONL")->required();

  int vl_n = 4, vl_samples = 20000, vl_row = 1;
  std::string vl_mode = "absolute", vl_labeling = "local";
  CLI::App* vl = app.add_subcommand("variance-lab", "gradient variance measurements");
  vl->add_option("--n", vl_n, "candidate count");
  vl->add_option("--samples", vl_samples, "Monte-Carlo sample count");
  vl->add_option("--mode", vl_mode, "positional mode: absolute|setlike");
  vl->add_option("--labeling", vl_labeling, "labeling: local|global");
  vl->add_option("--row", vl_row, "output row (1-based) for local labeling");

  CLI::App* abl = app.add_subcommand("ablation", "train and compare pipeline variants");
  CLI::App* cold = app.add_subcommand("coldstart", "masked-item robustness comparison");

  CLI11_PARSE(app, argc, argv);

  try {
    const json cfg_json = load_config_json(config_path, overrides);
    const ExperimentConfig cfg = ExperimentConfig::from_json(cfg_json);
    if (gen->parsed()) return run_gen_data(cfg, cfg_json, run_root, force);
    if (tok->parsed()) return run_tokenize(cfg, cfg_json, run_root, force, items_path);
    if (pre->parsed())
      return run_pretrain(cfg, cfg_json, run_root, force, requests_path, sids_path);
    if (post->parsed())
      return run_posttrain(cfg, cfg_json, run_root, force, checkpoint_path, requests_path,
                           sids_path, allow_random);
    if (dec->parsed())
      return run_decode(cfg, cfg_json, run_root, force, checkpoint_path, requests_path, sids_path,
                        dump_trie);
    if (ev->parsed()) return run_eval(cfg, cfg_json, run_root, force, decode_path, requests_path);
    if (vl->parsed())
      return run_variance_lab(cfg_json, run_root, force, vl_n, vl_samples, vl_mode, vl_labeling,
                              vl_row);
    if (abl->parsed()) return run_ablation_cmd(cfg, cfg_json, run_root, force);
    if (cold->parsed()) return run_coldstart_cmd(cfg, cfg_json, run_root, force);
    std::cerr << "no command\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const MissingInputError& e) {
    std::cerr << "missing input: " << e.what() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
