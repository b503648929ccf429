#include "glorank/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <unordered_set>

#include "glorank/jsonl.hpp"
#include "glorank/rng.hpp"

namespace glorank {

int RerankRequest::total_relevant() const {
  int n = 0;
  for (const auto& id : candidates) {
    auto it = relevance.find(id);
    if (it != relevance.end() && it->second > 0) ++n;
  }
  return n;
}

void validate_ranked_list(const RankedList& list, const RerankRequest& request) {
  std::unordered_set<std::int64_t> seen;
  std::unordered_set<std::int64_t> cand(request.candidates.begin(), request.candidates.end());
  for (const auto id : list.items) {
    if (!seen.insert(id).second)
      throw ConstraintError("ranked list contains duplicate item " + std::to_string(id));
    if (!cand.count(id))
      throw ConstraintError("ranked list item " + std::to_string(id) +
                            " is not a candidate of request " +
                            std::to_string(request.request_id));
  }
}

void Corpus::add_item(Item item) {
  if (index_.count(item.item_id))
    throw IntegrityError("duplicate item_id " + std::to_string(item.item_id));
  if (item.item_id < 0) throw IntegrityError("item_id must be >= 0");
  const int d = static_cast<int>(item.embedding.size());
  if (!items_.empty() && d != dim_)
    throw IntegrityError("embedding dimension mismatch for item " + std::to_string(item.item_id) +
                         ": got " + std::to_string(d) + ", corpus has " + std::to_string(dim_));
  for (int i = 0; i < d; ++i) {
    if (!std::isfinite(item.embedding[i]))
      throw IntegrityError("non-finite embedding component in item " +
                           std::to_string(item.item_id));
  }
  dim_ = d;
  index_.emplace(item.item_id, items_.size());
  items_.push_back(std::move(item));
}

const Item& Corpus::item(std::int64_t item_id) const {
  auto it = index_.find(item_id);
  if (it == index_.end())
    throw IntegrityError("unknown item_id " + std::to_string(item_id));
  return items_[it->second];
}

std::vector<std::int64_t> Corpus::sorted_ids() const {
  std::vector<std::int64_t> ids;
  ids.reserve(items_.size());
  for (const auto& it : items_) ids.push_back(it.item_id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

Corpus Corpus::load_jsonl(const std::string& path) {
  Corpus c;
  read_jsonl(path, [&](int lineno, const json& obj) {
    Item item;
    try {
      item.item_id = obj.at("item_id").get<std::int64_t>();
      const auto& emb = obj.at("embedding");
      item.embedding.resize(static_cast<Eigen::Index>(emb.size()));
      for (std::size_t i = 0; i < emb.size(); ++i)
        item.embedding[static_cast<Eigen::Index>(i)] = emb[i].get<double>();
      if (obj.contains("text")) item.text = obj["text"].get<std::string>();
    } catch (const json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    c.add_item(std::move(item));
  });
  return c;
}

void Corpus::save_jsonl(const std::string& path) const {
  JsonlWriter w(path);
  for (const auto& it : items_) {
    json obj;
    obj["item_id"] = it.item_id;
    json emb = json::array();
    for (Eigen::Index i = 0; i < it.embedding.size(); ++i) emb.push_back(it.embedding[i]);
    obj["embedding"] = std::move(emb);
    if (!it.text.empty()) obj["text"] = it.text;
    w.write(obj);
  }
}

SyntheticData generate_synthetic(std::uint64_t seed, int n_items, int n_users, int dim,
                                 int n_clusters) {
  if (n_items < 1 || n_users < 1 || dim < 1 || n_clusters < 1)
    throw ArgumentError("generate_synthetic: all counts must be >= 1");

  constexpr double kNoiseSigma = 0.12;
  constexpr double kPrefNoise = 0.10;
  constexpr double kAffinityScale = 6.0;
  constexpr double kAffinityBias = -3.0;
  constexpr int kInteractionsPerUser = 60;

  Rng rng(seed);
  SyntheticData out;

  // unit-norm cluster centers
  std::vector<Eigen::VectorXd> centers(n_clusters);
  for (auto& c : centers) {
    c.resize(dim);
    for (int i = 0; i < dim; ++i) c[i] = rng.normal();
    const double n = c.norm();
    if (n > 0) c /= n;
  }

  std::vector<int> item_cluster(n_items);
  for (int i = 0; i < n_items; ++i) {
    item_cluster[i] = i % n_clusters;
    Item item;
    item.item_id = i;
    item.embedding = centers[item_cluster[i]];
    for (int d = 0; d < dim; ++d) item.embedding[d] += kNoiseSigma * rng.normal();
    out.corpus.add_item(std::move(item));
  }

  std::vector<std::vector<std::int64_t>> cluster_members(n_clusters);
  for (int i = 0; i < n_items; ++i) cluster_members[item_cluster[i]].push_back(i);

  for (int u = 0; u < n_users; ++u) {
    const int pref_cluster = u % n_clusters;
    Eigen::VectorXd pref = centers[pref_cluster];
    for (int d = 0; d < dim; ++d) pref[d] += kPrefNoise * rng.normal();

    const int want = std::min(kInteractionsPerUser, n_items);
    std::set<std::int64_t> chosen;
    int attempts = 0;
    while (static_cast<int>(chosen.size()) < want && attempts < want * 20) {
      ++attempts;
      std::int64_t id;
      if (rng.uniform() < 0.5 && !cluster_members[pref_cluster].empty()) {
        const auto& pool = cluster_members[pref_cluster];
        id = pool[rng.uniform_int(pool.size())];
      } else {
        id = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(n_items)));
      }
      chosen.insert(id);
    }
    // std::set iteration is ordered; draw timestamps over a shuffled copy
    std::vector<std::int64_t> items(chosen.begin(), chosen.end());
    rng.shuffle(items);
    std::int64_t ts = 0;
    for (const auto id : items) {
      const double affinity = out.corpus.item(id).embedding.dot(pref);
      const double p = 1.0 / (1.0 + std::exp(-(kAffinityScale * affinity + kAffinityBias)));
      Interaction inter;
      inter.user_id = u;
      inter.item_id = id;
      inter.ts = ts++;
      inter.label = rng.uniform() < p ? 1 : 0;
      out.interactions.push_back(inter);
    }
  }
  return out;
}

RequestBuildResult build_requests(const Corpus& corpus,
                                  const std::vector<Interaction>& interactions, int n_candidates,
                                  int k, std::uint64_t seed) {
  if (k < 1 || n_candidates < k) throw ArgumentError("build_requests: need N >= K >= 1");
  if (static_cast<std::size_t>(n_candidates) > corpus.size())
    throw ArgumentError("build_requests: N exceeds corpus size");

  // group by user, sorted by (user, ts)
  std::map<std::int64_t, std::vector<Interaction>> by_user;
  for (const auto& it : interactions) {
    if (!corpus.contains(it.item_id))
      throw IntegrityError("interaction references unknown item " + std::to_string(it.item_id));
    by_user[it.user_id].push_back(it);
  }

  RequestBuildResult out;
  Rng master(seed);
  std::int64_t next_request_id = 0;
  for (auto& [user_id, inters] : by_user) {
    std::stable_sort(inters.begin(), inters.end(),
                     [](const Interaction& a, const Interaction& b) { return a.ts < b.ts; });
    std::vector<std::int64_t> positives;
    std::unordered_set<std::int64_t> interacted;
    for (const auto& it : inters) {
      interacted.insert(it.item_id);
      if (it.label > 0) positives.push_back(it.item_id);
    }
    if (positives.empty()) {
      ++out.skipped_users;
      continue;
    }

    // hold out the most recent positives as relevant candidates
    int n_holdout = static_cast<int>(std::lround(0.3 * static_cast<double>(positives.size())));
    n_holdout = std::max(1, std::min({n_holdout, k, static_cast<int>(positives.size())}));
    const int n_history = static_cast<int>(positives.size()) - n_holdout;

    RerankRequest req;
    req.request_id = next_request_id++;
    req.user_id = user_id;
    req.history.assign(positives.begin(), positives.begin() + n_history);
    std::vector<std::int64_t> holdout(positives.begin() + n_history, positives.end());

    Rng rng = master.fork(static_cast<std::uint64_t>(user_id) + 1);
    std::vector<std::int64_t> cands = holdout;
    std::unordered_set<std::int64_t> in_cands(cands.begin(), cands.end());

    // uniform negatives from non-interacted items
    const auto ids = corpus.sorted_ids();
    std::vector<std::int64_t> pool;
    pool.reserve(ids.size());
    for (const auto id : ids)
      if (!interacted.count(id)) pool.push_back(id);
    std::size_t pi = 0;
    rng.shuffle(pool);
    while (static_cast<int>(cands.size()) < n_candidates && pi < pool.size()) {
      const auto id = pool[pi++];
      if (in_cands.insert(id).second) cands.push_back(id);
    }
    // corpus may be too interacted to fill with true negatives; fall back to
    // any unused item so the request keeps its contracted size
    if (static_cast<int>(cands.size()) < n_candidates) {
      for (const auto id : ids) {
        if (static_cast<int>(cands.size()) >= n_candidates) break;
        if (in_cands.insert(id).second) cands.push_back(id);
      }
    }
    if (static_cast<int>(cands.size()) < n_candidates) {
      ++out.skipped_users;
      continue;
    }
    rng.shuffle(cands);
    req.candidates = std::move(cands);
    for (const auto id : req.candidates)
      req.relevance[id] =
          std::find(holdout.begin(), holdout.end(), id) != holdout.end() ? 1 : 0;
    out.requests.push_back(std::move(req));
  }
  return out;
}

MaskSplit mask_items(const Corpus& corpus, const std::vector<Interaction>& interactions,
                     double fraction, std::uint64_t seed) {
  if (fraction < 0.0 || fraction > 1.0)
    throw ArgumentError("mask_items: fraction must lie in [0,1]");
  MaskSplit out;
  const auto ids = corpus.sorted_ids();
  const int n_mask = static_cast<int>(std::lround(fraction * static_cast<double>(ids.size())));
  Rng rng(seed);
  const auto pick = rng.k_permutation(static_cast<int>(ids.size()), n_mask);
  std::unordered_set<std::int64_t> masked;
  for (const int idx : pick) masked.insert(ids[idx]);
  out.masked_items.assign(masked.begin(), masked.end());
  std::sort(out.masked_items.begin(), out.masked_items.end());
  for (const auto& it : interactions) {
    if (!masked.count(it.item_id)) out.train.push_back(it);
    out.test.push_back(it);
  }
  return out;
}

void save_interactions_jsonl(const std::string& path,
                             const std::vector<Interaction>& interactions) {
  JsonlWriter w(path);
  for (const auto& it : interactions) {
    w.write(json{{"user_id", it.user_id}, {"item_id", it.item_id}, {"ts", it.ts},
                 {"label", it.label}});
  }
}

std::vector<Interaction> load_interactions_jsonl(const std::string& path) {
  std::vector<Interaction> out;
  read_jsonl(path, [&](int lineno, const json& obj) {
    try {
      Interaction it;
      it.user_id = obj.at("user_id").get<std::int64_t>();
      it.item_id = obj.at("item_id").get<std::int64_t>();
      it.ts = obj.at("ts").get<std::int64_t>();
      it.label = obj.at("label").get<int>();
      if (it.label != 0 && it.label != 1)
        throw ParseError(path + ":" + std::to_string(lineno) + ": label must be 0 or 1");
      out.push_back(it);
    } catch (const json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  });
  return out;
}

void save_requests_jsonl(const std::string& path, const std::vector<RerankRequest>& requests) {
  JsonlWriter w(path);
  for (const auto& r : requests) {
    json rel = json::object();
    for (const auto id : r.candidates) rel[std::to_string(id)] = r.relevance.at(id);
    w.write(json{{"request_id", r.request_id},
                 {"user_id", r.user_id},
                 {"history", r.history},
                 {"candidates", r.candidates},
                 {"relevance", std::move(rel)}});
  }
}

std::vector<RerankRequest> load_requests_jsonl(const std::string& path) {
  std::vector<RerankRequest> out;
  read_jsonl(path, [&](int lineno, const json& obj) {
    try {
      RerankRequest r;
      r.request_id = obj.at("request_id").get<std::int64_t>();
      r.user_id = obj.at("user_id").get<std::int64_t>();
      r.history = obj.at("history").get<std::vector<std::int64_t>>();
      r.candidates = obj.at("candidates").get<std::vector<std::int64_t>>();
      for (const auto& [key, val] : obj.at("relevance").items())
        r.relevance[std::stoll(key)] = val.get<int>();
      std::unordered_set<std::int64_t> seen;
      for (const auto id : r.candidates)
        if (!seen.insert(id).second)
          throw ParseError(path + ":" + std::to_string(lineno) + ": duplicate candidate " +
                           std::to_string(id));
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  });
  return out;
}

}  // namespace glorank
