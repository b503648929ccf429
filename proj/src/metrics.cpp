#include "glorank/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "glorank/corpus.hpp"
#include "glorank/errors.hpp"
#include "glorank/rng.hpp"

namespace glorank {

namespace {

double log2_discount(int rank) { return 1.0 / std::log2(static_cast<double>(rank) + 1.0); }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

MetricReport metrics_at_k(const std::vector<std::int64_t>& items,
                          const std::unordered_map<std::int64_t, int>& relevance, int k,
                          int total_relevant) {
  if (static_cast<int>(items.size()) < k)
    throw ArgumentError("metrics_at_k: list shorter than K");
  MetricReport r;
  r.k = k;
  if (total_relevant <= 0) return r;  // all metrics defined as 0

  int hits = 0;
  double dcg = 0.0;
  double ap_sum = 0.0;
  for (int i = 0; i < k; ++i) {
    auto it = relevance.find(items[i]);
    const bool rel = it != relevance.end() && it->second > 0;
    if (rel) {
      ++hits;
      dcg += log2_discount(i + 1);
      ap_sum += static_cast<double>(hits) / static_cast<double>(i + 1);
    }
  }

  const int ideal_hits = std::min(k, total_relevant);
  double idcg = 0.0;
  for (int i = 0; i < ideal_hits; ++i) idcg += log2_discount(i + 1);

  r.precision = static_cast<double>(hits) / static_cast<double>(k);
  r.ndcg = idcg > 0.0 ? dcg / idcg : 0.0;
  r.map = ap_sum / static_cast<double>(ideal_hits);
  const double recall = static_cast<double>(hits) / static_cast<double>(total_relevant);
  r.f1 = (r.precision + recall) > 0.0 ? 2.0 * r.precision * recall / (r.precision + recall) : 0.0;
  return r;
}

double list_reward(const std::vector<std::int64_t>& items,
                   const std::unordered_map<std::int64_t, int>& relevance, int k,
                   int total_relevant) {
  return metrics_at_k(items, relevance, k, total_relevant).mean();
}

MetricReport mean_report(const std::vector<MetricReport>& reports) {
  MetricReport m;
  if (reports.empty()) return m;
  for (const auto& r : reports) {
    m.precision += r.precision;
    m.ndcg += r.ndcg;
    m.map += r.map;
    m.f1 += r.f1;
  }
  const double n = static_cast<double>(reports.size());
  m.precision /= n;
  m.ndcg /= n;
  m.map /= n;
  m.f1 /= n;
  m.k = reports.front().k;
  return m;
}

double simulate_user_expected(const std::vector<std::int64_t>& items,
                              const Eigen::VectorXd& preference, const Corpus& corpus, double a,
                              double b) {
  double mass = 0.0;
  double max_mass = 0.0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Item& it = corpus.item(items[i]);
    if (it.embedding.size() != preference.size())
      throw ArgumentError("simulate_user: preference dimension mismatch");
    const double p = sigmoid(a * it.embedding.dot(preference) + b);
    const double disc = log2_discount(static_cast<int>(i) + 1);
    mass += p * disc;
    max_mass += disc;
  }
  return max_mass > 0.0 ? mass / max_mass : 0.0;
}

double simulate_user_bernoulli(const std::vector<std::int64_t>& items,
                               const Eigen::VectorXd& preference, const Corpus& corpus, double a,
                               double b, std::uint64_t seed) {
  Rng rng(seed);
  double mass = 0.0;
  double max_mass = 0.0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Item& it = corpus.item(items[i]);
    if (it.embedding.size() != preference.size())
      throw ArgumentError("simulate_user: preference dimension mismatch");
    const double p = sigmoid(a * it.embedding.dot(preference) + b);
    const double disc = log2_discount(static_cast<int>(i) + 1);
    if (rng.uniform() < p) mass += disc;
    max_mass += disc;
  }
  return max_mass > 0.0 ? mass / max_mass : 0.0;
}

}  // namespace glorank
