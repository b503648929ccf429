#ifndef GLORANK_METRICS_HPP_
#define GLORANK_METRICS_HPP_

#include <cstdint>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace glorank {

class Corpus;
struct RankedList;

// List-wise metrics at cutoff K, binary relevance.
//   precision = hits / K
//   ndcg      = DCG / IDCG, binary gains, 1/log2(pos+1) discount,
//               IDCG truncated at min(K, total_relevant)
//   map       = sum of precision@i over hit ranks i <= K, / min(K, total_relevant)
//   f1        = harmonic mean of precision and recall (= hits / total_relevant)
// Lists with total_relevant == 0 score 0 on every metric.
struct MetricReport {
  double precision = 0.0;
  double ndcg = 0.0;
  double map = 0.0;
  double f1 = 0.0;
  int k = 0;

  double mean() const { return (precision + ndcg + map + f1) / 4.0; }
};

MetricReport metrics_at_k(const std::vector<std::int64_t>& items,
                          const std::unordered_map<std::int64_t, int>& relevance,
                          int k, int total_relevant);

// GRPO / evaluation reward: arithmetic mean of the four metrics.
double list_reward(const std::vector<std::int64_t>& items,
                   const std::unordered_map<std::int64_t, int>& relevance,
                   int k, int total_relevant);

// Mean of per-request reports.
MetricReport mean_report(const std::vector<MetricReport>& reports);

// Minimal synthetic preference simulator. Per-position click probability is
// sigmoid(a * <embedding, preference> + b) with a 1/log2(pos+1) position
// discount; the reward is the discounted click mass normalized to [0, 1].
double simulate_user_expected(const std::vector<std::int64_t>& items,
                              const Eigen::VectorXd& preference, const Corpus& corpus,
                              double a, double b);

double simulate_user_bernoulli(const std::vector<std::int64_t>& items,
                               const Eigen::VectorXd& preference, const Corpus& corpus,
                               double a, double b, std::uint64_t seed);

}  // namespace glorank

#endif  // GLORANK_METRICS_HPP_
