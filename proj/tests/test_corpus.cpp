#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "glorank/corpus.hpp"
#include "glorank/jsonl.hpp"
#include "glorank/rng.hpp"

using namespace glorank;

namespace {

std::string temp_file(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

void write_file(const std::string& path, const std::string& contents) {
  std::ofstream out(path);
  out << contents;
}

// naive Lloyd k-means, best of several random restarts by SSE; independent of
// the library's quantizer on purpose
std::vector<int> oracle_kmeans_assign(const std::vector<Eigen::VectorXd>& points, int k,
                                      std::uint64_t seed) {
  const int n = static_cast<int>(points.size());
  std::vector<int> best_assign(n, 0);
  double best_sse = 1e300;
  for (int restart = 0; restart < 8; ++restart) {
    Rng rng(seed + static_cast<std::uint64_t>(restart));
    std::vector<Eigen::VectorXd> centers;
    for (int c = 0; c < k; ++c) centers.push_back(points[rng.uniform_int(n)]);
    std::vector<int> assign(n, 0);
    for (int it = 0; it < 40; ++it) {
      for (int i = 0; i < n; ++i) {
        double best = 1e300;
        for (int c = 0; c < k; ++c) {
          const double d = (points[i] - centers[c]).squaredNorm();
          if (d < best) {
            best = d;
            assign[i] = c;
          }
        }
      }
      std::vector<Eigen::VectorXd> sums(k, Eigen::VectorXd::Zero(points[0].size()));
      std::vector<int> counts(k, 0);
      for (int i = 0; i < n; ++i) {
        sums[assign[i]] += points[i];
        ++counts[assign[i]];
      }
      for (int c = 0; c < k; ++c)
        if (counts[c] > 0) centers[c] = sums[c] / counts[c];
    }
    double sse = 0;
    for (int i = 0; i < n; ++i) sse += (points[i] - centers[assign[i]]).squaredNorm();
    if (sse < best_sse) {
      best_sse = sse;
      best_assign = assign;
    }
  }
  return best_assign;
}

}  // namespace

TEST_CASE("load_corpus: happy path, dims and ids validated, line numbers in errors") {
  const std::string path = temp_file("glorank_items_ok.jsonl");
  write_file(path,
             R"({"item_id": 0, "embedding": [1.0,0,0,0,0,0,0,0]}
{"item_id": 1, "embedding": [0,1.0,0,0,0,0,0,0], "text": "b"}
{"item_id": 2, "embedding": [0,0,1.0,0,0,0,0,0]}
)");
  const Corpus c = Corpus::load_jsonl(path);
  CHECK(c.size() == 3);
  CHECK(c.dim() == 8);

  const std::string bad_dims = temp_file("glorank_items_dims.jsonl");
  write_file(bad_dims,
             R"({"item_id": 0, "embedding": [1,2,3,4,5,6,7,8]}
{"item_id": 1, "embedding": [1,2,3,4,5,6,7,8,9]}
)");
  CHECK_THROWS_AS(Corpus::load_jsonl(bad_dims), IntegrityError);

  const std::string dup = temp_file("glorank_items_dup.jsonl");
  write_file(dup,
             R"({"item_id": 5, "embedding": [1,2]}
{"item_id": 5, "embedding": [3,4]}
)");
  CHECK_THROWS_AS(Corpus::load_jsonl(dup), IntegrityError);

  const std::string malformed = temp_file("glorank_items_bad.jsonl");
  write_file(malformed, "{\"item_id\": 0, \"embedding\": [1,2]}\nnot json at all\n");
  try {
    Corpus::load_jsonl(malformed);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find(":2") != std::string::npos);  // line number surfaced
  }

  const std::string empty = temp_file("glorank_items_empty.jsonl");
  write_file(empty, "");
  const Corpus e = Corpus::load_jsonl(empty);
  CHECK(e.size() == 0);
  CHECK(e.dim() == 0);  // D undefined until the first item
}

TEST_CASE("generate_synthetic is deterministic and clustered") {
  const SyntheticData a = generate_synthetic(7, 120, 10, 16, 4);
  const SyntheticData b = generate_synthetic(7, 120, 10, 16, 4);
  REQUIRE(a.corpus.size() == b.corpus.size());
  for (const auto& item : a.corpus.items()) {
    CHECK(item.embedding == b.corpus.item(item.item_id).embedding);
  }
  REQUIRE(a.interactions.size() == b.interactions.size());
  for (std::size_t i = 0; i < a.interactions.size(); ++i) {
    CHECK(a.interactions[i].user_id == b.interactions[i].user_id);
    CHECK(a.interactions[i].item_id == b.interactions[i].item_id);
    CHECK(a.interactions[i].ts == b.interactions[i].ts);
    CHECK(a.interactions[i].label == b.interactions[i].label);
  }

  // single cluster: everything within the noise ball of one center
  const SyntheticData one = generate_synthetic(3, 60, 2, 8, 1);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(8);
  for (const auto& item : one.corpus.items()) mean += item.embedding;
  mean /= static_cast<double>(one.corpus.size());
  for (const auto& item : one.corpus.items())
    CHECK((item.embedding - mean).norm() < 0.12 * (std::sqrt(8.0) + 6.0));
}

TEST_CASE("synthetic clusters recoverable by independent k-means at >= 90% purity") {
  const int n_items = 1000, n_clusters = 16;
  const SyntheticData data = generate_synthetic(41, n_items, 4, 32, n_clusters);
  std::vector<Eigen::VectorXd> points;
  for (const auto& item : data.corpus.items()) points.push_back(item.embedding);
  const std::vector<int> assign = oracle_kmeans_assign(points, n_clusters, 5);

  // purity against the generator's construction (cluster = item_id mod n_clusters)
  std::map<int, std::map<int, int>> counts;
  for (int i = 0; i < n_items; ++i) counts[assign[i]][i % n_clusters]++;
  int pure = 0;
  for (const auto& [c, hist] : counts) {
    int best = 0;
    for (const auto& [truth, n] : hist) best = std::max(best, n);
    pure += best;
  }
  CHECK(static_cast<double>(pure) / n_items >= 0.9);
}

TEST_CASE("build_requests: shapes, determinism, invariants") {
  const SyntheticData data = generate_synthetic(11, 300, 20, 16, 4);
  const auto built = build_requests(data.corpus, data.interactions, 50, 6, 1234);
  CHECK(built.requests.size() + built.skipped_users == 20);
  CHECK(built.requests.size() >= 18);  // nearly every synthetic user has positives
  for (const auto& req : built.requests) {
    CHECK(req.candidates.size() == 50);
    std::set<std::int64_t> uniq(req.candidates.begin(), req.candidates.end());
    CHECK(uniq.size() == 50);
    CHECK(req.total_relevant() >= 1);
    CHECK(req.total_relevant() <= 6);
    // every positive is a candidate, relevance covers all candidates
    for (const auto id : req.candidates) CHECK(req.relevance.count(id) == 1);
    for (const auto id : req.history) CHECK(data.corpus.contains(id));
  }

  const auto again = build_requests(data.corpus, data.interactions, 50, 6, 1234);
  REQUIRE(again.requests.size() == built.requests.size());
  for (std::size_t i = 0; i < again.requests.size(); ++i)
    CHECK(again.requests[i].candidates == built.requests[i].candidates);

  // N == K boundary: candidate set is exactly the target size
  const auto tight = build_requests(data.corpus, data.interactions, 6, 6, 99);
  for (const auto& req : tight.requests) CHECK(req.candidates.size() == 6);
}

TEST_CASE("mask_items: arithmetic, boundaries, invariants") {
  const SyntheticData data = generate_synthetic(17, 200, 10, 8, 4);
  const MaskSplit split = mask_items(data.corpus, data.interactions, 0.05, 5);
  CHECK(split.masked_items.size() == 10);  // round(0.05 * 200)
  std::set<std::int64_t> masked(split.masked_items.begin(), split.masked_items.end());
  for (const auto& it : split.train) CHECK(masked.count(it.item_id) == 0);
  CHECK(split.test.size() == data.interactions.size());

  const MaskSplit zero = mask_items(data.corpus, data.interactions, 0.0, 5);
  CHECK(zero.masked_items.empty());
  CHECK(zero.train.size() == data.interactions.size());

  const MaskSplit all = mask_items(data.corpus, data.interactions, 1.0, 5);
  CHECK(all.train.empty());
  CHECK(all.masked_items.size() == 200);

  CHECK_THROWS_AS(mask_items(data.corpus, data.interactions, 1.5, 5), ArgumentError);
}

TEST_CASE("ranked list validation") {
  RerankRequest req;
  req.candidates = {1, 2, 3};
  RankedList ok;
  ok.items = {3, 1};
  validate_ranked_list(ok, req);

  RankedList dup;
  dup.items = {1, 1};
  CHECK_THROWS_AS(validate_ranked_list(dup, req), ConstraintError);

  RankedList outside;
  outside.items = {1, 9};
  CHECK_THROWS_AS(validate_ranked_list(outside, req), ConstraintError);
}

TEST_CASE("request jsonl round trip preserves candidate order") {
  const SyntheticData data = generate_synthetic(23, 100, 6, 8, 4);
  const auto built = build_requests(data.corpus, data.interactions, 12, 4, 77);
  REQUIRE(!built.requests.empty());
  const std::string path = temp_file("glorank_requests.jsonl");
  save_requests_jsonl(path, built.requests);
  const auto loaded = load_requests_jsonl(path);
  REQUIRE(loaded.size() == built.requests.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    CHECK(loaded[i].request_id == built.requests[i].request_id);
    CHECK(loaded[i].candidates == built.requests[i].candidates);
    CHECK(loaded[i].history == built.requests[i].history);
    CHECK(loaded[i].relevance == built.requests[i].relevance);
  }
}
