#ifndef GLORANK_GRAPH_HPP_
#define GLORANK_GRAPH_HPP_

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "glorank/errors.hpp"

namespace glorank {

using Mat = Eigen::MatrixXd;

// Reverse-mode tape over dense matrices. Nodes are created in topological
// order by construction; backward() walks them in reverse. Gradients are
// dense and allocated lazily when a backward pass runs.
class Tape {
 public:
  using Ref = int;

  Ref leaf(Mat value, bool requires_grad = false);

  const Mat& value(Ref r) const { return nodes_[static_cast<std::size_t>(r)].value; }
  const Mat& grad(Ref r) const;
  bool has_grad(Ref r) const { return nodes_[static_cast<std::size_t>(r)].grad_ready; }

  Ref add(Ref a, Ref b);
  Ref sub(Ref a, Ref b);
  Ref scale(Ref a, double s);
  Ref add_scalar(Ref a, double s);
  Ref hadamard(Ref a, Ref b);
  Ref matmul(Ref a, Ref b);
  // y = x * W^T (+ b broadcast over rows); W is (out x in), b is (out x 1)
  Ref linear(Ref x, Ref w);
  Ref linear(Ref x, Ref w, Ref b);
  Ref embedding(Ref table, std::vector<int> ids);
  Ref layernorm(Ref x, Ref gamma, Ref beta, double eps = 1e-5);
  Ref gelu(Ref x);
  // fused multi-head attention; q_in and kv_in may be the same node
  Ref attention(Ref q_in, Ref kv_in, Ref wq, Ref wk, Ref wv, Ref wo, int n_heads, bool causal);
  Ref slice_rows(Ref x, int start, int n);
  Ref exp(Ref x);
  Ref clamp(Ref x, double lo, double hi);
  Ref minimum(Ref a, Ref b);
  // mean (or sum) token-level cross entropy of row-wise logits against targets
  Ref cross_entropy(Ref logits, std::vector<int> targets, bool mean_reduction);
  // per-row selected log-softmax with optional additive mask (e.g. -1e30 on
  // illegal tokens) and logit temperature; returns a (rows x 1) column
  Ref log_softmax_select(Ref logits, std::vector<int> targets, const Mat* additive_mask,
                         double temperature);
  Ref sum(Ref x);   // 1x1
  Ref mean(Ref x);  // 1x1
  // multiply by a constant mask (inverted dropout uses mask/keep_prob)
  Ref mul_const(Ref x, Mat mask);

  void backward(Ref loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct NodeData {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    bool grad_ready = false;
    std::function<void()> back;
  };

  Mat& g(Ref r);  // gradient accumulator, zero-initialized on first touch
  Ref push(Mat value, bool requires_grad, std::function<void()> back = nullptr);

  std::vector<NodeData> nodes_;
};

// Softmax over each row; numerically stable. Shared by tape ops and inference.
Mat softmax_rows(const Mat& x);
Mat log_softmax_rows(const Mat& x);

constexpr double kMaskNegInf = -1e30;

}  // namespace glorank

#endif  // GLORANK_GRAPH_HPP_
