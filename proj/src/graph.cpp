#include "glorank/graph.hpp"

#include <cmath>
#include <utility>

namespace glorank {

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Mat softmax_rows(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    Eigen::RowVectorXd e = (x.row(r).array() - m).exp();
    out.row(r) = e / e.sum();
  }
  return out;
}

Mat log_softmax_rows(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    const double lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  return out;
}

Tape::Ref Tape::push(Mat value, bool requires_grad, std::function<void()> back) {
  NodeData n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<Ref>(nodes_.size() - 1);
}

Tape::Ref Tape::leaf(Mat value, bool requires_grad) {
  return push(std::move(value), requires_grad);
}

Mat& Tape::g(Ref r) {
  NodeData& n = nodes_[static_cast<std::size_t>(r)];
  if (!n.grad_ready) {
    n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    n.grad_ready = true;
  }
  return n.grad;
}

const Mat& Tape::grad(Ref r) const {
  const NodeData& n = nodes_[static_cast<std::size_t>(r)];
  if (!n.grad_ready) throw StateError("grad: no backward pass has reached this node");
  return n.grad;
}

void Tape::backward(Ref loss) {
  const NodeData& ln = nodes_[static_cast<std::size_t>(loss)];
  if (ln.value.rows() != 1 || ln.value.cols() != 1)
    throw ArgumentError("backward: loss must be a 1x1 node");
  for (auto& n : nodes_) {
    n.grad_ready = false;
  }
  g(loss)(0, 0) = 1.0;
  for (Ref r = loss; r >= 0; --r) {
    NodeData& n = nodes_[static_cast<std::size_t>(r)];
    if (n.back && n.grad_ready) n.back();
  }
}

Tape::Ref Tape::add(Ref a, Ref b) {
  Mat v = value(a) + value(b);
  const Ref out = push(std::move(v), true);
  nodes_[out].back = [this, a, b, out] {
    g(a) += grad(out);
    g(b) += grad(out);
  };
  return out;
}

Tape::Ref Tape::sub(Ref a, Ref b) {
  Mat v = value(a) - value(b);
  const Ref out = push(std::move(v), true);
  nodes_[out].back = [this, a, b, out] {
    g(a) += grad(out);
    g(b) -= grad(out);
  };
  return out;
}

Tape::Ref Tape::scale(Ref a, double s) {
  Mat v = value(a) * s;
  const Ref out = push(std::move(v), true);
  nodes_[out].back = [this, a, s, out] { g(a) += grad(out) * s; };
  return out;
}

Tape::Ref Tape::add_scalar(Ref a, double s) {
  Mat v = value(a).array() + s;
  const Ref out = push(std::move(v), true);
  nodes_[out].back = [this, a, out] { g(a) += grad(out); };
  return out;
}

Tape::Ref Tape::hadamard(Ref a, Ref b) {
  Mat v = value(a).cwiseProduct(value(b));
  const Ref out = push(std::move(v), true);
  nodes_[out].back = [this, a, b, out] {
    g(a) += grad(out).cwiseProduct(value(b));
    g(b) += grad(out).cwiseProduct(value(a));
  };
  return out;
}

Tape::Ref Tape::matmul(Ref a, Ref b) {
  Mat v = value(a) * value(b);
  const Ref out = push(std::move(v), true);
  nodes_[out].back = [this, a, b, out] {
    g(a) += grad(out) * value(b).transpose();
    g(b) += value(a).transpose() * grad(out);
  };
  return out;
}

Tape::Ref Tape::linear(Ref x, Ref w) {
  Mat v = value(x) * value(w).transpose();
  const Ref out = push(std::move(v), true);
  nodes_[out].back = [this, x, w, out] {
    g(x) += grad(out) * value(w);
    g(w) += grad(out).transpose() * value(x);
  };
  return out;
}

Tape::Ref Tape::linear(Ref x, Ref w, Ref b) {
  Mat v = value(x) * value(w).transpose();
  v.rowwise() += value(b).col(0).transpose();
  const Ref out = push(std::move(v), true);
  nodes_[out].back = [this, x, w, b, out] {
    g(x) += grad(out) * value(w);
    g(w) += grad(out).transpose() * value(x);
    g(b).col(0) += grad(out).colwise().sum().transpose();
  };
  return out;
}

Tape::Ref Tape::embedding(Ref table, std::vector<int> ids) {
  const Mat& t = value(table);
  Mat v(static_cast<Eigen::Index>(ids.size()), t.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= t.rows())
      throw ArgumentError("embedding: id " + std::to_string(ids[i]) + " out of range");
    v.row(static_cast<Eigen::Index>(i)) = t.row(ids[i]);
  }
  const Ref out = push(std::move(v), true);
  nodes_[out].back = [this, table, ids = std::move(ids), out] {
    Mat& gt = g(table);
    const Mat& go = grad(out);
    for (std::size_t i = 0; i < ids.size(); ++i)
      gt.row(ids[i]) += go.row(static_cast<Eigen::Index>(i));
  };
  return out;
}

Tape::Ref Tape::layernorm(Ref x, Ref gamma, Ref beta, double eps) {
  const Mat& xv = value(x);
  const Eigen::Index rows = xv.rows(), cols = xv.cols();
  Mat xhat(rows, cols);
  Eigen::VectorXd inv_sigma(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[r] = is;
    xhat.row(r) = (xv.row(r).array() - mu) * is;
  }
  const Eigen::RowVectorXd gv = value(gamma).col(0).transpose();
  const Eigen::RowVectorXd bv = value(beta).col(0).transpose();
  Mat v = (xhat.array().rowwise() * gv.array()).rowwise() + bv.array();
  const Ref out = push(std::move(v), true);
  nodes_[out].back = [this, x, gamma, beta, out, xhat = std::move(xhat),
                      inv_sigma = std::move(inv_sigma)] {
    const Mat& go = grad(out);
    const Eigen::RowVectorXd gv = value(gamma).col(0).transpose();
    Mat& gx = g(x);
    Mat& gg = g(gamma);
    Mat& gb = g(beta);
    const Eigen::Index cols = go.cols();
    for (Eigen::Index r = 0; r < go.rows(); ++r) {
      const Eigen::RowVectorXd dy = go.row(r);
      const Eigen::RowVectorXd gdy = dy.cwiseProduct(gv);
      const double m1 = gdy.mean();
      const double m2 = gdy.cwiseProduct(xhat.row(r)).mean();
      gx.row(r) +=
          ((gdy.array() - m1) - xhat.row(r).array() * m2).matrix() * inv_sigma[r];
      gg.col(0) += dy.cwiseProduct(xhat.row(r)).transpose();
      gb.col(0) += dy.transpose();
      (void)cols;
    }
  };
  return out;
}

Tape::Ref Tape::gelu(Ref x) {
  const Mat& xv = value(x);
  Mat inner = kGeluC * (xv.array() + kGeluA * xv.array().cube());
  Mat t = inner.array().tanh();
  Mat v = 0.5 * xv.array() * (1.0 + t.array());
  const Ref out = push(std::move(v), true);
  nodes_[out].back = [this, x, out, t = std::move(t)] {
    const Mat& xv = value(x);
    const Mat sech2 = 1.0 - t.array().square();
    const Mat dinner = kGeluC * (1.0 + 3.0 * kGeluA * xv.array().square());
    const Mat dgelu =
        0.5 * (1.0 + t.array()) + 0.5 * xv.array() * sech2.array() * dinner.array();
    g(x) += grad(out).cwiseProduct(dgelu);
  };
  return out;
}

Tape::Ref Tape::attention(Ref q_in, Ref kv_in, Ref wq, Ref wk, Ref wv, Ref wo, int n_heads,
                          bool causal) {
  const Mat& xq = value(q_in);
  const Mat& xkv = value(kv_in);
  const Eigen::Index d_model = xq.cols();
  if (d_model % n_heads != 0)
    throw ArgumentError("attention: d_model not divisible by n_heads");
  const Eigen::Index dh = d_model / n_heads;
  const Eigen::Index lq = xq.rows();
  const Eigen::Index lkv = xkv.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat q = xq * value(wq).transpose();
  Mat k = xkv * value(wk).transpose();
  Mat v = xkv * value(wv).transpose();

  std::vector<Mat> probs(static_cast<std::size_t>(n_heads));
  Mat heads(lq, d_model);
  for (int h = 0; h < n_heads; ++h) {
    const auto qh = q.middleCols(h * dh, dh);
    const auto kh = k.middleCols(h * dh, dh);
    const auto vh = v.middleCols(h * dh, dh);
    Mat scores = qh * kh.transpose() * scale;
    if (causal) {
      for (Eigen::Index i = 0; i < lq; ++i)
        for (Eigen::Index j = i + 1; j < lkv; ++j) scores(i, j) = kMaskNegInf;
    }
    probs[static_cast<std::size_t>(h)] = softmax_rows(scores);
    heads.middleCols(h * dh, dh) = probs[static_cast<std::size_t>(h)] * vh;
  }
  Mat out_v = heads * value(wo).transpose();
  const Ref out = push(std::move(out_v), true);
  nodes_[out].back = [this, q_in, kv_in, wq, wk, wv, wo, n_heads, dh, scale, out,
                      q = std::move(q), k = std::move(k), v = std::move(v),
                      probs = std::move(probs), heads = std::move(heads)] {
    const Mat& go = grad(out);
    const Mat& xq = value(q_in);
    const Mat& xkv = value(kv_in);

    g(wo) += go.transpose() * heads;
    Mat dheads = go * value(wo);

    Mat dq(q.rows(), q.cols()), dk(k.rows(), k.cols()), dv(v.rows(), v.cols());
    for (int h = 0; h < n_heads; ++h) {
      const auto qh = q.middleCols(h * dh, dh);
      const auto kh = k.middleCols(h * dh, dh);
      const auto vh = v.middleCols(h * dh, dh);
      const Mat& p = probs[static_cast<std::size_t>(h)];
      const auto dh_out = dheads.middleCols(h * dh, dh);

      Mat dp = dh_out * vh.transpose();
      dv.middleCols(h * dh, dh) = p.transpose() * dh_out;
      // softmax backward per row: ds = p .* (dp - rowsum(p .* dp))
      Mat ds(p.rows(), p.cols());
      for (Eigen::Index r = 0; r < p.rows(); ++r) {
        const double dot = p.row(r).dot(dp.row(r));
        ds.row(r) = (p.row(r).array() * (dp.row(r).array() - dot)).matrix();
      }
      ds *= scale;
      dq.middleCols(h * dh, dh) = ds * kh;
      dk.middleCols(h * dh, dh) = ds.transpose() * qh;
    }
    g(wq) += dq.transpose() * xq;
    g(wk) += dk.transpose() * xkv;
    g(wv) += dv.transpose() * xkv;
    g(q_in) += dq * value(wq);
    g(kv_in) += dk * value(wk);
    g(kv_in) += dv * value(wv);
  };
  return out;
}

Tape::Ref Tape::slice_rows(Ref x, int start, int n) {
  const Mat& xv = value(x);
  if (start < 0 || n < 0 || start + n > xv.rows())
    throw ArgumentError("slice_rows: range out of bounds");
  Mat v = xv.middleRows(start, n);
  const Ref out = push(std::move(v), true);
  nodes_[out].back = [this, x, start, n, out] {
    g(x).middleRows(start, n) += grad(out);
  };
  return out;
}

Tape::Ref Tape::exp(Ref x) {
  Mat v = value(x).array().exp();
  const Ref out = push(std::move(v), true);
  nodes_[out].back = [this, x, out] { g(x) += grad(out).cwiseProduct(value(out)); };
  return out;
}

Tape::Ref Tape::clamp(Ref x, double lo, double hi) {
  Mat v = value(x).cwiseMax(lo).cwiseMin(hi);
  const Ref out = push(std::move(v), true);
  nodes_[out].back = [this, x, lo, hi, out] {
    const Mat& xv = value(x);
    const Mat& go = grad(out);
    Mat& gx = g(x);
    for (Eigen::Index i = 0; i < xv.rows(); ++i)
      for (Eigen::Index j = 0; j < xv.cols(); ++j)
        if (xv(i, j) > lo && xv(i, j) < hi) gx(i, j) += go(i, j);
  };
  return out;
}

Tape::Ref Tape::minimum(Ref a, Ref b) {
  Mat v = value(a).cwiseMin(value(b));
  const Ref out = push(std::move(v), true);
  nodes_[out].back = [this, a, b, out] {
    const Mat& av = value(a);
    const Mat& bv = value(b);
    const Mat& go = grad(out);
    Mat& ga = g(a);
    Mat& gb = g(b);
    for (Eigen::Index i = 0; i < av.rows(); ++i)
      for (Eigen::Index j = 0; j < av.cols(); ++j) {
        if (av(i, j) <= bv(i, j))
          ga(i, j) += go(i, j);
        else
          gb(i, j) += go(i, j);
      }
  };
  return out;
}

Tape::Ref Tape::cross_entropy(Ref logits, std::vector<int> targets, bool mean_reduction) {
  const Mat& z = value(logits);
  if (static_cast<Eigen::Index>(targets.size()) != z.rows())
    throw ArgumentError("cross_entropy: one target per logits row required");
  if (targets.empty()) throw ArgumentError("cross_entropy: empty target");
  for (const int t : targets)
    if (t < 0 || t >= z.cols()) throw ArgumentError("cross_entropy: target out of range");
  const Mat logp = log_softmax_rows(z);
  Mat p = softmax_rows(z);  // before push(): z refers into the node arena
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i)
    total -= logp(static_cast<Eigen::Index>(i), targets[i]);
  const double denom = mean_reduction ? static_cast<double>(targets.size()) : 1.0;
  Mat v(1, 1);
  v(0, 0) = total / denom;
  const Ref out = push(std::move(v), true);
  nodes_[out].back = [this, logits, targets = std::move(targets), denom, out,
                      p = std::move(p)] {
    const double s = grad(out)(0, 0) / denom;
    Mat& gz = g(logits);
    gz += s * p;
    for (std::size_t i = 0; i < targets.size(); ++i)
      gz(static_cast<Eigen::Index>(i), targets[i]) -= s;
  };
  return out;
}

Tape::Ref Tape::log_softmax_select(Ref logits, std::vector<int> targets,
                                   const Mat* additive_mask, double temperature) {
  const Mat& z = value(logits);
  if (static_cast<Eigen::Index>(targets.size()) != z.rows())
    throw ArgumentError("log_softmax_select: one target per row required");
  if (temperature <= 0.0) throw ArgumentError("log_softmax_select: temperature must be > 0");
  Mat zt = z / temperature;
  if (additive_mask) {
    if (additive_mask->rows() != z.rows() || additive_mask->cols() != z.cols())
      throw ArgumentError("log_softmax_select: mask shape mismatch");
    zt += *additive_mask;
  }
  const Mat logp = log_softmax_rows(zt);
  Mat v(z.rows(), 1);
  for (Eigen::Index i = 0; i < z.rows(); ++i) v(i, 0) = logp(i, targets[i]);
  const Ref out = push(std::move(v), true);
  nodes_[out].back = [this, logits, targets = std::move(targets), temperature, out,
                      p = softmax_rows(zt)] {
    const Mat& go = grad(out);
    Mat& gz = g(logits);
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      const double s = go(i, 0) / temperature;
      gz.row(i) -= s * p.row(i);
      gz(i, targets[static_cast<std::size_t>(i)]) += s;
    }
  };
  return out;
}

Tape::Ref Tape::sum(Ref x) {
  Mat v(1, 1);
  v(0, 0) = value(x).sum();
  const Ref out = push(std::move(v), true);
  nodes_[out].back = [this, x, out] {
    g(x).array() += grad(out)(0, 0);
  };
  return out;
}

Tape::Ref Tape::mean(Ref x) {
  const double n = static_cast<double>(value(x).size());
  Mat v(1, 1);
  v(0, 0) = value(x).sum() / n;
  const Ref out = push(std::move(v), true);
  nodes_[out].back = [this, x, n, out] {
    g(x).array() += grad(out)(0, 0) / n;
  };
  return out;
}

Tape::Ref Tape::mul_const(Ref x, Mat mask) {
  Mat v = value(x).cwiseProduct(mask);
  const Ref out = push(std::move(v), true);
  nodes_[out].back = [this, x, out, mask = std::move(mask)] {
    g(x) += grad(out).cwiseProduct(mask);
  };
  return out;
}

}  // namespace glorank
