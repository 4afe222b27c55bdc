#pragma once

#include <functional>
#include <vector>

#include "recguard/tensor.hpp"

namespace recguard {

// Reverse-mode autodiff over a per-call tape. Build a graph with the op
// methods, call backward(loss), then read grad(node). Tapes are cheap and
// single-use; one tape per sample keeps batch parallelism deterministic
// (per-sample gradients are reduced in batch order by the trainers).
class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_live = false;
    std::function<void(Tape&)> back;  // reads this node's grad, feeds parents
  };

  int leaf(Tensor v, bool requires_grad);

  // elementwise
  int add(int a, int b);
  int sub(int a, int b);
  int neg(int a);
  int mul(int a, int b);
  int scale(int a, float s);
  int relu(int a);
  int sigmoid(int a);
  int softplus(int a);
  int clamp01(int a);

  // matrix / vector
  int matmul(int a, int b);                    // [N,K]x[K,M]
  int transpose(int a);                        // [N,M] -> [M,N]
  int dense(int x, int w, int b);              // [N], [M,N], [M] (b = -1 for none)
  int add_rowwise(int x, int b);               // [N,M] + [M]
  int dot(int a, int b);                       // same shape -> scalar
  int sum(int a);                              // -> scalar
  int mean(int a);                             // -> scalar
  int sq_norm(int a);                          // sum of squares -> scalar
  int softmax_rows(int a);                     // [N,M]
  int logsumexp(int a);                        // [N] -> scalar
  int gather(int a, std::vector<int> idx);     // [N] -> [k]
  int pack(const std::vector<int>& scalars);   // k scalars -> [k]
  int l2_normalize(int a);                     // [N] -> [N]; errors on ~zero norm
  int cross_entropy_logits(int logits, int label);

  // conv / image
  int conv2d(int x, int w, int b, int stride, int pad);  // x [C,H,W], w [Co,Ci,k,k], b [Co] or -1
  int prelu(int x, int slope);                           // slope [C]
  // Normalizes each channel. mean/var are the statistics actually used:
  // in train mode callers pass per-sample stats (computed by stats_of) with
  // stats_from_x=true so the backward differentiates through them; in eval
  // mode the frozen running stats with stats_from_x=false.
  int channel_norm(int x, int gain, int bias, const Tensor& mean, const Tensor& var, float eps,
                   bool stats_from_x);
  int global_avg_pool(int x);     // [C,H,W] -> [C]
  int chw_to_tokens(int x);       // [C,H,W] -> [H*W, C]
  int tokens_to_chw(int t, int c, int h, int w);

  static void stats_of(const Tensor& x, Tensor& mean, Tensor& var);  // per-channel over HW

  void backward(int loss);

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Tensor& grad(int id) const;
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  std::size_t size() const { return nodes_.size(); }

  // internal helpers used by op closures
  Tensor& grad_buf(int id);
  void accum(int id, const Tensor& g);
  void accum_scaled(int id, const Tensor& g, float s);

 private:
  int push(Node n);
  std::vector<Node> nodes_;
};

}  // namespace recguard
