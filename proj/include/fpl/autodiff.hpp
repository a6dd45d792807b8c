#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "fpl/rng.hpp"
#include "fpl/tensor.hpp"

namespace fpl::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Tape node: value plus the backprop closure that scatters this node's
// grad into its parents. The parent graph is acyclic by construction.
struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backprop;
  const char* op = "leaf";

  void ensure_grad() {
    if (grad.data.empty()) grad = Tensor::zeros(value.shape);
  }
  void zero_grad() {
    if (!grad.data.empty()) std::fill(grad.data.begin(), grad.data.end(), 0.0f);
  }
};

NodePtr constant(Tensor v);
NodePtr param(Tensor v);

// Escape hatch for composite layers with hand-written backward rules.
NodePtr custom(Tensor value, std::vector<NodePtr> parents,
               std::function<void(Node&)> backprop, const char* op);

// Elementwise; binary ops require equal shapes, except a 1-element operand
// which broadcasts as a scalar.
NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr mul(const NodePtr& a, const NodePtr& b);
NodePtr relu(const NodePtr& a);
NodePtr sigmoid(const NodePtr& a);
NodePtr exp_(const NodePtr& a);
NodePtr log_(const NodePtr& a);
NodePtr scale(const NodePtr& a, float s);

NodePtr matmul(const NodePtr& a, const NodePtr& b);
NodePtr reshape(const NodePtr& a, std::vector<int> shape);
NodePtr sum(const NodePtr& a);
NodePtr mean(const NodePtr& a);

// Structured (non-broadcast) shape helpers.
NodePtr add_row_bias(const NodePtr& x, const NodePtr& b);       // [N,D] + [D]
NodePtr add_channel_bias(const NodePtr& x, const NodePtr& b);   // [N,C,H,W] + [C]
NodePtr channel_scale(const NodePtr& x, const NodePtr& g);      // [N,C,H,W] * [N,C]

NodePtr conv2d(const NodePtr& x, const NodePtr& w, int stride, int padding);
NodePtr maxpool2d(const NodePtr& x, int window, int stride);
NodePtr avgpool2d(const NodePtr& x, int window, int stride);
NodePtr global_avg_pool(const NodePtr& x);  // [N,C,H,W] -> [N,C]
NodePtr dropout(const NodePtr& x, float p, RngStream& rng);

// Mean over batch of -sum_k t_k log softmax(logits)_k; targets [N,K] rows sum to 1.
NodePtr softmax_cross_entropy(const NodePtr& logits, const Tensor& targets);

// Mean over batch of T^2 * KL(target_probs || softmax(logits / T)); the
// target side is a constant, so gradients only flow into `logits`.
NodePtr kl_vs_softened(const Tensor& target_probs, const NodePtr& logits, float temperature);

// Reverse sweep from a scalar loss; grads accumulate additively across fan-out.
void backward(const NodePtr& loss);

// Row-wise numerically stable softmax on a [N,K] tensor (plain function).
Tensor softmax_rows(const Tensor& logits);

struct Sgd {
  float lr = 0.05f;
  float momentum = 0.0f;
  float weight_decay = 0.0f;

  // v <- momentum*v + grad + wd*param; param <- param - lr*v; grad zeroed.
  void step(const std::vector<NodePtr>& params);

 private:
  std::unordered_map<Node*, Tensor> velocity_;
};

}  // namespace fpl::ad
