#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "cmert/mask.hpp"

namespace cmert {

// Dense row-major real array, rank <= 3. Rank 3 only appears as stacked
// batches in caller code; every tape primitive works on rank <= 2 and
// batching is an outer loop.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // same length as data once ensure_grad() ran

  Tensor() = default;
  explicit Tensor(std::vector<int> s, double fill = 0.0);

  int rank() const { return static_cast<int>(shape.size()); }
  long long numel() const;
  int rows() const;
  int cols() const;

  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

  void ensure_grad();
  void zero_grad();
};

using TensorPtr = std::shared_ptr<Tensor>;

Tensor tensor1(int n, double fill = 0.0);
Tensor tensor2(int r, int c, double fill = 0.0);
std::string shape_str(const Tensor& t);

// Handle into a Tape.
struct Var {
  int idx = -1;
};

// Define-by-run computation tape. A fresh tape is built for every forward
// pass; backward() walks it once in reverse and accumulates parameter
// gradients into the referenced Tensor::grad buffers.
class Tape {
 public:
  // Trainable parameter. Repeated calls with the same pointer return the same
  // node, so shared weights (the classifier) accumulate a single combined
  // gradient per backward.
  Var leaf(const TensorPtr& p);
  // Non-trainable value (features, positional encodings, targets). Its
  // gradient is still computed and readable via grad(), which is what the
  // leakage audit differentiates.
  Var input(Tensor value);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var add_rowvec(Var a, Var v);  // [m x n] + [n], broadcast over rows
  Var mul(Var a, Var b);         // elementwise
  Var concat_rows(const std::vector<Var>& parts);
  Var slice_rows(Var a, int row_begin, int row_end);  // half-open
  Var concat_cols(const std::vector<Var>& parts);
  Var slice_cols(Var a, int col_begin, int col_end);
  Var transpose(Var a);
  Var scale(Var a, double factor);
  Var log(Var a);
  Var relu(Var a);
  Var mean(Var a);  // scalar, over all elements
  Var sum(Var a);   // scalar
  // Masked softmax per row; mask may be null (all allowed). Masked positions
  // come out exactly zero; a fully masked row is an error, never NaN.
  Var softmax_rows(Var a, const AttentionMask* mask);
  // Per-row normalization with epsilon 1e-5 inside the square root, then
  // elementwise gain/bias (both rank-1 of width cols).
  Var layer_norm(Var x, Var gain, Var bias);
  // Mean negative log-likelihood over non-ignored rows, fused with the
  // softmax so the backward stays finite when some probability underflows to
  // zero. Per-row losses are kept for the position diagnostics.
  Var cross_entropy(Var logits, std::vector<int> targets, std::vector<uint8_t> ignore);

  const Tensor& val(Var v) const;
  // d(output)/d(node), valid after backward().
  const std::vector<double>& grad(Var v) const;
  // Per-row losses of a cross_entropy node (zeros at ignored rows).
  const std::vector<double>& per_row_loss(Var ce) const;

  void backward(Var out);

  int num_nodes() const { return static_cast<int>(nodes_.size()); }

 private:
  enum class Op {
    kLeaf,
    kInput,
    kMatMul,
    kAdd,
    kAddRowVec,
    kMul,
    kConcatRows,
    kSliceRows,
    kConcatCols,
    kSliceCols,
    kTranspose,
    kScale,
    kLog,
    kRelu,
    kMean,
    kSum,
    kSoftmaxRows,
    kLayerNorm,
    kCrossEntropy,
  };

  struct Node {
    Op op;
    std::vector<int> args;
    Tensor val;
    std::vector<double> grad;
    // op-specific payloads
    double factor = 0.0;       // kScale
    int a0 = 0, a1 = 0;        // slice bounds
    AttentionMask mask;        // kSoftmaxRows (empty = unmasked)
    bool has_mask = false;
    TensorPtr param;           // kLeaf
    std::vector<int> targets;  // kCrossEntropy
    std::vector<uint8_t> ignore;
    std::vector<double> row_loss;   // kCrossEntropy per-row losses
    std::vector<double> row_aux;    // kCrossEntropy: logsumexp per row; kLayerNorm: 1/sigma per row
    std::vector<double> normed;     // kLayerNorm: pre-affine normalized values
    int n_valid = 0;                // kCrossEntropy
  };

  int push(Node n);
  Node& at_node(Var v);
  const Node& at_node(Var v) const;
  void backward_node(int i);

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, int> leaf_ids_;
};

}  // namespace cmert
