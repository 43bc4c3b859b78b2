#include "cmert/tensor.hpp"

#include <cmath>
#include <stdexcept>

namespace cmert {

Tensor::Tensor(std::vector<int> s, double fill) : shape(std::move(s)) {
  if (shape.empty() || shape.size() > 3)
    throw std::invalid_argument("Tensor: rank must be 1..3, got rank " +
                                std::to_string(shape.size()));
  long long n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
    n *= d;
  }
  data.assign(static_cast<size_t>(n), fill);
}

long long Tensor::numel() const {
  long long n = 1;
  for (int d : shape) n *= d;
  return n;
}

int Tensor::rows() const {
  if (rank() != 2) throw std::invalid_argument("Tensor::rows: want rank 2, have " + shape_str(*this));
  return shape[0];
}

int Tensor::cols() const {
  if (rank() != 2) throw std::invalid_argument("Tensor::cols: want rank 2, have " + shape_str(*this));
  return shape[1];
}

void Tensor::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() { grad.assign(data.size(), 0.0); }

Tensor tensor1(int n, double fill) { return Tensor({n}, fill); }

Tensor tensor2(int r, int c, double fill) { return Tensor({r, c}, fill); }

std::string shape_str(const Tensor& t) {
  std::string s = "[";
  for (int i = 0; i < t.rank(); ++i) {
    if (i) s += " x ";
    s += std::to_string(t.shape[i]);
  }
  return s + "]";
}

int Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Tape::Node& Tape::at_node(Var v) {
  if (v.idx < 0 || v.idx >= static_cast<int>(nodes_.size()))
    throw std::invalid_argument("Tape: Var does not belong to this tape");
  return nodes_[v.idx];
}

const Tape::Node& Tape::at_node(Var v) const {
  if (v.idx < 0 || v.idx >= static_cast<int>(nodes_.size()))
    throw std::invalid_argument("Tape: Var does not belong to this tape");
  return nodes_[v.idx];
}

Var Tape::leaf(const TensorPtr& p) {
  if (!p) throw std::invalid_argument("Tape::leaf: null parameter");
  auto it = leaf_ids_.find(p.get());
  if (it != leaf_ids_.end()) return Var{it->second};
  Node n;
  n.op = Op::kLeaf;
  n.val = *p;
  n.val.grad.clear();
  n.param = p;
  int id = push(std::move(n));
  leaf_ids_.emplace(p.get(), id);
  return Var{id};
}

Var Tape::input(Tensor value) {
  Node n;
  n.op = Op::kInput;
  n.val = std::move(value);
  n.val.grad.clear();
  n.val.requires_grad = false;
  return Var{push(std::move(n))};
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& A = at_node(a).val;
  const Tensor& B = at_node(b).val;
  if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0])
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(A) + " and " +
                                shape_str(B));
  int m = A.shape[0], k = A.shape[1], n = B.shape[1];
  Node out;
  out.op = Op::kMatMul;
  out.args = {a.idx, b.idx};
  out.val = tensor2(m, n);
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      double av = A.data[static_cast<size_t>(i) * k + p];
      for (int j = 0; j < n; ++j)
        out.val.data[static_cast<size_t>(i) * n + j] += av * B.data[static_cast<size_t>(p) * n + j];
    }
  return Var{push(std::move(out))};
}

Var Tape::add(Var a, Var b) {
  const Tensor& A = at_node(a).val;
  const Tensor& B = at_node(b).val;
  if (A.shape != B.shape)
    throw std::invalid_argument("add: shape mismatch " + shape_str(A) + " vs " + shape_str(B));
  Node out;
  out.op = Op::kAdd;
  out.args = {a.idx, b.idx};
  out.val = A;
  for (size_t i = 0; i < out.val.data.size(); ++i) out.val.data[i] += B.data[i];
  return Var{push(std::move(out))};
}

Var Tape::add_rowvec(Var a, Var v) {
  const Tensor& A = at_node(a).val;
  const Tensor& V = at_node(v).val;
  if (A.rank() != 2 || V.rank() != 1 || V.shape[0] != A.shape[1])
    throw std::invalid_argument("add_rowvec: shape mismatch " + shape_str(A) + " vs " +
                                shape_str(V));
  Node out;
  out.op = Op::kAddRowVec;
  out.args = {a.idx, v.idx};
  out.val = A;
  int m = A.shape[0], n = A.shape[1];
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.val.data[static_cast<size_t>(i) * n + j] += V.data[j];
  return Var{push(std::move(out))};
}

Var Tape::mul(Var a, Var b) {
  const Tensor& A = at_node(a).val;
  const Tensor& B = at_node(b).val;
  if (A.shape != B.shape)
    throw std::invalid_argument("mul: shape mismatch " + shape_str(A) + " vs " + shape_str(B));
  Node out;
  out.op = Op::kMul;
  out.args = {a.idx, b.idx};
  out.val = A;
  for (size_t i = 0; i < out.val.data.size(); ++i) out.val.data[i] *= B.data[i];
  return Var{push(std::move(out))};
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  int cols = at_node(parts[0]).val.cols();
  int rows = 0;
  for (Var p : parts) {
    const Tensor& t = at_node(p).val;
    if (t.rank() != 2 || t.cols() != cols)
      throw std::invalid_argument("concat_rows: column mismatch, part is " + shape_str(t));
    rows += t.rows();
  }
  Node out;
  out.op = Op::kConcatRows;
  for (Var p : parts) out.args.push_back(p.idx);
  out.val = tensor2(rows, cols);
  int r0 = 0;
  for (Var p : parts) {
    const Tensor& t = at_node(p).val;
    for (int i = 0; i < t.rows(); ++i)
      for (int j = 0; j < cols; ++j) out.val.at(r0 + i, j) = t.at(i, j);
    r0 += t.rows();
  }
  return Var{push(std::move(out))};
}

Var Tape::slice_rows(Var a, int row_begin, int row_end) {
  const Tensor& A = at_node(a).val;
  if (A.rank() != 2 || row_begin < 0 || row_end < row_begin || row_end > A.rows())
    throw std::invalid_argument("slice_rows: bounds [" + std::to_string(row_begin) + ", " +
                                std::to_string(row_end) + ") out of range for " + shape_str(A));
  Node out;
  out.op = Op::kSliceRows;
  out.args = {a.idx};
  out.a0 = row_begin;
  out.a1 = row_end;
  out.val = tensor2(row_end - row_begin, A.cols());
  for (int i = row_begin; i < row_end; ++i)
    for (int j = 0; j < A.cols(); ++j) out.val.at(i - row_begin, j) = A.at(i, j);
  return Var{push(std::move(out))};
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  int rows = at_node(parts[0]).val.rows();
  int cols = 0;
  for (Var p : parts) {
    const Tensor& t = at_node(p).val;
    if (t.rank() != 2 || t.rows() != rows)
      throw std::invalid_argument("concat_cols: row mismatch, part is " + shape_str(t));
    cols += t.cols();
  }
  Node out;
  out.op = Op::kConcatCols;
  for (Var p : parts) out.args.push_back(p.idx);
  out.val = tensor2(rows, cols);
  int c0 = 0;
  for (Var p : parts) {
    const Tensor& t = at_node(p).val;
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < t.cols(); ++j) out.val.at(i, c0 + j) = t.at(i, j);
    c0 += t.cols();
  }
  return Var{push(std::move(out))};
}

Var Tape::slice_cols(Var a, int col_begin, int col_end) {
  const Tensor& A = at_node(a).val;
  if (A.rank() != 2 || col_begin < 0 || col_end < col_begin || col_end > A.cols())
    throw std::invalid_argument("slice_cols: bounds [" + std::to_string(col_begin) + ", " +
                                std::to_string(col_end) + ") out of range for " + shape_str(A));
  Node out;
  out.op = Op::kSliceCols;
  out.args = {a.idx};
  out.a0 = col_begin;
  out.a1 = col_end;
  out.val = tensor2(A.rows(), col_end - col_begin);
  for (int i = 0; i < A.rows(); ++i)
    for (int j = col_begin; j < col_end; ++j) out.val.at(i, j - col_begin) = A.at(i, j);
  return Var{push(std::move(out))};
}

Var Tape::transpose(Var a) {
  const Tensor& A = at_node(a).val;
  if (A.rank() != 2) throw std::invalid_argument("transpose: want rank 2, have " + shape_str(A));
  Node out;
  out.op = Op::kTranspose;
  out.args = {a.idx};
  out.val = tensor2(A.cols(), A.rows());
  for (int i = 0; i < A.rows(); ++i)
    for (int j = 0; j < A.cols(); ++j) out.val.at(j, i) = A.at(i, j);
  return Var{push(std::move(out))};
}

Var Tape::scale(Var a, double factor) {
  Node out;
  out.op = Op::kScale;
  out.args = {a.idx};
  out.factor = factor;
  out.val = at_node(a).val;
  for (double& x : out.val.data) x *= factor;
  return Var{push(std::move(out))};
}

Var Tape::log(Var a) {
  Node out;
  out.op = Op::kLog;
  out.args = {a.idx};
  out.val = at_node(a).val;
  for (size_t i = 0; i < out.val.data.size(); ++i) {
    if (out.val.data[i] <= 0.0)
      throw std::domain_error("log: non-positive input at flat index " + std::to_string(i));
    out.val.data[i] = std::log(out.val.data[i]);
  }
  return Var{push(std::move(out))};
}

Var Tape::relu(Var a) {
  Node out;
  out.op = Op::kRelu;
  out.args = {a.idx};
  out.val = at_node(a).val;
  for (double& x : out.val.data)
    if (x < 0.0) x = 0.0;
  return Var{push(std::move(out))};
}

Var Tape::mean(Var a) {
  const Tensor& A = at_node(a).val;
  if (A.numel() == 0) throw std::invalid_argument("mean: empty tensor");
  Node out;
  out.op = Op::kMean;
  out.args = {a.idx};
  out.val = tensor1(1);
  double s = 0.0;
  for (double x : A.data) s += x;
  out.val.data[0] = s / static_cast<double>(A.numel());
  return Var{push(std::move(out))};
}

Var Tape::sum(Var a) {
  Node out;
  out.op = Op::kSum;
  out.args = {a.idx};
  out.val = tensor1(1);
  double s = 0.0;
  for (double x : at_node(a).val.data) s += x;
  out.val.data[0] = s;
  return Var{push(std::move(out))};
}

Var Tape::softmax_rows(Var a, const AttentionMask* mask) {
  const Tensor& A = at_node(a).val;
  if (A.rank() != 2) throw std::invalid_argument("softmax_rows: want rank 2, have " + shape_str(A));
  int m = A.shape[0], n = A.shape[1];
  if (mask && (mask->rows != m || mask->cols != n))
    throw std::invalid_argument("softmax_rows: mask is " + std::to_string(mask->rows) + "x" +
                                std::to_string(mask->cols) + " but logits are " + shape_str(A));
  Node out;
  out.op = Op::kSoftmaxRows;
  out.args = {a.idx};
  if (mask) {
    out.mask = *mask;
    out.has_mask = true;
  }
  out.val = tensor2(m, n);
  // Disallowed positions get an additive -1e30, so after row-max subtraction
  // their exponentials underflow to exactly zero in 64-bit.
  for (int i = 0; i < m; ++i) {
    double rowmax = -1e300;
    bool any = false;
    for (int j = 0; j < n; ++j) {
      double z = A.at(i, j) + ((!mask || mask->at(i, j)) ? 0.0 : -1e30);
      if (!mask || mask->at(i, j)) any = true;
      if (z > rowmax) rowmax = z;
    }
    if (!any)
      throw std::invalid_argument("softmax_rows: row " + std::to_string(i) + " is fully masked");
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
      double z = A.at(i, j) + ((!mask || mask->at(i, j)) ? 0.0 : -1e30);
      double e = std::exp(z - rowmax);
      out.val.at(i, j) = e;
      s += e;
    }
    for (int j = 0; j < n; ++j) out.val.at(i, j) /= s;
  }
  return Var{push(std::move(out))};
}

Var Tape::layer_norm(Var x, Var gain, Var bias) {
  const Tensor& X = at_node(x).val;
  const Tensor& G = at_node(gain).val;
  const Tensor& B = at_node(bias).val;
  if (X.rank() != 2 || X.shape[1] < 2)
    throw std::invalid_argument("layer_norm: want rank 2 with >= 2 columns, have " + shape_str(X));
  if (G.rank() != 1 || B.rank() != 1 || G.shape[0] != X.shape[1] || B.shape[0] != X.shape[1])
    throw std::invalid_argument("layer_norm: gain " + shape_str(G) + " / bias " + shape_str(B) +
                                " do not match input " + shape_str(X));
  int m = X.shape[0], n = X.shape[1];
  Node out;
  out.op = Op::kLayerNorm;
  out.args = {x.idx, gain.idx, bias.idx};
  out.val = tensor2(m, n);
  out.normed.resize(static_cast<size_t>(m) * n);
  out.row_aux.resize(m);
  const double eps = 1e-5;
  for (int i = 0; i < m; ++i) {
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += X.at(i, j);
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      double d = X.at(i, j) - mu;
      var += d * d;
    }
    var /= n;
    double inv = 1.0 / std::sqrt(var + eps);
    out.row_aux[i] = inv;
    for (int j = 0; j < n; ++j) {
      double nd = (X.at(i, j) - mu) * inv;
      out.normed[static_cast<size_t>(i) * n + j] = nd;
      out.val.at(i, j) = G.data[j] * nd + B.data[j];
    }
  }
  return Var{push(std::move(out))};
}

Var Tape::cross_entropy(Var logits, std::vector<int> targets, std::vector<uint8_t> ignore) {
  const Tensor& X = at_node(logits).val;
  if (X.rank() != 2) throw std::invalid_argument("cross_entropy: want rank 2, have " + shape_str(X));
  int L = X.shape[0], K = X.shape[1];
  if (static_cast<int>(targets.size()) != L)
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(L) + " rows");
  if (ignore.empty()) ignore.assign(L, 0);
  if (static_cast<int>(ignore.size()) != L)
    throw std::invalid_argument("cross_entropy: ignore length " + std::to_string(ignore.size()) +
                                " for " + std::to_string(L) + " rows");
  Node out;
  out.op = Op::kCrossEntropy;
  out.args = {logits.idx};
  out.targets = std::move(targets);
  out.ignore = std::move(ignore);
  out.row_loss.assign(L, 0.0);
  out.row_aux.assign(L, 0.0);
  out.val = tensor1(1);
  double total = 0.0;
  int n_valid = 0;
  for (int i = 0; i < L; ++i) {
    if (out.ignore[i]) continue;
    int t = out.targets[i];
    if (t < 0 || t >= K)
      throw std::invalid_argument("cross_entropy: target " + std::to_string(t) + " out of range [0, " +
                                  std::to_string(K) + ") at row " + std::to_string(i));
    double rowmax = X.at(i, 0);
    for (int j = 1; j < K; ++j) rowmax = std::max(rowmax, X.at(i, j));
    double s = 0.0;
    for (int j = 0; j < K; ++j) s += std::exp(X.at(i, j) - rowmax);
    double lse = rowmax + std::log(s);
    out.row_aux[i] = lse;
    out.row_loss[i] = lse - X.at(i, t);
    total += out.row_loss[i];
    ++n_valid;
  }
  if (n_valid == 0) throw std::invalid_argument("cross_entropy: every position ignored");
  out.n_valid = n_valid;
  out.val.data[0] = total / n_valid;
  return Var{push(std::move(out))};
}

const Tensor& Tape::val(Var v) const { return at_node(v).val; }

const std::vector<double>& Tape::grad(Var v) const {
  const Node& n = at_node(v);
  if (n.grad.size() != n.val.data.size())
    throw std::logic_error("Tape::grad: backward has not run on this tape");
  return n.grad;
}

const std::vector<double>& Tape::per_row_loss(Var ce) const {
  const Node& n = at_node(ce);
  if (n.op != Op::kCrossEntropy)
    throw std::invalid_argument("per_row_loss: node is not a cross_entropy output");
  return n.row_loss;
}

void Tape::backward(Var out) {
  {
    const Node& o = at_node(out);
    if (o.val.numel() != 1)
      throw std::invalid_argument("backward: output must be scalar, got " + shape_str(o.val));
  }
  for (Node& n : nodes_) n.grad.assign(n.val.data.size(), 0.0);
  nodes_[out.idx].grad[0] = 1.0;
  for (int i = out.idx; i >= 0; --i) backward_node(i);
  for (const auto& [raw, id] : leaf_ids_) {
    const Node& n = nodes_[id];
    Tensor* p = n.param.get();
    if (!p->requires_grad) continue;
    p->ensure_grad();
    for (size_t k = 0; k < n.grad.size(); ++k) p->grad[k] += n.grad[k];
  }
}

void Tape::backward_node(int i) {
  Node& n = nodes_[i];
  const std::vector<double>& g = n.grad;
  switch (n.op) {
    case Op::kLeaf:
    case Op::kInput:
      break;
    case Op::kMatMul: {
      Node& A = nodes_[n.args[0]];
      Node& B = nodes_[n.args[1]];
      int m = A.val.shape[0], k = A.val.shape[1], c = B.val.shape[1];
      for (int r = 0; r < m; ++r)
        for (int j = 0; j < c; ++j) {
          double gv = g[static_cast<size_t>(r) * c + j];
          if (gv == 0.0) continue;
          for (int p = 0; p < k; ++p) {
            A.grad[static_cast<size_t>(r) * k + p] += gv * B.val.data[static_cast<size_t>(p) * c + j];
            B.grad[static_cast<size_t>(p) * c + j] += gv * A.val.data[static_cast<size_t>(r) * k + p];
          }
        }
      break;
    }
    case Op::kAdd: {
      Node& A = nodes_[n.args[0]];
      Node& B = nodes_[n.args[1]];
      for (size_t x = 0; x < g.size(); ++x) {
        A.grad[x] += g[x];
        B.grad[x] += g[x];
      }
      break;
    }
    case Op::kAddRowVec: {
      Node& A = nodes_[n.args[0]];
      Node& V = nodes_[n.args[1]];
      int m = A.val.shape[0], c = A.val.shape[1];
      for (int r = 0; r < m; ++r)
        for (int j = 0; j < c; ++j) {
          double gv = g[static_cast<size_t>(r) * c + j];
          A.grad[static_cast<size_t>(r) * c + j] += gv;
          V.grad[j] += gv;
        }
      break;
    }
    case Op::kMul: {
      Node& A = nodes_[n.args[0]];
      Node& B = nodes_[n.args[1]];
      for (size_t x = 0; x < g.size(); ++x) {
        A.grad[x] += g[x] * B.val.data[x];
        B.grad[x] += g[x] * A.val.data[x];
      }
      break;
    }
    case Op::kConcatRows: {
      int cols = n.val.shape[1];
      int r0 = 0;
      for (int a : n.args) {
        Node& P = nodes_[a];
        int pr = P.val.shape[0];
        for (int r = 0; r < pr; ++r)
          for (int j = 0; j < cols; ++j)
            P.grad[static_cast<size_t>(r) * cols + j] += g[static_cast<size_t>(r0 + r) * cols + j];
        r0 += pr;
      }
      break;
    }
    case Op::kSliceRows: {
      Node& A = nodes_[n.args[0]];
      int cols = A.val.shape[1];
      for (int r = n.a0; r < n.a1; ++r)
        for (int j = 0; j < cols; ++j)
          A.grad[static_cast<size_t>(r) * cols + j] += g[static_cast<size_t>(r - n.a0) * cols + j];
      break;
    }
    case Op::kConcatCols: {
      int rows = n.val.shape[0], cols = n.val.shape[1];
      int c0 = 0;
      for (int a : n.args) {
        Node& P = nodes_[a];
        int pc = P.val.shape[1];
        for (int r = 0; r < rows; ++r)
          for (int j = 0; j < pc; ++j)
            P.grad[static_cast<size_t>(r) * pc + j] += g[static_cast<size_t>(r) * cols + c0 + j];
        c0 += pc;
      }
      break;
    }
    case Op::kSliceCols: {
      Node& A = nodes_[n.args[0]];
      int rows = A.val.shape[0], cols = A.val.shape[1];
      int w = n.a1 - n.a0;
      for (int r = 0; r < rows; ++r)
        for (int j = n.a0; j < n.a1; ++j)
          A.grad[static_cast<size_t>(r) * cols + j] += g[static_cast<size_t>(r) * w + (j - n.a0)];
      break;
    }
    case Op::kTranspose: {
      Node& A = nodes_[n.args[0]];
      int rows = A.val.shape[0], cols = A.val.shape[1];
      for (int r = 0; r < rows; ++r)
        for (int j = 0; j < cols; ++j)
          A.grad[static_cast<size_t>(r) * cols + j] += g[static_cast<size_t>(j) * rows + r];
      break;
    }
    case Op::kScale: {
      Node& A = nodes_[n.args[0]];
      for (size_t x = 0; x < g.size(); ++x) A.grad[x] += n.factor * g[x];
      break;
    }
    case Op::kLog: {
      Node& A = nodes_[n.args[0]];
      for (size_t x = 0; x < g.size(); ++x) A.grad[x] += g[x] / A.val.data[x];
      break;
    }
    case Op::kRelu: {
      Node& A = nodes_[n.args[0]];
      for (size_t x = 0; x < g.size(); ++x)
        if (A.val.data[x] > 0.0) A.grad[x] += g[x];
      break;
    }
    case Op::kMean: {
      Node& A = nodes_[n.args[0]];
      double gv = g[0] / static_cast<double>(A.val.numel());
      for (double& ag : A.grad) ag += gv;
      break;
    }
    case Op::kSum: {
      Node& A = nodes_[n.args[0]];
      for (double& ag : A.grad) ag += g[0];
      break;
    }
    case Op::kSoftmaxRows: {
      Node& A = nodes_[n.args[0]];
      int m = n.val.shape[0], c = n.val.shape[1];
      for (int r = 0; r < m; ++r) {
        double dot = 0.0;
        for (int j = 0; j < c; ++j)
          dot += g[static_cast<size_t>(r) * c + j] * n.val.data[static_cast<size_t>(r) * c + j];
        for (int j = 0; j < c; ++j) {
          double y = n.val.data[static_cast<size_t>(r) * c + j];
          A.grad[static_cast<size_t>(r) * c + j] += y * (g[static_cast<size_t>(r) * c + j] - dot);
        }
      }
      break;
    }
    case Op::kLayerNorm: {
      Node& X = nodes_[n.args[0]];
      Node& G = nodes_[n.args[1]];
      Node& B = nodes_[n.args[2]];
      int m = n.val.shape[0], c = n.val.shape[1];
      for (int r = 0; r < m; ++r) {
        double inv = n.row_aux[r];
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < c; ++j) {
          size_t x = static_cast<size_t>(r) * c + j;
          double gy = g[x] * G.val.data[j];
          m1 += gy;
          m2 += gy * n.normed[x];
        }
        m1 /= c;
        m2 /= c;
        for (int j = 0; j < c; ++j) {
          size_t x = static_cast<size_t>(r) * c + j;
          double gy = g[x] * G.val.data[j];
          X.grad[x] += inv * (gy - m1 - n.normed[x] * m2);
          G.grad[j] += g[x] * n.normed[x];
          B.grad[j] += g[x];
        }
      }
      break;
    }
    case Op::kCrossEntropy: {
      Node& X = nodes_[n.args[0]];
      int L = X.val.shape[0], K = X.val.shape[1];
      double g0 = g[0] / n.n_valid;
      for (int r = 0; r < L; ++r) {
        if (n.ignore[r]) continue;
        double lse = n.row_aux[r];
        for (int j = 0; j < K; ++j) {
          double p = std::exp(X.val.data[static_cast<size_t>(r) * K + j] - lse);
          double onehot = (j == n.targets[r]) ? 1.0 : 0.0;
          X.grad[static_cast<size_t>(r) * K + j] += g0 * (p - onehot);
        }
      }
      break;
    }
  }
}

}  // namespace cmert
