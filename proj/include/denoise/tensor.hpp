#pragma once
// Dense tensors with reverse-mode differentiation on an explicit tape.
//
// A Tape owns every tensor created on it; Tensor is a cheap handle
// (tape pointer + node id). Records are appended in construction order,
// which is by construction a topological order, so backward is a single
// reverse sweep that visits each record exactly once. Values are
// immutable once created, so independent tapes can run on different
// threads.
//
// Shapes are explicit everywhere; the only implicit broadcast allowed is
// scalar-vs-tensor in add/sub/mul. Default element type is 64-bit float;
// 32-bit storage can be opted into per tensor (op results are rounded
// through float when every input is f32). Gradients are always f64.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "denoise/common.hpp"

namespace denoise {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

enum class Dtype : std::uint8_t { f64, f32 };

class Tape;

struct Tensor {
  Tape* tape = nullptr;
  int id = -1;

  bool defined() const { return tape != nullptr; }
  const Shape& shape() const;
  const std::vector<double>& value() const;
  Dtype dtype() const;
  std::int64_t size() const;
  int rows() const;
  int cols() const;
  double scalar() const;  // requires numel == 1
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves. `input` marks a differentiable leaf (a valid grad target);
  // `constant` is identical except grad() rejects it as a target.
  Tensor input(Shape shape, std::vector<double> data, Dtype dt = Dtype::f64);
  Tensor constant(Shape shape, std::vector<double> data, Dtype dt = Dtype::f64);
  Tensor scalar(double v);
  Tensor zeros(Shape shape);

  // Ops (also available as free functions below).
  Tensor matmul(Tensor a, Tensor b);
  Tensor add(Tensor a, Tensor b);
  Tensor sub(Tensor a, Tensor b);
  Tensor mul(Tensor a, Tensor b);
  Tensor add_bias(Tensor x, Tensor bias);  // x: [n,d], bias: [d]
  Tensor concat_cols(const std::vector<Tensor>& xs);
  Tensor slice_cols(Tensor x, int start, int len);
  Tensor reshape(Tensor x, Shape shape);
  Tensor sum(Tensor x);
  Tensor mean(Tensor x);
  Tensor row_sum(Tensor x);  // [n,d] -> [n]
  Tensor segment_sum(Tensor values, const std::vector<int>& segment_ids, int n_segments);
  Tensor segment_mean(Tensor values, const std::vector<int>& segment_ids, int n_segments);
  Tensor gather_rows(Tensor x, const std::vector<int>& rows);
  Tensor layer_norm(Tensor x, Tensor gain, Tensor bias);
  Tensor shifted_softplus(Tensor x);
  Tensor leaky_relu(Tensor x, double slope);
  Tensor affine(Tensor x, double scale, double shift);
  Tensor square(Tensor x);
  Tensor sqrt(Tensor x);
  Tensor exp(Tensor x);
  Tensor log(Tensor x);
  // Per-row loss_i = logsumexp(logits_i) - logits_i[labels_i]; shape [n].
  Tensor softmax_cross_entropy(Tensor logits, const std::vector<int>& labels);

  // Exact reverse-mode gradients of a scalar loss w.r.t. leaf tensors.
  // A leaf the loss does not depend on gets a zero gradient.
  std::vector<std::vector<double>> grad(Tensor loss, const std::vector<Tensor>& wrt);

  std::size_t size() const { return nodes_.size(); }

 private:
  friend struct Tensor;

  enum class Op : std::uint8_t {
    kInput, kConstant, kMatMul, kAdd, kSub, kMul, kAddBias, kConcatCols,
    kSliceCols, kReshape, kSum, kMean, kRowSum, kSegmentSum, kSegmentMean,
    kGatherRows, kLayerNorm, kSsp, kLeakyRelu, kAffine, kSquare, kSqrt,
    kExp, kLog, kSoftmaxXent,
  };

  struct Node {
    Op op;
    Dtype dtype;
    Shape shape;
    std::vector<double> val;
    std::vector<int> ins;
    std::vector<int> iaux;      // op-specific (segment ids, labels, slice bounds)
    std::array<double, 2> daux{0.0, 0.0};
  };

  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  Tensor push(Node n);
  Tensor leaf(Shape shape, std::vector<double> data, Dtype dt, bool differentiable);
  Dtype promote(std::initializer_list<Tensor> xs) const;
  void check_same_tape(Tensor t, const char* op) const;
  static void check_finite_shape(const Shape& s, const char* op);

  std::vector<Node> nodes_;
};

// Free-function spellings; dispatch on the first argument's tape.
Tensor matmul(Tensor a, Tensor b);
Tensor add(Tensor a, Tensor b);
Tensor sub(Tensor a, Tensor b);
Tensor mul(Tensor a, Tensor b);
Tensor add_bias(Tensor x, Tensor bias);
Tensor concat_cols(const std::vector<Tensor>& xs);
Tensor slice_cols(Tensor x, int start, int len);
Tensor reshape(Tensor x, Shape shape);
Tensor sum(Tensor x);
Tensor mean(Tensor x);
Tensor row_sum(Tensor x);
Tensor segment_sum(Tensor values, const std::vector<int>& segment_ids, int n_segments);
Tensor segment_mean(Tensor values, const std::vector<int>& segment_ids, int n_segments);
Tensor gather_rows(Tensor x, const std::vector<int>& rows);
Tensor layer_norm(Tensor x, Tensor gain, Tensor bias);
Tensor shifted_softplus(Tensor x);
Tensor leaky_relu(Tensor x, double slope);
Tensor affine(Tensor x, double scale, double shift);
Tensor square(Tensor x);
Tensor sqrt(Tensor x);
Tensor exp(Tensor x);
Tensor log(Tensor x);
Tensor softmax_cross_entropy(Tensor logits, const std::vector<int>& labels);

}  // namespace denoise
