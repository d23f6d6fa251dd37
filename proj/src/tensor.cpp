#include "denoise/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace denoise {

std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace {

constexpr double kLayerNormEps = 1e-6;  // variance floor; zero vectors map to zeros

[[noreturn]] void fail(const std::string& op, const std::string& what) {
  throw ContractViolation(op + ": " + what);
}

void round_f32(std::vector<double>& v) {
  for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    double* crow = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,k] += A[m,n] * B[k,n]^T
void gemm_nt(const double* a, const double* b, double* c, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * n;
    double* crow = c + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double* brow = b + static_cast<std::size_t>(p) * n;
      double s = 0.0;
      for (int j = 0; j < n; ++j) s += arow[j] * brow[j];
      crow[p] += s;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    const double* brow = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace

const Shape& Tensor::shape() const { return tape->node(id).shape; }
const std::vector<double>& Tensor::value() const { return tape->node(id).val; }
Dtype Tensor::dtype() const { return tape->node(id).dtype; }
std::int64_t Tensor::size() const { return numel(shape()); }

int Tensor::rows() const {
  const Shape& s = shape();
  if (s.size() != 2) fail("rows", "tensor is not 2-D, shape " + shape_str(s));
  return s[0];
}

int Tensor::cols() const {
  const Shape& s = shape();
  if (s.size() != 2) fail("cols", "tensor is not 2-D, shape " + shape_str(s));
  return s[1];
}

double Tensor::scalar() const {
  if (size() != 1) fail("scalar", "tensor has " + std::to_string(size()) + " elements");
  return value()[0];
}

void Tape::check_same_tape(Tensor t, const char* op) const {
  if (!t.defined() || t.tape != this) fail(op, "tensor does not belong to this tape");
}

Tensor Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Tensor{this, static_cast<int>(nodes_.size()) - 1};
}

Dtype Tape::promote(std::initializer_list<Tensor> xs) const {
  for (Tensor t : xs)
    if (t.dtype() == Dtype::f64) return Dtype::f64;
  return Dtype::f32;
}

Tensor Tape::leaf(Shape shape, std::vector<double> data, Dtype dt, bool differentiable) {
  if (numel(shape) != static_cast<std::int64_t>(data.size()))
    fail("input", "shape " + shape_str(shape) + " expects " + std::to_string(numel(shape)) +
                      " elements, got " + std::to_string(data.size()));
  Node n;
  n.op = differentiable ? Op::kInput : Op::kConstant;
  n.dtype = dt;
  n.shape = std::move(shape);
  if (dt == Dtype::f32) round_f32(data);
  n.val = std::move(data);
  return push(std::move(n));
}

Tensor Tape::input(Shape shape, std::vector<double> data, Dtype dt) {
  return leaf(std::move(shape), std::move(data), dt, true);
}

Tensor Tape::constant(Shape shape, std::vector<double> data, Dtype dt) {
  return leaf(std::move(shape), std::move(data), dt, false);
}

Tensor Tape::scalar(double v) { return constant(Shape{}, {v}); }

Tensor Tape::zeros(Shape shape) {
  const std::int64_t n = numel(shape);
  return constant(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
}

Tensor Tape::matmul(Tensor a, Tensor b) {
  check_same_tape(a, "matmul");
  check_same_tape(b, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    fail("matmul", "incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));
  const int m = sa[0], k = sa[1], n = sb[1];
  Node out;
  out.op = Op::kMatMul;
  out.dtype = promote({a, b});
  out.shape = {m, n};
  out.val.assign(static_cast<std::size_t>(m) * n, 0.0);
  gemm_nn(a.value().data(), b.value().data(), out.val.data(), m, k, n);
  if (out.dtype == Dtype::f32) round_f32(out.val);
  out.ins = {a.id, b.id};
  return push(std::move(out));
}

Tensor Tape::add(Tensor a, Tensor b) {
  check_same_tape(a, "add");
  check_same_tape(b, "add");
  const bool a_scalar = a.size() == 1;
  const bool b_scalar = b.size() == 1;
  if (!(a.shape() == b.shape() || a_scalar || b_scalar))
    fail("add", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Node out;
  out.op = Op::kAdd;
  out.dtype = promote({a, b});
  out.shape = (a_scalar && !b_scalar) ? b.shape() : a.shape();
  const std::size_t n = static_cast<std::size_t>(numel(out.shape));
  out.val.resize(n);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < n; ++i)
    out.val[i] = (a_scalar ? av[0] : av[i]) + (b_scalar ? bv[0] : bv[i]);
  if (out.dtype == Dtype::f32) round_f32(out.val);
  out.ins = {a.id, b.id};
  return push(std::move(out));
}

Tensor Tape::sub(Tensor a, Tensor b) {
  check_same_tape(a, "sub");
  check_same_tape(b, "sub");
  const bool a_scalar = a.size() == 1;
  const bool b_scalar = b.size() == 1;
  if (!(a.shape() == b.shape() || a_scalar || b_scalar))
    fail("sub", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Node out;
  out.op = Op::kSub;
  out.dtype = promote({a, b});
  out.shape = (a_scalar && !b_scalar) ? b.shape() : a.shape();
  const std::size_t n = static_cast<std::size_t>(numel(out.shape));
  out.val.resize(n);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < n; ++i)
    out.val[i] = (a_scalar ? av[0] : av[i]) - (b_scalar ? bv[0] : bv[i]);
  if (out.dtype == Dtype::f32) round_f32(out.val);
  out.ins = {a.id, b.id};
  return push(std::move(out));
}

Tensor Tape::mul(Tensor a, Tensor b) {
  check_same_tape(a, "mul");
  check_same_tape(b, "mul");
  const bool a_scalar = a.size() == 1;
  const bool b_scalar = b.size() == 1;
  if (!(a.shape() == b.shape() || a_scalar || b_scalar))
    fail("mul", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Node out;
  out.op = Op::kMul;
  out.dtype = promote({a, b});
  out.shape = (a_scalar && !b_scalar) ? b.shape() : a.shape();
  const std::size_t n = static_cast<std::size_t>(numel(out.shape));
  out.val.resize(n);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < n; ++i)
    out.val[i] = (a_scalar ? av[0] : av[i]) * (b_scalar ? bv[0] : bv[i]);
  if (out.dtype == Dtype::f32) round_f32(out.val);
  out.ins = {a.id, b.id};
  return push(std::move(out));
}

Tensor Tape::add_bias(Tensor x, Tensor bias) {
  check_same_tape(x, "add_bias");
  check_same_tape(bias, "add_bias");
  if (x.shape().size() != 2 || bias.shape().size() != 1 || bias.shape()[0] != x.cols())
    fail("add_bias", "expected [n,d] + [d], got " + shape_str(x.shape()) + " + " +
                         shape_str(bias.shape()));
  const int n = x.rows(), d = x.cols();
  Node out;
  out.op = Op::kAddBias;
  out.dtype = promote({x, bias});
  out.shape = x.shape();
  out.val.resize(static_cast<std::size_t>(n) * d);
  const auto& xv = x.value();
  const auto& bv = bias.value();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      out.val[static_cast<std::size_t>(i) * d + j] = xv[static_cast<std::size_t>(i) * d + j] + bv[j];
  if (out.dtype == Dtype::f32) round_f32(out.val);
  out.ins = {x.id, bias.id};
  return push(std::move(out));
}

Tensor Tape::concat_cols(const std::vector<Tensor>& xs) {
  if (xs.empty()) fail("concat_cols", "empty input list");
  int n = -1, total = 0;
  for (Tensor t : xs) {
    check_same_tape(t, "concat_cols");
    if (t.shape().size() != 2) fail("concat_cols", "inputs must be 2-D");
    if (n < 0) n = t.rows();
    if (t.rows() != n) fail("concat_cols", "row count mismatch");
    total += t.cols();
  }
  Node out;
  out.op = Op::kConcatCols;
  out.dtype = Dtype::f32;
  for (Tensor t : xs)
    if (t.dtype() == Dtype::f64) out.dtype = Dtype::f64;
  out.shape = {n, total};
  out.val.resize(static_cast<std::size_t>(n) * total);
  int off = 0;
  for (Tensor t : xs) {
    const int d = t.cols();
    const auto& v = t.value();
    for (int i = 0; i < n; ++i)
      std::copy_n(v.begin() + static_cast<std::size_t>(i) * d, d,
                  out.val.begin() + static_cast<std::size_t>(i) * total + off);
    off += d;
    out.ins.push_back(t.id);
    out.iaux.push_back(d);
  }
  return push(std::move(out));
}

Tensor Tape::slice_cols(Tensor x, int start, int len) {
  check_same_tape(x, "slice_cols");
  if (x.shape().size() != 2) fail("slice_cols", "input must be 2-D");
  const int n = x.rows(), d = x.cols();
  if (start < 0 || len < 1 || start + len > d)
    fail("slice_cols", "range [" + std::to_string(start) + "," + std::to_string(start + len) +
                           ") out of bounds for " + std::to_string(d) + " columns");
  Node out;
  out.op = Op::kSliceCols;
  out.dtype = x.dtype();
  out.shape = {n, len};
  out.val.resize(static_cast<std::size_t>(n) * len);
  const auto& v = x.value();
  for (int i = 0; i < n; ++i)
    std::copy_n(v.begin() + static_cast<std::size_t>(i) * d + start, len,
                out.val.begin() + static_cast<std::size_t>(i) * len);
  out.ins = {x.id};
  out.iaux = {start, len};
  return push(std::move(out));
}

Tensor Tape::reshape(Tensor x, Shape shape) {
  check_same_tape(x, "reshape");
  if (numel(shape) != x.size())
    fail("reshape", "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  Node out;
  out.op = Op::kReshape;
  out.dtype = x.dtype();
  out.shape = std::move(shape);
  out.val = x.value();
  out.ins = {x.id};
  return push(std::move(out));
}

Tensor Tape::sum(Tensor x) {
  check_same_tape(x, "sum");
  Node out;
  out.op = Op::kSum;
  out.dtype = x.dtype();
  out.shape = {};
  double s = 0.0;
  for (double v : x.value()) s += v;
  out.val = {s};
  if (out.dtype == Dtype::f32) round_f32(out.val);
  out.ins = {x.id};
  return push(std::move(out));
}

Tensor Tape::mean(Tensor x) {
  check_same_tape(x, "mean");
  if (x.size() == 0) fail("mean", "empty tensor");
  Node out;
  out.op = Op::kMean;
  out.dtype = x.dtype();
  out.shape = {};
  double s = 0.0;
  for (double v : x.value()) s += v;
  out.val = {s / static_cast<double>(x.size())};
  if (out.dtype == Dtype::f32) round_f32(out.val);
  out.ins = {x.id};
  return push(std::move(out));
}

Tensor Tape::row_sum(Tensor x) {
  check_same_tape(x, "row_sum");
  if (x.shape().size() != 2) fail("row_sum", "input must be 2-D");
  const int n = x.rows(), d = x.cols();
  Node out;
  out.op = Op::kRowSum;
  out.dtype = x.dtype();
  out.shape = {n};
  out.val.resize(static_cast<std::size_t>(n));
  const auto& v = x.value();
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += v[static_cast<std::size_t>(i) * d + j];
    out.val[static_cast<std::size_t>(i)] = s;
  }
  if (out.dtype == Dtype::f32) round_f32(out.val);
  out.ins = {x.id};
  return push(std::move(out));
}

static void check_segment_ids(const std::vector<int>& ids, int n_rows, int n_segments,
                              const char* op) {
  if (static_cast<int>(ids.size()) != n_rows)
    fail(op, "segment_ids length " + std::to_string(ids.size()) + " != rows " +
                 std::to_string(n_rows));
  for (int id : ids)
    if (id < 0 || id >= n_segments)
      fail(op, "segment id " + std::to_string(id) + " outside [0," +
                   std::to_string(n_segments) + ")");
}

Tensor Tape::segment_sum(Tensor values, const std::vector<int>& segment_ids, int n_segments) {
  check_same_tape(values, "segment_sum");
  if (values.shape().size() != 2) fail("segment_sum", "values must be 2-D");
  if (n_segments < 1) fail("segment_sum", "n_segments must be >= 1");
  const int n = values.rows(), d = values.cols();
  check_segment_ids(segment_ids, n, n_segments, "segment_sum");
  Node out;
  out.op = Op::kSegmentSum;
  out.dtype = values.dtype();
  out.shape = {n_segments, d};
  out.val.assign(static_cast<std::size_t>(n_segments) * d, 0.0);
  const auto& v = values.value();
  for (int i = 0; i < n; ++i) {
    double* dst = out.val.data() + static_cast<std::size_t>(segment_ids[i]) * d;
    const double* src = v.data() + static_cast<std::size_t>(i) * d;
    for (int j = 0; j < d; ++j) dst[j] += src[j];
  }
  if (out.dtype == Dtype::f32) round_f32(out.val);
  out.ins = {values.id};
  out.iaux = segment_ids;
  return push(std::move(out));
}

Tensor Tape::segment_mean(Tensor values, const std::vector<int>& segment_ids, int n_segments) {
  check_same_tape(values, "segment_mean");
  if (values.shape().size() != 2) fail("segment_mean", "values must be 2-D");
  if (n_segments < 1) fail("segment_mean", "n_segments must be >= 1");
  const int n = values.rows(), d = values.cols();
  check_segment_ids(segment_ids, n, n_segments, "segment_mean");
  Node out;
  out.op = Op::kSegmentMean;
  out.dtype = values.dtype();
  out.shape = {n_segments, d};
  out.val.assign(static_cast<std::size_t>(n_segments) * d, 0.0);
  std::vector<int> counts(static_cast<std::size_t>(n_segments), 0);
  const auto& v = values.value();
  for (int i = 0; i < n; ++i) {
    counts[static_cast<std::size_t>(segment_ids[i])]++;
    double* dst = out.val.data() + static_cast<std::size_t>(segment_ids[i]) * d;
    const double* src = v.data() + static_cast<std::size_t>(i) * d;
    for (int j = 0; j < d; ++j) dst[j] += src[j];
  }
  // An empty segment stays a zero vector.
  for (int s = 0; s < n_segments; ++s) {
    if (counts[static_cast<std::size_t>(s)] == 0) continue;
    const double inv = 1.0 / counts[static_cast<std::size_t>(s)];
    double* dst = out.val.data() + static_cast<std::size_t>(s) * d;
    for (int j = 0; j < d; ++j) dst[j] *= inv;
  }
  if (out.dtype == Dtype::f32) round_f32(out.val);
  out.ins = {values.id};
  out.iaux = segment_ids;
  return push(std::move(out));
}

Tensor Tape::gather_rows(Tensor x, const std::vector<int>& rows) {
  check_same_tape(x, "gather_rows");
  if (x.shape().size() != 2) fail("gather_rows", "input must be 2-D");
  const int n = x.rows(), d = x.cols();
  for (int r : rows)
    if (r < 0 || r >= n)
      fail("gather_rows", "row " + std::to_string(r) + " outside [0," + std::to_string(n) + ")");
  Node out;
  out.op = Op::kGatherRows;
  out.dtype = x.dtype();
  out.shape = {static_cast<int>(rows.size()), d};
  out.val.resize(rows.size() * static_cast<std::size_t>(d));
  const auto& v = x.value();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(v.begin() + static_cast<std::size_t>(rows[i]) * d, d, out.val.begin() + i * d);
  out.ins = {x.id};
  out.iaux = rows;
  return push(std::move(out));
}

Tensor Tape::layer_norm(Tensor x, Tensor gain, Tensor bias) {
  check_same_tape(x, "layer_norm");
  check_same_tape(gain, "layer_norm");
  check_same_tape(bias, "layer_norm");
  if (x.shape().size() != 2) fail("layer_norm", "input must be 2-D");
  const int n = x.rows(), d = x.cols();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
    fail("layer_norm", "gain/bias must have shape [" + std::to_string(d) + "]");
  Node out;
  out.op = Op::kLayerNorm;
  out.dtype = promote({x, gain, bias});
  out.shape = x.shape();
  out.val.resize(static_cast<std::size_t>(n) * d);
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  for (int i = 0; i < n; ++i) {
    const double* row = xv.data() + static_cast<std::size_t>(i) * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    double* orow = out.val.data() + static_cast<std::size_t>(i) * d;
    for (int j = 0; j < d; ++j) orow[j] = (row[j] - mu) * inv * gv[j] + bv[j];
  }
  if (out.dtype == Dtype::f32) round_f32(out.val);
  out.ins = {x.id, gain.id, bias.id};
  return push(std::move(out));
}

Tensor Tape::shifted_softplus(Tensor x) {
  check_same_tape(x, "shifted_softplus");
  Node out;
  out.op = Op::kSsp;
  out.dtype = x.dtype();
  out.shape = x.shape();
  out.val.resize(x.value().size());
  const auto& v = x.value();
  const double ln2 = std::log(2.0);
  for (std::size_t i = 0; i < v.size(); ++i) out.val[i] = stable_softplus(v[i]) - ln2;
  if (out.dtype == Dtype::f32) round_f32(out.val);
  out.ins = {x.id};
  return push(std::move(out));
}

Tensor Tape::leaky_relu(Tensor x, double slope) {
  check_same_tape(x, "leaky_relu");
  Node out;
  out.op = Op::kLeakyRelu;
  out.dtype = x.dtype();
  out.shape = x.shape();
  out.val.resize(x.value().size());
  const auto& v = x.value();
  for (std::size_t i = 0; i < v.size(); ++i) out.val[i] = v[i] >= 0.0 ? v[i] : slope * v[i];
  if (out.dtype == Dtype::f32) round_f32(out.val);
  out.ins = {x.id};
  out.daux[0] = slope;
  return push(std::move(out));
}

Tensor Tape::affine(Tensor x, double scale, double shift) {
  check_same_tape(x, "affine");
  Node out;
  out.op = Op::kAffine;
  out.dtype = x.dtype();
  out.shape = x.shape();
  out.val.resize(x.value().size());
  const auto& v = x.value();
  for (std::size_t i = 0; i < v.size(); ++i) out.val[i] = v[i] * scale + shift;
  if (out.dtype == Dtype::f32) round_f32(out.val);
  out.ins = {x.id};
  out.daux = {scale, shift};
  return push(std::move(out));
}

Tensor Tape::square(Tensor x) {
  check_same_tape(x, "square");
  Node out;
  out.op = Op::kSquare;
  out.dtype = x.dtype();
  out.shape = x.shape();
  out.val.resize(x.value().size());
  const auto& v = x.value();
  for (std::size_t i = 0; i < v.size(); ++i) out.val[i] = v[i] * v[i];
  if (out.dtype == Dtype::f32) round_f32(out.val);
  out.ins = {x.id};
  return push(std::move(out));
}

Tensor Tape::sqrt(Tensor x) {
  check_same_tape(x, "sqrt");
  Node out;
  out.op = Op::kSqrt;
  out.dtype = x.dtype();
  out.shape = x.shape();
  out.val.resize(x.value().size());
  const auto& v = x.value();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] < 0.0) fail("sqrt", "negative input " + std::to_string(v[i]));
    out.val[i] = std::sqrt(v[i]);
  }
  if (out.dtype == Dtype::f32) round_f32(out.val);
  out.ins = {x.id};
  return push(std::move(out));
}

Tensor Tape::exp(Tensor x) {
  check_same_tape(x, "exp");
  Node out;
  out.op = Op::kExp;
  out.dtype = x.dtype();
  out.shape = x.shape();
  out.val.resize(x.value().size());
  const auto& v = x.value();
  for (std::size_t i = 0; i < v.size(); ++i) {
    out.val[i] = std::exp(v[i]);
    if (!std::isfinite(out.val[i])) fail("exp", "overflow at input " + std::to_string(v[i]));
  }
  if (out.dtype == Dtype::f32) round_f32(out.val);
  out.ins = {x.id};
  return push(std::move(out));
}

Tensor Tape::log(Tensor x) {
  check_same_tape(x, "log");
  Node out;
  out.op = Op::kLog;
  out.dtype = x.dtype();
  out.shape = x.shape();
  out.val.resize(x.value().size());
  const auto& v = x.value();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] <= 0.0) fail("log", "non-positive input " + std::to_string(v[i]));
    out.val[i] = std::log(v[i]);
  }
  if (out.dtype == Dtype::f32) round_f32(out.val);
  out.ins = {x.id};
  return push(std::move(out));
}

Tensor Tape::softmax_cross_entropy(Tensor logits, const std::vector<int>& labels) {
  check_same_tape(logits, "softmax_cross_entropy");
  if (logits.shape().size() != 2) fail("softmax_cross_entropy", "logits must be 2-D");
  const int n = logits.rows(), k = logits.cols();
  if (static_cast<int>(labels.size()) != n)
    fail("softmax_cross_entropy", "labels length " + std::to_string(labels.size()) +
                                      " != rows " + std::to_string(n));
  for (int l : labels)
    if (l < 0 || l >= k)
      fail("softmax_cross_entropy", "label " + std::to_string(l) + " outside [0," +
                                        std::to_string(k) + ")");
  Node out;
  out.op = Op::kSoftmaxXent;
  out.dtype = logits.dtype();
  out.shape = {n};
  out.val.resize(static_cast<std::size_t>(n));
  const auto& v = logits.value();
  for (int i = 0; i < n; ++i) {
    const double* row = v.data() + static_cast<std::size_t>(i) * k;
    double m = row[0];
    for (int j = 1; j < k; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += std::exp(row[j] - m);
    const double lse = m + std::log(s);
    out.val[static_cast<std::size_t>(i)] = lse - row[labels[static_cast<std::size_t>(i)]];
  }
  if (out.dtype == Dtype::f32) round_f32(out.val);
  out.ins = {logits.id};
  out.iaux = labels;
  return push(std::move(out));
}

std::vector<std::vector<double>> Tape::grad(Tensor loss, const std::vector<Tensor>& wrt) {
  check_same_tape(loss, "grad");
  if (loss.size() != 1) fail("grad", "loss must be scalar, got shape " + shape_str(loss.shape()));
  for (Tensor t : wrt) {
    check_same_tape(t, "grad");
    if (node(t.id).op != Op::kInput)
      fail("grad", "gradient target " + std::to_string(t.id) + " is not a differentiable leaf");
  }

  std::vector<std::vector<double>> adj(nodes_.size());
  auto acc = [&](int id) -> std::vector<double>& {
    auto& a = adj[static_cast<std::size_t>(id)];
    if (a.empty()) a.assign(node(id).val.size(), 0.0);
    return a;
  };
  acc(loss.id)[0] = 1.0;

  for (int i = loss.id; i >= 0; --i) {
    const Node& nd = nodes_[static_cast<std::size_t>(i)];
    const auto& g = adj[static_cast<std::size_t>(i)];
    if (g.empty()) continue;
    switch (nd.op) {
      case Op::kInput:
      case Op::kConstant:
        break;
      case Op::kMatMul: {
        const Node& a = node(nd.ins[0]);
        const Node& b = node(nd.ins[1]);
        const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
        gemm_nt(g.data(), b.val.data(), acc(nd.ins[0]).data(), m, n, k);
        gemm_tn(a.val.data(), g.data(), acc(nd.ins[1]).data(), m, k, n);
        break;
      }
      case Op::kAdd:
      case Op::kSub: {
        const double sign = nd.op == Op::kSub ? -1.0 : 1.0;
        for (int s = 0; s < 2; ++s) {
          auto& ga = acc(nd.ins[static_cast<std::size_t>(s)]);
          const double f = s == 0 ? 1.0 : sign;
          if (ga.size() == g.size()) {
            for (std::size_t j = 0; j < g.size(); ++j) ga[j] += f * g[j];
          } else {  // scalar side
            double acc_s = 0.0;
            for (double gv : g) acc_s += gv;
            ga[0] += f * acc_s;
          }
        }
        break;
      }
      case Op::kMul: {
        const Node& a = node(nd.ins[0]);
        const Node& b = node(nd.ins[1]);
        const bool as = a.val.size() == 1, bs = b.val.size() == 1;
        auto& ga = acc(nd.ins[0]);
        auto& gb = acc(nd.ins[1]);
        for (std::size_t j = 0; j < g.size(); ++j) {
          const double av = as ? a.val[0] : a.val[j];
          const double bv = bs ? b.val[0] : b.val[j];
          if (as)
            ga[0] += g[j] * bv;
          else
            ga[j] += g[j] * bv;
          if (bs)
            gb[0] += g[j] * av;
          else
            gb[j] += g[j] * av;
        }
        break;
      }
      case Op::kAddBias: {
        const int n = nd.shape[0], d = nd.shape[1];
        auto& gx = acc(nd.ins[0]);
        auto& gb = acc(nd.ins[1]);
        for (std::size_t j = 0; j < g.size(); ++j) gx[j] += g[j];
        for (int r = 0; r < n; ++r)
          for (int c = 0; c < d; ++c) gb[static_cast<std::size_t>(c)] += g[static_cast<std::size_t>(r) * d + c];
        break;
      }
      case Op::kConcatCols: {
        const int n = nd.shape[0], total = nd.shape[1];
        int off = 0;
        for (std::size_t s = 0; s < nd.ins.size(); ++s) {
          const int d = nd.iaux[s];
          auto& gi = acc(nd.ins[s]);
          for (int r = 0; r < n; ++r)
            for (int c = 0; c < d; ++c)
              gi[static_cast<std::size_t>(r) * d + c] +=
                  g[static_cast<std::size_t>(r) * total + off + c];
          off += d;
        }
        break;
      }
      case Op::kSliceCols: {
        const Node& x = node(nd.ins[0]);
        const int n = nd.shape[0], len = nd.shape[1], d = x.shape[1], start = nd.iaux[0];
        auto& gx = acc(nd.ins[0]);
        for (int r = 0; r < n; ++r)
          for (int c = 0; c < len; ++c)
            gx[static_cast<std::size_t>(r) * d + start + c] +=
                g[static_cast<std::size_t>(r) * len + c];
        break;
      }
      case Op::kReshape: {
        auto& gx = acc(nd.ins[0]);
        for (std::size_t j = 0; j < g.size(); ++j) gx[j] += g[j];
        break;
      }
      case Op::kSum: {
        auto& gx = acc(nd.ins[0]);
        for (double& v : gx) v += g[0];
        break;
      }
      case Op::kMean: {
        auto& gx = acc(nd.ins[0]);
        const double f = g[0] / static_cast<double>(gx.size());
        for (double& v : gx) v += f;
        break;
      }
      case Op::kRowSum: {
        const Node& x = node(nd.ins[0]);
        const int n = x.shape[0], d = x.shape[1];
        auto& gx = acc(nd.ins[0]);
        for (int r = 0; r < n; ++r)
          for (int c = 0; c < d; ++c)
            gx[static_cast<std::size_t>(r) * d + c] += g[static_cast<std::size_t>(r)];
        break;
      }
      case Op::kSegmentSum: {
        const Node& x = node(nd.ins[0]);
        const int n = x.shape[0], d = x.shape[1];
        auto& gx = acc(nd.ins[0]);
        for (int r = 0; r < n; ++r) {
          const double* src = g.data() + static_cast<std::size_t>(nd.iaux[static_cast<std::size_t>(r)]) * d;
          double* dst = gx.data() + static_cast<std::size_t>(r) * d;
          for (int c = 0; c < d; ++c) dst[c] += src[c];
        }
        break;
      }
      case Op::kSegmentMean: {
        const Node& x = node(nd.ins[0]);
        const int n = x.shape[0], d = x.shape[1], s = nd.shape[0];
        std::vector<int> counts(static_cast<std::size_t>(s), 0);
        for (int r = 0; r < n; ++r) counts[static_cast<std::size_t>(nd.iaux[static_cast<std::size_t>(r)])]++;
        auto& gx = acc(nd.ins[0]);
        for (int r = 0; r < n; ++r) {
          const int seg = nd.iaux[static_cast<std::size_t>(r)];
          const double inv = 1.0 / counts[static_cast<std::size_t>(seg)];
          const double* src = g.data() + static_cast<std::size_t>(seg) * d;
          double* dst = gx.data() + static_cast<std::size_t>(r) * d;
          for (int c = 0; c < d; ++c) dst[c] += inv * src[c];
        }
        break;
      }
      case Op::kGatherRows: {
        const Node& x = node(nd.ins[0]);
        const int d = x.shape[1];
        auto& gx = acc(nd.ins[0]);
        for (std::size_t r = 0; r < nd.iaux.size(); ++r) {
          double* dst = gx.data() + static_cast<std::size_t>(nd.iaux[r]) * d;
          const double* src = g.data() + r * d;
          for (int c = 0; c < d; ++c) dst[c] += src[c];
        }
        break;
      }
      case Op::kLayerNorm: {
        const Node& x = node(nd.ins[0]);
        const Node& gn = node(nd.ins[1]);
        const int n = x.shape[0], d = x.shape[1];
        auto& gx = acc(nd.ins[0]);
        auto& gg = acc(nd.ins[1]);
        auto& gb = acc(nd.ins[2]);
        for (int r = 0; r < n; ++r) {
          const double* row = x.val.data() + static_cast<std::size_t>(r) * d;
          const double* grow = g.data() + static_cast<std::size_t>(r) * d;
          double mu = 0.0;
          for (int j = 0; j < d; ++j) mu += row[j];
          mu /= d;
          double var = 0.0;
          for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
          var /= d;
          const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
          // dxhat = g * gain; then the standard three-term layer-norm backward.
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (int j = 0; j < d; ++j) {
            const double xhat = (row[j] - mu) * inv;
            const double dxhat = grow[j] * gn.val[static_cast<std::size_t>(j)];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            gg[static_cast<std::size_t>(j)] += grow[j] * xhat;
            gb[static_cast<std::size_t>(j)] += grow[j];
          }
          for (int j = 0; j < d; ++j) {
            const double xhat = (row[j] - mu) * inv;
            const double dxhat = grow[j] * gn.val[static_cast<std::size_t>(j)];
            gx[static_cast<std::size_t>(r) * d + j] +=
                inv * (dxhat - sum_dxhat / d - xhat * sum_dxhat_xhat / d);
          }
        }
        break;
      }
      case Op::kSsp: {
        const Node& x = node(nd.ins[0]);
        auto& gx = acc(nd.ins[0]);
        for (std::size_t j = 0; j < g.size(); ++j) {
          const double s = 1.0 / (1.0 + std::exp(-x.val[j]));
          gx[j] += g[j] * s;
        }
        break;
      }
      case Op::kLeakyRelu: {
        const Node& x = node(nd.ins[0]);
        auto& gx = acc(nd.ins[0]);
        for (std::size_t j = 0; j < g.size(); ++j)
          gx[j] += g[j] * (x.val[j] >= 0.0 ? 1.0 : nd.daux[0]);
        break;
      }
      case Op::kAffine: {
        auto& gx = acc(nd.ins[0]);
        for (std::size_t j = 0; j < g.size(); ++j) gx[j] += g[j] * nd.daux[0];
        break;
      }
      case Op::kSquare: {
        const Node& x = node(nd.ins[0]);
        auto& gx = acc(nd.ins[0]);
        for (std::size_t j = 0; j < g.size(); ++j) gx[j] += g[j] * 2.0 * x.val[j];
        break;
      }
      case Op::kSqrt: {
        auto& gx = acc(nd.ins[0]);
        for (std::size_t j = 0; j < g.size(); ++j) gx[j] += g[j] * 0.5 / nd.val[j];
        break;
      }
      case Op::kExp: {
        auto& gx = acc(nd.ins[0]);
        for (std::size_t j = 0; j < g.size(); ++j) gx[j] += g[j] * nd.val[j];
        break;
      }
      case Op::kLog: {
        const Node& x = node(nd.ins[0]);
        auto& gx = acc(nd.ins[0]);
        for (std::size_t j = 0; j < g.size(); ++j) gx[j] += g[j] / x.val[j];
        break;
      }
      case Op::kSoftmaxXent: {
        const Node& x = node(nd.ins[0]);
        const int n = x.shape[0], k = x.shape[1];
        auto& gx = acc(nd.ins[0]);
        for (int r = 0; r < n; ++r) {
          const double* row = x.val.data() + static_cast<std::size_t>(r) * k;
          double m = row[0];
          for (int j = 1; j < k; ++j) m = std::max(m, row[j]);
          double s = 0.0;
          for (int j = 0; j < k; ++j) s += std::exp(row[j] - m);
          const double gr = g[static_cast<std::size_t>(r)];
          for (int j = 0; j < k; ++j) {
            const double p = std::exp(row[j] - m) / s;
            gx[static_cast<std::size_t>(r) * k + j] +=
                gr * (p - (j == nd.iaux[static_cast<std::size_t>(r)] ? 1.0 : 0.0));
          }
        }
        break;
      }
    }
  }

  std::vector<std::vector<double>> out;
  out.reserve(wrt.size());
  for (Tensor t : wrt) {
    auto& a = adj[static_cast<std::size_t>(t.id)];
    if (a.empty()) a.assign(node(t.id).val.size(), 0.0);
    out.push_back(a);
  }
  return out;
}

Tensor matmul(Tensor a, Tensor b) { return a.tape->matmul(a, b); }
Tensor add(Tensor a, Tensor b) { return a.tape->add(a, b); }
Tensor sub(Tensor a, Tensor b) { return a.tape->sub(a, b); }
Tensor mul(Tensor a, Tensor b) { return a.tape->mul(a, b); }
Tensor add_bias(Tensor x, Tensor bias) { return x.tape->add_bias(x, bias); }
Tensor concat_cols(const std::vector<Tensor>& xs) { return xs.at(0).tape->concat_cols(xs); }
Tensor slice_cols(Tensor x, int start, int len) { return x.tape->slice_cols(x, start, len); }
Tensor reshape(Tensor x, Shape shape) { return x.tape->reshape(x, std::move(shape)); }
Tensor sum(Tensor x) { return x.tape->sum(x); }
Tensor mean(Tensor x) { return x.tape->mean(x); }
Tensor row_sum(Tensor x) { return x.tape->row_sum(x); }
Tensor segment_sum(Tensor values, const std::vector<int>& ids, int n) {
  return values.tape->segment_sum(values, ids, n);
}
Tensor segment_mean(Tensor values, const std::vector<int>& ids, int n) {
  return values.tape->segment_mean(values, ids, n);
}
Tensor gather_rows(Tensor x, const std::vector<int>& rows) { return x.tape->gather_rows(x, rows); }
Tensor layer_norm(Tensor x, Tensor gain, Tensor bias) { return x.tape->layer_norm(x, gain, bias); }
Tensor shifted_softplus(Tensor x) { return x.tape->shifted_softplus(x); }
Tensor leaky_relu(Tensor x, double slope) { return x.tape->leaky_relu(x, slope); }
Tensor affine(Tensor x, double scale, double shift) { return x.tape->affine(x, scale, shift); }
Tensor square(Tensor x) { return x.tape->square(x); }
Tensor sqrt(Tensor x) { return x.tape->sqrt(x); }
Tensor exp(Tensor x) { return x.tape->exp(x); }
Tensor log(Tensor x) { return x.tape->log(x); }
Tensor softmax_cross_entropy(Tensor logits, const std::vector<int>& labels) {
  return logits.tape->softmax_cross_entropy(logits, labels);
}

}  // namespace denoise
