#include "slrf/array.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <sstream>

namespace slrf {

namespace {
std::atomic<uint64_t> g_uid{1};
thread_local Tape* t_active_tape = nullptr;
bool g_debug_checks = false;
}  // namespace

void set_debug_checks(bool on) { g_debug_checks = on; }
bool debug_checks() { return g_debug_checks; }

int64_t Array::numel() const {
  int64_t n = 1;
  for (int64_t d : shape_) n *= d;
  return storage_ ? n : 0;
}

Dtype Array::dtype() const {
  if (!storage_) return Dtype::F32;
  return std::holds_alternative<std::vector<float>>(storage_->buf) ? Dtype::F32
                                                                   : Dtype::F64;
}

Array& Array::set_requires_grad(bool v) {
  requires_grad_ = v;
  return *this;
}

// Buffers carry 16 elements of zeroed slack past the logical end so the gemm
// kernels can stream full-width vector loads through column tails.
constexpr size_t kSlack = 16;

Array Array::alloc(std::vector<int64_t> shape, Dtype dt) {
  Array a;
  a.storage_ = std::make_shared<Storage>();
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) fail_usage("negative dimension in shape");
    n *= d;
  }
  if (dt == Dtype::F32)
    a.storage_->buf = std::vector<float>(static_cast<size_t>(n) + kSlack);
  else
    a.storage_->buf = std::vector<double>(static_cast<size_t>(n) + kSlack);
  a.shape_ = std::move(shape);
  a.uid_ = g_uid.fetch_add(1, std::memory_order_relaxed);
  return a;
}

Array Array::zeros(std::vector<int64_t> shape, Dtype dt) {
  return alloc(std::move(shape), dt);
}

Array Array::full(std::vector<int64_t> shape, double value, Dtype dt) {
  Array a = alloc(std::move(shape), dt);
  if (dt == Dtype::F32) {
    auto s = a.data<float>();
    std::fill(s.begin(), s.end(), static_cast<float>(value));
  } else {
    auto s = a.data<double>();
    std::fill(s.begin(), s.end(), value);
  }
  return a;
}

Array Array::from_f32(std::vector<float> values, std::vector<int64_t> shape) {
  Array a;
  a.storage_ = std::make_shared<Storage>();
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  if (n != static_cast<int64_t>(values.size()))
    fail_usage("from_f32: value count does not match shape");
  values.resize(values.size() + kSlack, 0.0f);
  a.storage_->buf = std::move(values);
  a.shape_ = std::move(shape);
  a.uid_ = g_uid.fetch_add(1, std::memory_order_relaxed);
  return a;
}

Array Array::from_f64(std::vector<double> values, std::vector<int64_t> shape) {
  Array a;
  a.storage_ = std::make_shared<Storage>();
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  if (n != static_cast<int64_t>(values.size()))
    fail_usage("from_f64: value count does not match shape");
  values.resize(values.size() + kSlack, 0.0);
  a.storage_->buf = std::move(values);
  a.shape_ = std::move(shape);
  a.uid_ = g_uid.fetch_add(1, std::memory_order_relaxed);
  return a;
}

Array Array::from_doubles(const std::vector<double>& values,
                          std::vector<int64_t> shape, Dtype dt) {
  if (dt == Dtype::F64) return from_f64(values, std::move(shape));
  std::vector<float> f(values.begin(), values.end());
  return from_f32(std::move(f), std::move(shape));
}

Array Array::scalar(double value, Dtype dt) {
  return full({}, value, dt);
}

template <class T>
std::span<T> Array::data() {
  if (!storage_) fail_internal("data() on undefined array");
  return std::span<T>(std::get<std::vector<T>>(storage_->buf).data(),
                      static_cast<size_t>(numel()));
}

template <class T>
std::span<const T> Array::cdata() const {
  if (!storage_) fail_internal("cdata() on undefined array");
  return std::span<const T>(std::get<std::vector<T>>(storage_->buf).data(),
                            static_cast<size_t>(numel()));
}

template std::span<float> Array::data<float>();
template std::span<double> Array::data<double>();
template std::span<const float> Array::cdata<float>() const;
template std::span<const double> Array::cdata<double>() const;

double Array::item() const {
  if (numel() != 1) fail_usage("item() on non-scalar array of shape " + shape_str());
  return at(0);
}

double Array::at(int64_t i) const {
  return dtype() == Dtype::F32 ? static_cast<double>(cdata<float>()[i])
                               : cdata<double>()[i];
}

Array Array::astype(Dtype dt) const {
  if (dt == dtype()) return clone();
  Array out = alloc(shape_, dt);
  int64_t n = numel();
  if (dt == Dtype::F64) {
    auto src = cdata<float>();
    auto dst = out.data<double>();
    for (int64_t i = 0; i < n; ++i) dst[i] = src[i];
  } else {
    auto src = cdata<double>();
    auto dst = out.data<float>();
    for (int64_t i = 0; i < n; ++i) dst[i] = static_cast<float>(src[i]);
  }
  return out;
}

Array Array::clone() const {
  Array out = alloc(shape_, dtype());
  if (dtype() == Dtype::F32) {
    auto src = cdata<float>();
    std::copy(src.begin(), src.end(), out.data<float>().begin());
  } else {
    auto src = cdata<double>();
    std::copy(src.begin(), src.end(), out.data<double>().begin());
  }
  return out;
}

Array Array::reshaped(std::vector<int64_t> shape) const {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  if (n != numel()) fail_usage("reshape: numel mismatch");
  Array out = *this;
  out.shape_ = std::move(shape);
  out.uid_ = g_uid.fetch_add(1, std::memory_order_relaxed);
  out.requires_grad_ = false;
  return out;
}

bool Array::all_finite() const {
  int64_t n = numel();
  if (dtype() == Dtype::F32) {
    auto s = cdata<float>();
    for (int64_t i = 0; i < n; ++i)
      if (!std::isfinite(s[i])) return false;
  } else {
    auto s = cdata<double>();
    for (int64_t i = 0; i < n; ++i)
      if (!std::isfinite(s[i])) return false;
  }
  return true;
}

std::string Array::shape_str() const {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape_.size(); ++i)
    os << shape_[i] << (i + 1 < shape_.size() ? ", " : "");
  os << ")";
  return os.str();
}

Array make_like(const Array& proto, std::vector<int64_t> shape) {
  return Array::alloc(std::move(shape), proto.dtype());
}

// ---------------------------------------------------------------------------

void IndexPlan::build_inverse() const {
  if (!inv_offsets.empty() || idx.empty()) return;
  inv_offsets.assign(static_cast<size_t>(src_rows) + 1, 0);
  for (int64_t r : idx) {
    if (r < 0 || r >= src_rows) fail_internal("index plan out of range");
    ++inv_offsets[static_cast<size_t>(r) + 1];
  }
  for (size_t i = 1; i < inv_offsets.size(); ++i) inv_offsets[i] += inv_offsets[i - 1];
  inv_order.resize(idx.size());
  std::vector<int64_t> cursor(inv_offsets.begin(), inv_offsets.end() - 1);
  for (int64_t j = 0; j < static_cast<int64_t>(idx.size()); ++j)
    inv_order[static_cast<size_t>(cursor[static_cast<size_t>(idx[static_cast<size_t>(j)])]++)] = j;
}

Tape::Scope::Scope(Tape& t) : prev_(t_active_tape) { t_active_tape = &t; }
Tape::Scope::~Scope() { t_active_tape = prev_; }

Tape* Tape::active() { return t_active_tape; }

Tape* Tape::exchange_active(Tape* t) {
  Tape* prev = t_active_tape;
  t_active_tape = t;
  return prev;
}

void Tape::clear() {
  ops_.clear();
  consumed_ = false;
}

void Tape::record(TapeOp op) {
  if (consumed_)
    fail_usage("tape already consumed by backward(); run a fresh forward pass");
  ops_.push_back(std::move(op));
}

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Affine: return "affine";
    case OpKind::Matmul: return "matmul";
    case OpKind::GroupLinear: return "group_linear";
    case OpKind::AddBias: return "add_bias";
    case OpKind::MulRowvec: return "mul_rowvec";
    case OpKind::Exp: return "exp";
    case OpKind::Sin: return "sin";
    case OpKind::Cos: return "cos";
    case OpKind::Tanh: return "tanh";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Softplus: return "softplus";
    case OpKind::MaxScalar: return "max_scalar";
    case OpKind::Clamp: return "clamp";
    case OpKind::SumAll: return "sum_all";
    case OpKind::SumLast: return "sum_last";
    case OpKind::GatherRows: return "gather_rows";
    case OpKind::ScatterRows: return "scatter_rows";
    case OpKind::SegmentSumRows: return "segment_sum_rows";
    case OpKind::ScaleRows: return "scale_rows";
    case OpKind::DivRows: return "div_rows";
    case OpKind::ConcatCols: return "concat_cols";
    case OpKind::SliceCols: return "slice_cols";
    case OpKind::FourierEncode: return "fourier_encode";
    case OpKind::ExclusiveCumsumLast: return "exclusive_cumsum_last";
    case OpKind::Matvec3Rows: return "matvec3_rows";
    case OpKind::Reshape: return "reshape";
  }
  return "?";
}

bool Gradients::has(const Array& leaf) const { return find(leaf.uid()) != nullptr; }

const Array* Gradients::find(uint64_t uid) const {
  for (const auto& [id, g] : grads_)
    if (id == uid) return &g;
  return nullptr;
}

const Array& Gradients::get(const Array& leaf) const {
  const Array* g = find(leaf.uid());
  if (!g) fail_usage("no gradient recorded for requested leaf");
  return *g;
}

Array Gradients::get_or_zeros(const Array& leaf) const {
  const Array* g = find(leaf.uid());
  if (g) return *g;
  return Array::zeros(leaf.shape(), leaf.dtype());
}

}  // namespace slrf
