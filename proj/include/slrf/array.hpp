#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "slrf/common.hpp"

namespace slrf {

enum class Dtype { F32, F64 };

inline size_t dtype_size(Dtype dt) { return dt == Dtype::F32 ? 4 : 8; }
inline const char* dtype_name(Dtype dt) { return dt == Dtype::F32 ? "f32" : "f64"; }

// Dense row-major array. Storage is shared between arrays (ops never mutate
// their inputs), so saving tensors for the backward pass is refcounting, not
// copying. Each array carries a process-unique id used as the tape key.
class Array {
 public:
  Array() = default;

  static Array zeros(std::vector<int64_t> shape, Dtype dt);
  static Array full(std::vector<int64_t> shape, double value, Dtype dt);
  static Array from_f32(std::vector<float> values, std::vector<int64_t> shape);
  static Array from_f64(std::vector<double> values, std::vector<int64_t> shape);
  static Array from_doubles(const std::vector<double>& values,
                            std::vector<int64_t> shape, Dtype dt);
  static Array scalar(double value, Dtype dt);

  bool defined() const { return storage_ != nullptr; }
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t numel() const;
  int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
  int64_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  int64_t cols() const { return shape_.empty() ? 1 : numel() / shape_[0]; }
  Dtype dtype() const;

  bool requires_grad() const { return requires_grad_; }
  Array& set_requires_grad(bool v);

  uint64_t uid() const { return uid_; }

  template <class T>
  std::span<T> data();
  template <class T>
  std::span<const T> cdata() const;

  // scalar read (any dtype)
  double item() const;
  double at(int64_t flat_index) const;

  Array astype(Dtype dt) const;
  Array clone() const;
  Array reshaped(std::vector<int64_t> shape) const;  // shares storage, off-tape

  bool all_finite() const;
  std::string shape_str() const;

 private:
  struct Storage {
    std::variant<std::vector<float>, std::vector<double>> buf;
  };
  std::shared_ptr<Storage> storage_;
  std::vector<int64_t> shape_;
  bool requires_grad_ = false;
  uint64_t uid_ = 0;

  static Array alloc(std::vector<int64_t> shape, Dtype dt);
  friend Array make_like(const Array& proto, std::vector<int64_t> shape);
  friend class Tape;
};

Array make_like(const Array& proto, std::vector<int64_t> shape);

// ---------------------------------------------------------------------------
// Reverse-mode tape.

// Shared index metadata for gather/scatter/segment ops. Built once per batch,
// referenced by many ops.
struct IndexPlan {
  std::vector<int64_t> idx;   // per output row -> source row
  int64_t src_rows = 0;
  // inverse CSR over source rows (for gather backward), built on demand
  mutable std::vector<int64_t> inv_offsets;
  mutable std::vector<int64_t> inv_order;
  void build_inverse() const;
};

struct Segments {
  std::vector<int64_t> offsets;  // size N+1; rows [offsets[i], offsets[i+1]) belong to group i
  int64_t groups() const { return static_cast<int64_t>(offsets.size()) - 1; }
  int64_t total() const { return offsets.empty() ? 0 : offsets.back(); }
};

enum class OpKind {
  Add, Sub, Mul, Affine,
  Matmul, GroupLinear, AddBias, MulRowvec,
  Exp, Sin, Cos, Tanh, Sigmoid, Softplus, MaxScalar, Clamp,
  SumAll, SumLast,
  GatherRows, ScatterRows, SegmentSumRows,
  ScaleRows, DivRows,
  ConcatCols, SliceCols, ConcatRows,
  FourierEncode, ExclusiveCumsumLast,
  Matvec3Rows, Reshape, Transpose2D,
};

const char* op_name(OpKind k);

struct TapeOp {
  OpKind kind;
  std::vector<Array> inputs;     // saved values
  std::vector<uint64_t> in_uids; // 0 when the input does not require grad
  uint64_t out_uid = 0;
  Array saved_out;               // for ops whose backward uses the output
  double a = 0.0, b = 0.0;       // scalar attributes
  int m = 0;                     // integer attribute
  std::shared_ptr<const IndexPlan> plan;
  std::shared_ptr<const Segments> segs;
  std::vector<int64_t> shape0;   // extra shape attribute
};

// Gradients keyed by array uid; query with the leaf array itself.
class Gradients {
 public:
  bool has(const Array& leaf) const;
  const Array& get(const Array& leaf) const;  // throws if absent
  Array get_or_zeros(const Array& leaf) const;

 private:
  friend class Tape;
  std::vector<std::pair<uint64_t, Array>> grads_;
  const Array* find(uint64_t uid) const;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Activates this tape on the current thread for the scope lifetime.
  class Scope {
   public:
    explicit Scope(Tape& t);
    ~Scope();

   private:
    Tape* prev_;
  };

  static Tape* active();
  static Tape* exchange_active(Tape* t);  // returns the previous active tape

  size_t size() const { return ops_.size(); }
  bool consumed() const { return consumed_; }
  void clear();

  void record(TapeOp op);

  // Backward from a scalar loss. Clears the tape; a second call without a
  // fresh forward pass is an error.
  Gradients backward(const Array& loss);

 private:
  std::vector<TapeOp> ops_;
  bool consumed_ = false;
};

// Debug-mode finite checks on every op output (tests enable this; the
// training loop relies on the cheaper loss/gradient checks instead).
void set_debug_checks(bool on);
bool debug_checks();

// ---------------------------------------------------------------------------
// Primitive ops. All record onto the thread-active tape when an input
// requires grad.

Array add(const Array& a, const Array& b);
Array sub(const Array& a, const Array& b);
Array mul(const Array& a, const Array& b);
Array affine(const Array& a, double mul_c, double add_c);  // mul_c*a + add_c

Array matmul(const Array& a, const Array& b);
// x: (P, Cin) rows grouped by `segs`; w: (N, Cin, Cout); bias: (N, Cout) or empty
Array group_linear(const Array& x, const Array& w, const Array& bias,
                   std::shared_ptr<const Segments> segs);
Array add_bias(const Array& x, const Array& b);
Array mul_rowvec(const Array& x, const Array& v);

Array exp(const Array& a);
Array sin(const Array& a);
Array cos(const Array& a);
Array tanh(const Array& a);
Array sigmoid(const Array& a);
Array softplus(const Array& a);
Array relu(const Array& a);
Array max_scalar(const Array& a, double c);  // subgradient 0 on the clamped side
Array clamp(const Array& a, double lo, double hi);

Array sum_all(const Array& a);                 // -> shape {}
Array sum_last(const Array& a);                // (R, C) -> (R, 1)

Array gather_rows(const Array& a, std::shared_ptr<const IndexPlan> plan);
// scatter src rows into a (rows_out, C) zero array; plan->idx maps src row -> dst row, injective
Array scatter_rows(const Array& src, std::shared_ptr<const IndexPlan> plan,
                   int64_t rows_out);
Array segment_sum_rows(const Array& a, std::shared_ptr<const Segments> segs);
Array scale_rows(const Array& a, const Array& s);  // s: (R, 1)
Array div_rows(const Array& a, const Array& s);

Array concat_cols(const std::vector<Array>& parts);
Array slice_cols(const Array& a, int64_t c0, int64_t c1);
Array concat_rows(const std::vector<Array>& parts);
Array transpose2d(const Array& a);

// (P, D) -> (P, D*(1+2m)): (x, sin x, cos x, sin 2x, cos 2x, ..., sin 2^{m-1} x, cos 2^{m-1} x)
Array fourier_encode(const Array& x, int m);

Array exclusive_cumsum_last(const Array& a);  // (R, S)

// y_r = M_r x_r with per-row constant 3x3 matrices (mats: (R, 9), never tracked)
Array matvec3_rows(const Array& x, const Array& mats);

Array reshape(const Array& a, std::vector<int64_t> shape);

// dtype/threads init hook: pins BLAS to one thread per worker and picks a
// sane OpenBLAS target when running on an undetected (virtualized) CPU.
void init_backend();

}  // namespace slrf
