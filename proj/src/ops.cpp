#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <unordered_map>

#include "slrf/array.hpp"
#include "slrf/parallel.hpp"

namespace slrf {

// ===========================================================================
// gemm kernels.
//
// The whole engine reduces to many medium-size row-major products with inner
// dimensions in the 16..128 range (stacked per-node MLPs). General BLAS is
// a poor fit here, and in this codebase every accumulation order must be
// independent of the batch composition so that packed and dense evaluation
// of the same rows agree bitwise. The tile kernels below fix the reduction
// order per output row and rely on the 16-element allocation slack for
// column tails.

namespace {

template <class T, int MT, int NT, bool ATRANS>
void kern_tile(int64_t m0, int64_t mb, int64_t n0, int64_t nb, int64_t K,
               const T* A, int64_t lda, const T* B, int64_t ldb, T* C,
               int64_t ldc, const T* init_row, bool accumulate) {
  T acc[MT][NT];
  for (int r = 0; r < MT; ++r) {
    if (accumulate && r < mb) {
      for (int64_t c = 0; c < nb; ++c) acc[r][c] = C[(m0 + r) * ldc + n0 + c];
      for (int64_t c = nb; c < NT; ++c) acc[r][c] = T(0);
    } else if (init_row) {
#pragma GCC ivdep
      for (int c = 0; c < NT; ++c) acc[r][c] = init_row[n0 + c];
    } else {
      std::memset(acc[r], 0, sizeof(acc[r]));
    }
  }
  for (int64_t k = 0; k < K; ++k) {
    const T* brow = B + k * ldb + n0;
    for (int r = 0; r < MT; ++r) {
      T a = (r < mb) ? (ATRANS ? A[k * lda + m0 + r] : A[(m0 + r) * lda + k])
                     : T(0);
#pragma GCC ivdep
      for (int c = 0; c < NT; ++c) acc[r][c] += a * brow[c];
    }
  }
  for (int r = 0; r < static_cast<int>(mb); ++r)
    for (int64_t c = 0; c < nb; ++c) C[(m0 + r) * ldc + n0 + c] = acc[r][c];
}

// C (M,N) = op(A)·B [+ bias row | + C], all row-major. op(A) is (M,K); with
// ATRANS the storage is (K,M). B rows may be over-read by up to 15 elements.
template <class T, bool ATRANS>
void gemm_any(int64_t M, int64_t N, int64_t K, const T* A, int64_t lda,
              const T* B, int64_t ldb, T* C, int64_t ldc, const T* bias,
              bool accumulate) {
  for (int64_t m0 = 0; m0 < M; m0 += 4) {
    int64_t mb = std::min<int64_t>(4, M - m0);
    int64_t n0 = 0;
    for (; n0 + 64 <= N; n0 += 64)
      kern_tile<T, 4, 64, ATRANS>(m0, mb, n0, 64, K, A, lda, B, ldb, C, ldc,
                                  bias, accumulate);
    for (; n0 < N; n0 += 16)
      kern_tile<T, 4, 16, ATRANS>(m0, mb, n0, std::min<int64_t>(16, N - n0), K,
                                  A, lda, B, ldb, C, ldc, bias, accumulate);
  }
}

// N <= 8 fast path; BT is B pre-transposed to (N,K).
template <class T>
void gemm_small_n(int64_t M, int64_t N, int64_t K, const T* A, int64_t lda,
                  const T* BT, int64_t ldbt, T* C, int64_t ldc, const T* bias,
                  bool accumulate) {
  for (int64_t m = 0; m < M; ++m) {
    const T* arow = A + m * lda;
    for (int64_t n = 0; n < N; ++n) {
      const T* brow = BT + n * ldbt;
      T s = 0;
#pragma GCC ivdep
      for (int64_t k = 0; k < K; ++k) s += arow[k] * brow[k];
      T base = accumulate ? C[m * ldc + n] : (bias ? bias[n] : T(0));
      C[m * ldc + n] = base + s;
    }
  }
}

template <class T>
void transpose_mat(const T* src, int64_t rows, int64_t cols, T* dst) {
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

// Row-parallel C = A·B (+bias). Deterministic for any pool size.
template <class T>
void gemm_rows_parallel(int64_t M, int64_t N, int64_t K, const T* A,
                        const T* B, T* C, const T* bias) {
  if (N <= 8) {
    std::vector<T> bt(static_cast<size_t>(N * K) + 16);
    transpose_mat(B, K, N, bt.data());
    ThreadPool::instance().parallel_for(M, 512, [&](int64_t b, int64_t e) {
      gemm_small_n<T>(e - b, N, K, A + b * K, K, bt.data(), K, C + b * N, N,
                      bias, false);
    });
    return;
  }
  int64_t grain = std::max<int64_t>(1, (1 << 16) / std::max<int64_t>(1, N));
  ThreadPool::instance().parallel_for(M, grain, [&](int64_t b, int64_t e) {
    gemm_any<T, false>(e - b, N, K, A + b * K, K, B, N, C + b * N, N, bias,
                       false);
  });
}

// C (K,N) = Aᵀ·B with A (M,K), B (M,N); reduction over M. Parallel over
// output row blocks so every element keeps a fixed reduction order.
template <class T>
void gemm_at_b(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C) {
  if (N < 16 && K >= 16) {
    // compute Cᵀ = Bᵀ·A instead, then transpose back
    std::vector<T> ct(static_cast<size_t>(N * K) + 16);
    gemm_any<T, true>(N, K, M, B, N, A, K, ct.data(), K, nullptr, false);
    transpose_mat(ct.data(), N, K, C);
    return;
  }
  int64_t blocks = (K + 7) / 8;
  ThreadPool::instance().parallel_tasks(blocks, [&](int64_t t) {
    int64_t r0 = t * 8;
    int64_t rb = std::min<int64_t>(8, K - r0);
    gemm_any<T, true>(rb, N, M, A + r0, K, B, N, C + r0 * N, N, nullptr, false);
  });
}

template <class F>
auto dispatch(Dtype dt, F&& f) {
  if (dt == Dtype::F32) return f(float{});
  return f(double{});
}

bool tape_on(std::initializer_list<const Array*> ins) {
  if (!Tape::active()) return false;
  for (const Array* x : ins)
    if (x->requires_grad()) return true;
  return false;
}

void check_same_dtype(const Array& a, const Array& b, const char* op) {
  if (a.dtype() != b.dtype())
    fail_usage(std::string(op) + ": dtype mismatch");
}

void check_same_shape(const Array& a, const Array& b, const char* op) {
  if (a.shape() != b.shape())
    fail_usage(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
               b.shape_str());
  check_same_dtype(a, b, op);
}

Array finish(Array out, OpKind kind, bool rg) {
  out.set_requires_grad(rg);
  if (debug_checks() && !out.all_finite())
    fail_numeric(std::string("non-finite output of ") + op_name(kind));
  return out;
}

void record1(OpKind kind, const Array& a, const Array& out,
             Array saved_out = {}, double ca = 0, double cb = 0, int m = 0) {
  TapeOp op;
  op.kind = kind;
  op.inputs = {a};
  op.in_uids = {a.requires_grad() ? a.uid() : 0};
  op.out_uid = out.uid();
  op.saved_out = std::move(saved_out);
  op.a = ca;
  op.b = cb;
  op.m = m;
  Tape::active()->record(std::move(op));
}

int64_t grain_for(int64_t cols) {
  return std::max<int64_t>(1024, (1 << 18) / std::max<int64_t>(1, cols));
}

}  // namespace

void init_backend() {
  const char* t = std::getenv("SLRF_THREADS");
  if (t && *t) set_thread_count(std::atoi(t));
}

// ===========================================================================
// elementwise

namespace {

template <class T, class F>
void ew2(const Array& a, const Array& b, Array& out, F f) {
  auto pa = a.cdata<T>().data();
  auto pb = b.cdata<T>().data();
  auto po = out.data<T>().data();
  ThreadPool::instance().parallel_for(a.numel(), 1 << 16,
                                      [&](int64_t lo, int64_t hi) {
#pragma GCC ivdep
                                        for (int64_t i = lo; i < hi; ++i)
                                          po[i] = f(pa[i], pb[i]);
                                      });
}

template <class T, class F>
void ew1(const Array& a, Array& out, F f) {
  auto pa = a.cdata<T>().data();
  auto po = out.data<T>().data();
  ThreadPool::instance().parallel_for(a.numel(), 1 << 15,
                                      [&](int64_t lo, int64_t hi) {
                                        for (int64_t i = lo; i < hi; ++i)
                                          po[i] = f(pa[i]);
                                      });
}

}  // namespace

Array add(const Array& a, const Array& b) {
  check_same_shape(a, b, "add");
  Array out = make_like(a, a.shape());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    ew2<T>(a, b, out, [](T x, T y) { return x + y; });
  });
  bool rg = tape_on({&a, &b});
  if (rg) {
    TapeOp op;
    op.kind = OpKind::Add;
    op.inputs = {a, b};
    op.in_uids = {a.requires_grad() ? a.uid() : 0,
                  b.requires_grad() ? b.uid() : 0};
    op.out_uid = out.uid();
    Tape::active()->record(std::move(op));
  }
  return finish(std::move(out), OpKind::Add, rg);
}

Array sub(const Array& a, const Array& b) {
  check_same_shape(a, b, "sub");
  Array out = make_like(a, a.shape());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    ew2<T>(a, b, out, [](T x, T y) { return x - y; });
  });
  bool rg = tape_on({&a, &b});
  if (rg) {
    TapeOp op;
    op.kind = OpKind::Sub;
    op.inputs = {a, b};
    op.in_uids = {a.requires_grad() ? a.uid() : 0,
                  b.requires_grad() ? b.uid() : 0};
    op.out_uid = out.uid();
    Tape::active()->record(std::move(op));
  }
  return finish(std::move(out), OpKind::Sub, rg);
}

Array mul(const Array& a, const Array& b) {
  check_same_shape(a, b, "mul");
  Array out = make_like(a, a.shape());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    ew2<T>(a, b, out, [](T x, T y) { return x * y; });
  });
  bool rg = tape_on({&a, &b});
  if (rg) {
    TapeOp op;
    op.kind = OpKind::Mul;
    op.inputs = {a, b};
    op.in_uids = {a.requires_grad() ? a.uid() : 0,
                  b.requires_grad() ? b.uid() : 0};
    op.out_uid = out.uid();
    Tape::active()->record(std::move(op));
  }
  return finish(std::move(out), OpKind::Mul, rg);
}

Array affine(const Array& a, double mul_c, double add_c) {
  Array out = make_like(a, a.shape());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T mc = static_cast<T>(mul_c), ac = static_cast<T>(add_c);
    ew1<T>(a, out, [mc, ac](T x) { return mc * x + ac; });
  });
  bool rg = tape_on({&a});
  if (rg) record1(OpKind::Affine, a, out, {}, mul_c, add_c);
  return finish(std::move(out), OpKind::Affine, rg);
}

#define SLRF_UNARY(FN, KIND, EXPR, SAVE_OUT)                          \
  Array FN(const Array& a) {                                          \
    Array out = make_like(a, a.shape());                              \
    dispatch(a.dtype(), [&](auto tag) {                               \
      using T = decltype(tag);                                        \
      ew1<T>(a, out, [](T x) { return EXPR; });                       \
    });                                                               \
    bool rg = tape_on({&a});                                          \
    if (rg) record1(KIND, a, out, SAVE_OUT ? out : Array{});          \
    return finish(std::move(out), KIND, rg);                          \
  }

SLRF_UNARY(exp, OpKind::Exp, std::exp(x), true)
SLRF_UNARY(sin, OpKind::Sin, std::sin(x), false)
SLRF_UNARY(cos, OpKind::Cos, std::cos(x), false)
SLRF_UNARY(tanh, OpKind::Tanh, std::tanh(x), true)
SLRF_UNARY(sigmoid, OpKind::Sigmoid, T(1) / (T(1) + std::exp(-x)), true)

#undef SLRF_UNARY

Array softplus(const Array& a) {
  Array out = make_like(a, a.shape());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    ew1<T>(a, out, [](T x) {
      if (x > T(20)) return x;
      if (x < T(-20)) return std::exp(x);
      return std::log1p(std::exp(x));
    });
  });
  bool rg = tape_on({&a});
  if (rg) record1(OpKind::Softplus, a, out);
  return finish(std::move(out), OpKind::Softplus, rg);
}

Array max_scalar(const Array& a, double c) {
  Array out = make_like(a, a.shape());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T tc = static_cast<T>(c);
    ew1<T>(a, out, [tc](T x) { return x > tc ? x : tc; });
  });
  bool rg = tape_on({&a});
  if (rg) record1(OpKind::MaxScalar, a, out, {}, c);
  return finish(std::move(out), OpKind::MaxScalar, rg);
}

Array relu(const Array& a) { return max_scalar(a, 0.0); }

Array clamp(const Array& a, double lo, double hi) {
  Array out = make_like(a, a.shape());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T tl = static_cast<T>(lo), th = static_cast<T>(hi);
    ew1<T>(a, out, [tl, th](T x) { return x < tl ? tl : (x > th ? th : x); });
  });
  bool rg = tape_on({&a});
  if (rg) record1(OpKind::Clamp, a, out, {}, lo, hi);
  return finish(std::move(out), OpKind::Clamp, rg);
}

// ===========================================================================
// matmul / linear

Array matmul(const Array& a, const Array& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0])
    fail_usage("matmul: incompatible shapes " + a.shape_str() + " x " +
               b.shape_str());
  check_same_dtype(a, b, "matmul");
  int64_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
  Array out = make_like(a, {M, N});
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    gemm_rows_parallel<T>(M, N, K, a.cdata<T>().data(), b.cdata<T>().data(),
                          out.data<T>().data(), nullptr);
  });
  bool rg = tape_on({&a, &b});
  if (rg) {
    TapeOp op;
    op.kind = OpKind::Matmul;
    op.inputs = {a, b};
    op.in_uids = {a.requires_grad() ? a.uid() : 0,
                  b.requires_grad() ? b.uid() : 0};
    op.out_uid = out.uid();
    Tape::active()->record(std::move(op));
  }
  return finish(std::move(out), OpKind::Matmul, rg);
}

Array group_linear(const Array& x, const Array& w, const Array& bias,
                   std::shared_ptr<const Segments> segs) {
  if (x.ndim() != 2 || w.ndim() != 3)
    fail_usage("group_linear: x must be 2-d, w must be 3-d");
  int64_t P = x.shape()[0], cin = x.shape()[1];
  int64_t G = w.shape()[0], wcin = w.shape()[1], cout = w.shape()[2];
  if (wcin != cin) fail_usage("group_linear: input width mismatch");
  if (!segs || segs->groups() != G || segs->total() != P)
    fail_usage("group_linear: segment table does not match inputs");
  check_same_dtype(x, w, "group_linear");
  bool has_bias = bias.defined();
  if (has_bias && (bias.shape() != std::vector<int64_t>{G, cout}))
    fail_usage("group_linear: bias shape mismatch");

  Array out = make_like(x, {P, cout});
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.cdata<T>().data();
    const T* pw = w.cdata<T>().data();
    const T* pb = has_bias ? bias.cdata<T>().data() : nullptr;
    T* po = out.data<T>().data();
    ThreadPool::instance().parallel_tasks(G, [&](int64_t g) {
      int64_t lo = segs->offsets[g], hi = segs->offsets[g + 1];
      if (lo == hi) return;
      const T* wg = pw + g * cin * cout;
      const T* bg = pb ? pb + g * cout : nullptr;
      if (cout <= 8) {
        std::vector<T> wt(static_cast<size_t>(cout * cin) + 16);
        transpose_mat(wg, cin, cout, wt.data());
        gemm_small_n<T>(hi - lo, cout, cin, px + lo * cin, cin, wt.data(), cin,
                        po + lo * cout, cout, bg, false);
      } else {
        gemm_any<T, false>(hi - lo, cout, cin, px + lo * cin, cin, wg, cout,
                           po + lo * cout, cout, bg, false);
      }
    });
  });
  bool rg = tape_on({&x, &w, &bias});
  if (rg) {
    TapeOp op;
    op.kind = OpKind::GroupLinear;
    op.inputs = {x, w, bias};
    op.in_uids = {x.requires_grad() ? x.uid() : 0,
                  w.requires_grad() ? w.uid() : 0,
                  (has_bias && bias.requires_grad()) ? bias.uid() : 0};
    op.out_uid = out.uid();
    op.segs = std::move(segs);
    op.m = has_bias ? 1 : 0;
    Tape::active()->record(std::move(op));
  }
  return finish(std::move(out), OpKind::GroupLinear, rg);
}

Array add_bias(const Array& x, const Array& b) {
  if (x.ndim() != 2 || b.numel() != x.shape()[1])
    fail_usage("add_bias: shape mismatch");
  check_same_dtype(x, b, "add_bias");
  int64_t R = x.shape()[0], C = x.shape()[1];
  Array out = make_like(x, x.shape());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.cdata<T>().data();
    const T* pb = b.cdata<T>().data();
    T* po = out.data<T>().data();
    ThreadPool::instance().parallel_for(R, grain_for(C), [&](int64_t lo, int64_t hi) {
      for (int64_t r = lo; r < hi; ++r)
#pragma GCC ivdep
        for (int64_t c = 0; c < C; ++c) po[r * C + c] = px[r * C + c] + pb[c];
    });
  });
  bool rg = tape_on({&x, &b});
  if (rg) {
    TapeOp op;
    op.kind = OpKind::AddBias;
    op.inputs = {x, b};
    op.in_uids = {x.requires_grad() ? x.uid() : 0,
                  b.requires_grad() ? b.uid() : 0};
    op.out_uid = out.uid();
    Tape::active()->record(std::move(op));
  }
  return finish(std::move(out), OpKind::AddBias, rg);
}

Array mul_rowvec(const Array& x, const Array& v) {
  if (x.ndim() != 2 || v.numel() != x.shape()[1])
    fail_usage("mul_rowvec: shape mismatch");
  check_same_dtype(x, v, "mul_rowvec");
  int64_t R = x.shape()[0], C = x.shape()[1];
  Array out = make_like(x, x.shape());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.cdata<T>().data();
    const T* pv = v.cdata<T>().data();
    T* po = out.data<T>().data();
    ThreadPool::instance().parallel_for(R, grain_for(C), [&](int64_t lo, int64_t hi) {
      for (int64_t r = lo; r < hi; ++r)
#pragma GCC ivdep
        for (int64_t c = 0; c < C; ++c) po[r * C + c] = px[r * C + c] * pv[c];
    });
  });
  bool rg = tape_on({&x, &v});
  if (rg) {
    TapeOp op;
    op.kind = OpKind::MulRowvec;
    op.inputs = {x, v};
    op.in_uids = {x.requires_grad() ? x.uid() : 0,
                  v.requires_grad() ? v.uid() : 0};
    op.out_uid = out.uid();
    Tape::active()->record(std::move(op));
  }
  return finish(std::move(out), OpKind::MulRowvec, rg);
}

// ===========================================================================
// reductions

Array sum_all(const Array& a) {
  Array out = Array::zeros({}, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.cdata<T>().data();
    double s = 0;  // fixed sequential order
    for (int64_t i = 0, n = a.numel(); i < n; ++i) s += pa[i];
    out.data<T>()[0] = static_cast<T>(s);
  });
  bool rg = tape_on({&a});
  if (rg) {
    TapeOp op;
    op.kind = OpKind::SumAll;
    op.inputs = {a};
    op.in_uids = {a.uid()};
    op.out_uid = out.uid();
    op.shape0 = a.shape();
    Tape::active()->record(std::move(op));
  }
  return finish(std::move(out), OpKind::SumAll, rg);
}

Array sum_last(const Array& a) {
  if (a.ndim() != 2) fail_usage("sum_last: expected 2-d array");
  int64_t R = a.shape()[0], C = a.shape()[1];
  Array out = make_like(a, {R, 1});
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.cdata<T>().data();
    T* po = out.data<T>().data();
    ThreadPool::instance().parallel_for(R, grain_for(C), [&](int64_t lo, int64_t hi) {
      for (int64_t r = lo; r < hi; ++r) {
        T s = 0;
        for (int64_t c = 0; c < C; ++c) s += pa[r * C + c];
        po[r] = s;
      }
    });
  });
  bool rg = tape_on({&a});
  if (rg) {
    TapeOp op;
    op.kind = OpKind::SumLast;
    op.inputs = {a};
    op.in_uids = {a.uid()};
    op.out_uid = out.uid();
    op.shape0 = a.shape();
    Tape::active()->record(std::move(op));
  }
  return finish(std::move(out), OpKind::SumLast, rg);
}

// ===========================================================================
// gather / scatter / segments

Array gather_rows(const Array& a, std::shared_ptr<const IndexPlan> plan) {
  if (a.ndim() != 2) fail_usage("gather_rows: expected 2-d array");
  if (!plan || plan->src_rows != a.shape()[0])
    fail_usage("gather_rows: plan does not match array");
  int64_t P = static_cast<int64_t>(plan->idx.size());
  int64_t C = a.shape()[1];
  Array out = make_like(a, {P, C});
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.cdata<T>().data();
    T* po = out.data<T>().data();
    const int64_t* idx = plan->idx.data();
    ThreadPool::instance().parallel_for(P, grain_for(C), [&](int64_t lo, int64_t hi) {
      for (int64_t j = lo; j < hi; ++j)
        std::memcpy(po + j * C, pa + idx[j] * C, sizeof(T) * C);
    });
  });
  bool rg = tape_on({&a});
  if (rg) {
    plan->build_inverse();
    TapeOp op;
    op.kind = OpKind::GatherRows;
    op.inputs = {a};
    op.in_uids = {a.uid()};
    op.out_uid = out.uid();
    op.plan = std::move(plan);
    Tape::active()->record(std::move(op));
  }
  return finish(std::move(out), OpKind::GatherRows, rg);
}

Array scatter_rows(const Array& src, std::shared_ptr<const IndexPlan> plan,
                   int64_t rows_out) {
  if (src.ndim() != 2) fail_usage("scatter_rows: expected 2-d array");
  if (!plan || static_cast<int64_t>(plan->idx.size()) != src.shape()[0])
    fail_usage("scatter_rows: plan does not match array");
  int64_t P = src.shape()[0], C = src.shape()[1];
  Array out = Array::zeros({rows_out, C}, src.dtype());
  dispatch(src.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* ps = src.cdata<T>().data();
    T* po = out.data<T>().data();
    const int64_t* idx = plan->idx.data();
    for (int64_t j = 0; j < P; ++j) {
      if (idx[j] < 0 || idx[j] >= rows_out)
        fail_usage("scatter_rows: index out of range");
      std::memcpy(po + idx[j] * C, ps + j * C, sizeof(T) * C);
    }
  });
  bool rg = tape_on({&src});
  if (rg) {
    TapeOp op;
    op.kind = OpKind::ScatterRows;
    op.inputs = {src};
    op.in_uids = {src.uid()};
    op.out_uid = out.uid();
    op.plan = std::move(plan);
    Tape::active()->record(std::move(op));
  }
  return finish(std::move(out), OpKind::ScatterRows, rg);
}

Array segment_sum_rows(const Array& a, std::shared_ptr<const Segments> segs) {
  if (a.ndim() != 2) fail_usage("segment_sum_rows: expected 2-d array");
  if (!segs || segs->total() != a.shape()[0])
    fail_usage("segment_sum_rows: segments do not cover array");
  int64_t G = segs->groups(), C = a.shape()[1];
  Array out = Array::zeros({G, C}, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.cdata<T>().data();
    T* po = out.data<T>().data();
    ThreadPool::instance().parallel_for(G, 64, [&](int64_t lo, int64_t hi) {
      for (int64_t g = lo; g < hi; ++g) {
        T* dst = po + g * C;
        for (int64_t r = segs->offsets[g]; r < segs->offsets[g + 1]; ++r) {
          const T* row = pa + r * C;
#pragma GCC ivdep
          for (int64_t c = 0; c < C; ++c) dst[c] += row[c];
        }
      }
    });
  });
  bool rg = tape_on({&a});
  if (rg) {
    TapeOp op;
    op.kind = OpKind::SegmentSumRows;
    op.inputs = {a};
    op.in_uids = {a.uid()};
    op.out_uid = out.uid();
    op.segs = std::move(segs);
    Tape::active()->record(std::move(op));
  }
  return finish(std::move(out), OpKind::SegmentSumRows, rg);
}

Array scale_rows(const Array& a, const Array& s) {
  if (a.ndim() != 2 || s.shape()[0] != a.shape()[0] || s.cols() != 1)
    fail_usage("scale_rows: shape mismatch");
  check_same_dtype(a, s, "scale_rows");
  int64_t R = a.shape()[0], C = a.shape()[1];
  Array out = make_like(a, a.shape());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.cdata<T>().data();
    const T* ps = s.cdata<T>().data();
    T* po = out.data<T>().data();
    ThreadPool::instance().parallel_for(R, grain_for(C), [&](int64_t lo, int64_t hi) {
      for (int64_t r = lo; r < hi; ++r) {
        T sv = ps[r];
#pragma GCC ivdep
        for (int64_t c = 0; c < C; ++c) po[r * C + c] = pa[r * C + c] * sv;
      }
    });
  });
  bool rg = tape_on({&a, &s});
  if (rg) {
    TapeOp op;
    op.kind = OpKind::ScaleRows;
    op.inputs = {a, s};
    op.in_uids = {a.requires_grad() ? a.uid() : 0,
                  s.requires_grad() ? s.uid() : 0};
    op.out_uid = out.uid();
    Tape::active()->record(std::move(op));
  }
  return finish(std::move(out), OpKind::ScaleRows, rg);
}

Array div_rows(const Array& a, const Array& s) {
  if (a.ndim() != 2 || s.shape()[0] != a.shape()[0] || s.cols() != 1)
    fail_usage("div_rows: shape mismatch");
  check_same_dtype(a, s, "div_rows");
  int64_t R = a.shape()[0], C = a.shape()[1];
  Array out = make_like(a, a.shape());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.cdata<T>().data();
    const T* ps = s.cdata<T>().data();
    T* po = out.data<T>().data();
    ThreadPool::instance().parallel_for(R, grain_for(C), [&](int64_t lo, int64_t hi) {
      for (int64_t r = lo; r < hi; ++r) {
        T sv = ps[r];
#pragma GCC ivdep
        for (int64_t c = 0; c < C; ++c) po[r * C + c] = pa[r * C + c] / sv;
      }
    });
  });
  bool rg = tape_on({&a, &s});
  if (rg) {
    TapeOp op;
    op.kind = OpKind::DivRows;
    op.inputs = {a, s};
    op.in_uids = {a.requires_grad() ? a.uid() : 0,
                  s.requires_grad() ? s.uid() : 0};
    op.out_uid = out.uid();
    op.saved_out = out;
    Tape::active()->record(std::move(op));
  }
  return finish(std::move(out), OpKind::DivRows, rg);
}

// ===========================================================================
// concat / slice / reshape

Array concat_cols(const std::vector<Array>& parts) {
  if (parts.empty()) fail_usage("concat_cols: no inputs");
  int64_t R = parts[0].shape()[0];
  int64_t C = 0;
  for (const Array& p : parts) {
    if (p.ndim() != 2 || p.shape()[0] != R)
      fail_usage("concat_cols: row mismatch");
    check_same_dtype(parts[0], p, "concat_cols");
    C += p.shape()[1];
  }
  Array out = make_like(parts[0], {R, C});
  dispatch(out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T* po = out.data<T>().data();
    int64_t c0 = 0;
    for (const Array& p : parts) {
      const T* pp = p.cdata<T>().data();
      int64_t pc = p.shape()[1];
      ThreadPool::instance().parallel_for(R, grain_for(pc), [&](int64_t lo, int64_t hi) {
        for (int64_t r = lo; r < hi; ++r)
          std::memcpy(po + r * C + c0, pp + r * pc, sizeof(T) * pc);
      });
      c0 += pc;
    }
  });
  bool rg = false;
  if (Tape::active())
    for (const Array& p : parts) rg = rg || p.requires_grad();
  if (rg) {
    TapeOp op;
    op.kind = OpKind::ConcatCols;
    op.inputs = parts;
    for (const Array& p : parts)
      op.in_uids.push_back(p.requires_grad() ? p.uid() : 0);
    op.out_uid = out.uid();
    Tape::active()->record(std::move(op));
  }
  return finish(std::move(out), OpKind::ConcatCols, rg);
}

Array slice_cols(const Array& a, int64_t c0, int64_t c1) {
  if (a.ndim() != 2 || c0 < 0 || c1 > a.shape()[1] || c0 >= c1)
    fail_usage("slice_cols: bad column range");
  int64_t R = a.shape()[0], C = a.shape()[1], W = c1 - c0;
  Array out = make_like(a, {R, W});
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.cdata<T>().data();
    T* po = out.data<T>().data();
    ThreadPool::instance().parallel_for(R, grain_for(W), [&](int64_t lo, int64_t hi) {
      for (int64_t r = lo; r < hi; ++r)
        std::memcpy(po + r * W, pa + r * C + c0, sizeof(T) * W);
    });
  });
  bool rg = tape_on({&a});
  if (rg) {
    TapeOp op;
    op.kind = OpKind::SliceCols;
    op.inputs = {a};
    op.in_uids = {a.uid()};
    op.out_uid = out.uid();
    op.a = static_cast<double>(c0);
    op.shape0 = a.shape();
    Tape::active()->record(std::move(op));
  }
  return finish(std::move(out), OpKind::SliceCols, rg);
}

Array concat_rows(const std::vector<Array>& parts) {
  if (parts.empty()) fail_usage("concat_rows: no inputs");
  int64_t C = parts[0].cols();
  int64_t R = 0;
  for (const Array& p : parts) {
    if (p.ndim() != 2 || p.shape()[1] != C)
      fail_usage("concat_rows: column mismatch");
    check_same_dtype(parts[0], p, "concat_rows");
    R += p.shape()[0];
  }
  Array out = make_like(parts[0], {R, C});
  dispatch(out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T* po = out.data<T>().data();
    int64_t r0 = 0;
    for (const Array& p : parts) {
      auto pp = p.cdata<T>();
      std::memcpy(po + r0 * C, pp.data(), sizeof(T) * pp.size());
      r0 += p.shape()[0];
    }
  });
  bool rg = false;
  if (Tape::active())
    for (const Array& p : parts) rg = rg || p.requires_grad();
  if (rg) {
    TapeOp op;
    op.kind = OpKind::ConcatRows;
    op.inputs = parts;
    for (const Array& p : parts)
      op.in_uids.push_back(p.requires_grad() ? p.uid() : 0);
    op.out_uid = out.uid();
    Tape::active()->record(std::move(op));
  }
  return finish(std::move(out), OpKind::ConcatRows, rg);
}

Array transpose2d(const Array& a) {
  if (a.ndim() != 2) fail_usage("transpose2d: expected 2-d array");
  int64_t R = a.shape()[0], C = a.shape()[1];
  Array out = make_like(a, {C, R});
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    transpose_mat(a.cdata<T>().data(), R, C, out.data<T>().data());
  });
  bool rg = tape_on({&a});
  if (rg) record1(OpKind::Transpose2D, a, out);
  return finish(std::move(out), OpKind::Transpose2D, rg);
}

Array reshape(const Array& a, std::vector<int64_t> shape) {
  Array out = a.reshaped(shape);
  bool rg = tape_on({&a});
  if (rg) {
    TapeOp op;
    op.kind = OpKind::Reshape;
    op.inputs = {a};
    op.in_uids = {a.uid()};
    op.out_uid = out.uid();
    op.shape0 = a.shape();
    Tape::active()->record(std::move(op));
  }
  out.set_requires_grad(rg);
  return out;
}

// ===========================================================================
// fourier encoding

Array fourier_encode(const Array& x, int m) {
  if (x.ndim() != 2 || m < 0) fail_usage("fourier_encode: bad arguments");
  int64_t R = x.shape()[0], D = x.shape()[1];
  int64_t C = D * (1 + 2 * m);
  Array out = make_like(x, {R, C});
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.cdata<T>().data();
    T* po = out.data<T>().data();
    ThreadPool::instance().parallel_for(R, grain_for(C), [&](int64_t lo, int64_t hi) {
      for (int64_t r = lo; r < hi; ++r) {
        const T* in = px + r * D;
        T* o = po + r * C;
        for (int64_t d = 0; d < D; ++d) o[d] = in[d];
        T freq = 1;
        for (int k = 0; k < m; ++k) {
          T* os = o + D * (1 + 2 * k);
          T* oc = os + D;
          for (int64_t d = 0; d < D; ++d) {
            T v = freq * in[d];
            os[d] = std::sin(v);
            oc[d] = std::cos(v);
          }
          freq *= 2;
        }
      }
    });
  });
  bool rg = tape_on({&x});
  if (rg) record1(OpKind::FourierEncode, x, out, {}, 0, 0, m);
  return finish(std::move(out), OpKind::FourierEncode, rg);
}

// ===========================================================================
// cumulative sum along the last axis (exclusive)

Array exclusive_cumsum_last(const Array& a) {
  if (a.ndim() != 2) fail_usage("exclusive_cumsum_last: expected 2-d array");
  int64_t R = a.shape()[0], S = a.shape()[1];
  Array out = make_like(a, a.shape());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.cdata<T>().data();
    T* po = out.data<T>().data();
    ThreadPool::instance().parallel_for(R, grain_for(S), [&](int64_t lo, int64_t hi) {
      for (int64_t r = lo; r < hi; ++r) {
        T run = 0;
        for (int64_t j = 0; j < S; ++j) {
          po[r * S + j] = run;
          run += pa[r * S + j];
        }
      }
    });
  });
  bool rg = tape_on({&a});
  if (rg) record1(OpKind::ExclusiveCumsumLast, a, out);
  return finish(std::move(out), OpKind::ExclusiveCumsumLast, rg);
}

// ===========================================================================
// per-row constant 3x3 transforms

Array matvec3_rows(const Array& x, const Array& mats) {
  if (x.ndim() != 2 || x.shape()[1] != 3 || mats.ndim() != 2 ||
      mats.shape()[1] != 9 || mats.shape()[0] != x.shape()[0])
    fail_usage("matvec3_rows: expected x (R,3), mats (R,9)");
  if (mats.requires_grad())
    fail_usage("matvec3_rows: matrices are constants");
  check_same_dtype(x, mats, "matvec3_rows");
  int64_t R = x.shape()[0];
  Array out = make_like(x, x.shape());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.cdata<T>().data();
    const T* pm = mats.cdata<T>().data();
    T* po = out.data<T>().data();
    ThreadPool::instance().parallel_for(R, 4096, [&](int64_t lo, int64_t hi) {
      for (int64_t r = lo; r < hi; ++r) {
        const T* v = px + r * 3;
        const T* M = pm + r * 9;
        T* o = po + r * 3;
        o[0] = M[0] * v[0] + M[1] * v[1] + M[2] * v[2];
        o[1] = M[3] * v[0] + M[4] * v[1] + M[5] * v[2];
        o[2] = M[6] * v[0] + M[7] * v[1] + M[8] * v[2];
      }
    });
  });
  bool rg = tape_on({&x});
  if (rg) {
    TapeOp op;
    op.kind = OpKind::Matvec3Rows;
    op.inputs = {x, mats};
    op.in_uids = {x.uid(), 0};
    op.out_uid = out.uid();
    Tape::active()->record(std::move(op));
  }
  return finish(std::move(out), OpKind::Matvec3Rows, rg);
}

// ===========================================================================
// backward

namespace {

Array raw_add(const Array& a, const Array& b) {
  Array out = make_like(a, a.shape());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    ew2<T>(a, b, out, [](T x, T y) { return x + y; });
  });
  return out;
}

// column sums parallelized over column blocks; reduction order over rows is
// fixed regardless of pool size
Array colsum(const Array& g) {
  int64_t R = g.shape()[0], C = g.shape()[1];
  Array out = Array::zeros({C}, g.dtype());
  dispatch(g.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pg = g.cdata<T>().data();
    T* po = out.data<T>().data();
    int64_t blocks = (C + 15) / 16;
    ThreadPool::instance().parallel_tasks(blocks, [&](int64_t t) {
      int64_t c0 = t * 16, c1 = std::min<int64_t>(C, c0 + 16);
      for (int64_t r = 0; r < R; ++r) {
        const T* row = pg + r * C;
        for (int64_t c = c0; c < c1; ++c) po[c] += row[c];
      }
    });
  });
  return out;
}

struct GradMap {
  std::unordered_map<uint64_t, Array> m;

  void accumulate(uint64_t uid, Array g) {
    auto it = m.find(uid);
    if (it == m.end()) {
      m.emplace(uid, std::move(g));
    } else {
      it->second = raw_add(it->second, g);  // out-of-place: grads may alias
    }
  }

  Array take(uint64_t uid) {
    auto it = m.find(uid);
    if (it == m.end()) return {};
    Array g = std::move(it->second);
    m.erase(it);
    return g;
  }
};

template <class T, class F>
void backward_unary_mul(const Array& g, const Array& saved, Array& out, F fn) {
  auto pg = g.cdata<T>().data();
  auto ps = saved.cdata<T>().data();
  auto po = out.data<T>().data();
  ThreadPool::instance().parallel_for(g.numel(), 1 << 15,
                                      [&](int64_t lo, int64_t hi) {
                                        for (int64_t i = lo; i < hi; ++i)
                                          po[i] = fn(pg[i], ps[i]);
                                      });
}

void op_backward(const TapeOp& op, const Array& g, GradMap& grads) {
  auto want = [&](size_t i) { return op.in_uids[i] != 0; };
  auto give = [&](size_t i, Array ga) {
    grads.accumulate(op.in_uids[i], std::move(ga));
  };
  Dtype dt = g.dtype();

  switch (op.kind) {
    case OpKind::Add: {
      if (want(0)) give(0, g);
      if (want(1)) give(1, g);
      break;
    }
    case OpKind::Sub: {
      if (want(0)) give(0, g);
      if (want(1)) give(1, affine(g, -1.0, 0.0));
      break;
    }
    case OpKind::Mul: {
      if (want(0)) give(0, mul(g, op.inputs[1]));
      if (want(1)) give(1, mul(g, op.inputs[0]));
      break;
    }
    case OpKind::Affine: {
      if (want(0)) give(0, affine(g, op.a, 0.0));
      break;
    }
    case OpKind::Exp: {
      if (want(0)) give(0, mul(g, op.saved_out));
      break;
    }
    case OpKind::Sin: {
      if (want(0)) give(0, mul(g, cos(op.inputs[0])));
      break;
    }
    case OpKind::Cos: {
      if (want(0)) give(0, affine(mul(g, sin(op.inputs[0])), -1.0, 0.0));
      break;
    }
    case OpKind::Tanh: {
      if (want(0)) {
        Array dx = make_like(g, g.shape());
        dispatch(dt, [&](auto tag) {
          using T = decltype(tag);
          backward_unary_mul<T>(g, op.saved_out, dx,
                                [](T gv, T y) { return gv * (T(1) - y * y); });
        });
        give(0, std::move(dx));
      }
      break;
    }
    case OpKind::Sigmoid: {
      if (want(0)) {
        Array dx = make_like(g, g.shape());
        dispatch(dt, [&](auto tag) {
          using T = decltype(tag);
          backward_unary_mul<T>(
              g, op.saved_out, dx,
              [](T gv, T y) { return gv * y * (T(1) - y); });
        });
        give(0, std::move(dx));
      }
      break;
    }
    case OpKind::Softplus: {
      if (want(0)) {
        Array dx = make_like(g, g.shape());
        dispatch(dt, [&](auto tag) {
          using T = decltype(tag);
          backward_unary_mul<T>(g, op.inputs[0], dx, [](T gv, T x) {
            return gv / (T(1) + std::exp(-x));
          });
        });
        give(0, std::move(dx));
      }
      break;
    }
    case OpKind::MaxScalar: {
      if (want(0)) {
        Array dx = make_like(g, g.shape());
        double c = op.a;
        dispatch(dt, [&](auto tag) {
          using T = decltype(tag);
          T tc = static_cast<T>(c);
          backward_unary_mul<T>(g, op.inputs[0], dx,
                                [tc](T gv, T x) { return x > tc ? gv : T(0); });
        });
        give(0, std::move(dx));
      }
      break;
    }
    case OpKind::Clamp: {
      if (want(0)) {
        Array dx = make_like(g, g.shape());
        double lo = op.a, hi = op.b;
        dispatch(dt, [&](auto tag) {
          using T = decltype(tag);
          T tl = static_cast<T>(lo), th = static_cast<T>(hi);
          auto pg = g.cdata<T>().data();
          auto px = op.inputs[0].cdata<T>().data();
          auto po = dx.data<T>().data();
          ThreadPool::instance().parallel_for(
              g.numel(), 1 << 15, [&](int64_t b, int64_t e) {
                for (int64_t i = b; i < e; ++i)
                  po[i] = (px[i] > tl && px[i] < th) ? pg[i] : T(0);
              });
        });
        give(0, std::move(dx));
      }
      break;
    }
    case OpKind::Matmul: {
      const Array& a = op.inputs[0];
      const Array& b = op.inputs[1];
      int64_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
      if (want(0)) {
        Array da = make_like(a, a.shape());
        dispatch(dt, [&](auto tag) {
          using T = decltype(tag);
          std::vector<T> bt(static_cast<size_t>(K * N) + 16);
          transpose_mat(b.cdata<T>().data(), K, N, bt.data());
          gemm_rows_parallel<T>(M, K, N, g.cdata<T>().data(), bt.data(),
                                da.data<T>().data(), nullptr);
        });
        give(0, std::move(da));
      }
      if (want(1)) {
        Array db = make_like(b, b.shape());
        dispatch(dt, [&](auto tag) {
          using T = decltype(tag);
          gemm_at_b<T>(M, N, K, a.cdata<T>().data(), g.cdata<T>().data(),
                       db.data<T>().data());
        });
        give(1, std::move(db));
      }
      break;
    }
    case OpKind::GroupLinear: {
      const Array& x = op.inputs[0];
      const Array& w = op.inputs[1];
      int64_t cin = x.shape()[1];
      int64_t G = w.shape()[0], cout = w.shape()[2];
      const Segments& segs = *op.segs;
      bool wx = want(0), ww = want(1), wb = op.m == 1 && want(2);
      Array dx = wx ? Array::zeros(x.shape(), dt) : Array{};
      Array dw = ww ? Array::zeros(w.shape(), dt) : Array{};
      Array db = wb ? Array::zeros(op.inputs[2].shape(), dt) : Array{};
      dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.cdata<T>().data();
        const T* pw = w.cdata<T>().data();
        const T* pg = g.cdata<T>().data();
        ThreadPool::instance().parallel_tasks(G, [&](int64_t gi) {
          int64_t lo = segs.offsets[gi], hi = segs.offsets[gi + 1];
          int64_t rows = hi - lo;
          if (rows == 0) return;
          const T* wg = pw + gi * cin * cout;
          const T* gseg = pg + lo * cout;
          const T* xseg = px + lo * cin;
          if (wx) {
            std::vector<T> wt(static_cast<size_t>(cin * cout) + 16);
            transpose_mat(wg, cin, cout, wt.data());
            gemm_any<T, false>(rows, cin, cout, gseg, cout, wt.data(), cin,
                               dx.data<T>().data() + lo * cin, cin, nullptr,
                               false);
          }
          if (ww) {
            T* dwg = dw.data<T>().data() + gi * cin * cout;
            if (cout < 16 && cin >= 16) {
              std::vector<T> ct(static_cast<size_t>(cout * cin) + 16);
              gemm_any<T, true>(cout, cin, rows, gseg, cout, xseg, cin,
                                ct.data(), cin, nullptr, false);
              transpose_mat(ct.data(), cout, cin, dwg);
            } else {
              gemm_any<T, true>(cin, cout, rows, xseg, cin, gseg, cout, dwg,
                                cout, nullptr, false);
            }
          }
          if (wb) {
            T* dbg = db.data<T>().data() + gi * cout;
            for (int64_t r = 0; r < rows; ++r) {
              const T* row = gseg + r * cout;
#pragma GCC ivdep
              for (int64_t c = 0; c < cout; ++c) dbg[c] += row[c];
            }
          }
        });
      });
      if (wx) give(0, std::move(dx));
      if (ww) give(1, std::move(dw));
      if (wb) give(2, std::move(db));
      break;
    }
    case OpKind::AddBias: {
      if (want(0)) give(0, g);
      if (want(1)) give(1, colsum(g));
      break;
    }
    case OpKind::MulRowvec: {
      if (want(0)) give(0, mul_rowvec(g, op.inputs[1]));
      if (want(1)) give(1, colsum(mul(g, op.inputs[0])));
      break;
    }
    case OpKind::SumAll: {
      if (want(0)) give(0, Array::full(op.shape0, g.item(), dt));
      break;
    }
    case OpKind::SumLast: {
      if (want(0)) {
        int64_t R = op.shape0[0], C = op.shape0[1];
        Array dx = make_like(g, op.shape0);
        dispatch(dt, [&](auto tag) {
          using T = decltype(tag);
          auto pg = g.cdata<T>().data();
          auto po = dx.data<T>().data();
          for (int64_t r = 0; r < R; ++r) {
            T v = pg[r];
            for (int64_t c = 0; c < C; ++c) po[r * C + c] = v;
          }
        });
        give(0, std::move(dx));
      }
      break;
    }
    case OpKind::GatherRows: {
      if (want(0)) {
        const IndexPlan& plan = *op.plan;
        int64_t C = g.shape()[1];
        Array dx = Array::zeros({plan.src_rows, C}, dt);
        dispatch(dt, [&](auto tag) {
          using T = decltype(tag);
          auto pg = g.cdata<T>().data();
          auto po = dx.data<T>().data();
          ThreadPool::instance().parallel_for(
              plan.src_rows, 1024, [&](int64_t lo, int64_t hi) {
                for (int64_t r = lo; r < hi; ++r) {
                  T* dst = po + r * C;
                  for (int64_t k = plan.inv_offsets[r];
                       k < plan.inv_offsets[r + 1]; ++k) {
                    const T* src = pg + plan.inv_order[k] * C;
#pragma GCC ivdep
                    for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
                  }
                }
              });
        });
        give(0, std::move(dx));
      }
      break;
    }
    case OpKind::ScatterRows: {
      if (want(0)) {
        const IndexPlan& plan = *op.plan;
        int64_t P = static_cast<int64_t>(plan.idx.size());
        int64_t C = g.shape()[1];
        Array dx = Array::zeros({P, C}, dt);
        dispatch(dt, [&](auto tag) {
          using T = decltype(tag);
          auto pg = g.cdata<T>().data();
          auto po = dx.data<T>().data();
          ThreadPool::instance().parallel_for(P, 1024, [&](int64_t lo, int64_t hi) {
            for (int64_t j = lo; j < hi; ++j)
              std::memcpy(po + j * C, pg + plan.idx[j] * C, sizeof(T) * C);
          });
        });
        give(0, std::move(dx));
      }
      break;
    }
    case OpKind::SegmentSumRows: {
      if (want(0)) {
        const Segments& segs = *op.segs;
        int64_t C = g.shape()[1];
        Array dx = Array::zeros({segs.total(), C}, dt);
        dispatch(dt, [&](auto tag) {
          using T = decltype(tag);
          auto pg = g.cdata<T>().data();
          auto po = dx.data<T>().data();
          ThreadPool::instance().parallel_for(
              segs.groups(), 64, [&](int64_t lo, int64_t hi) {
                for (int64_t gi = lo; gi < hi; ++gi)
                  for (int64_t r = segs.offsets[gi]; r < segs.offsets[gi + 1];
                       ++r)
                    std::memcpy(po + r * C, pg + gi * C, sizeof(T) * C);
              });
        });
        give(0, std::move(dx));
      }
      break;
    }
    case OpKind::ScaleRows: {
      if (want(0)) give(0, scale_rows(g, op.inputs[1]));
      if (want(1)) give(1, sum_last(mul(g, op.inputs[0])));
      break;
    }
    case OpKind::DivRows: {
      // y = a / s; da = g / s; ds = -sum_c g*y / s
      if (want(0)) give(0, div_rows(g, op.inputs[1]));
      if (want(1)) {
        Array t = sum_last(mul(g, op.saved_out));
        give(1, affine(div_rows(t, op.inputs[1]), -1.0, 0.0));
      }
      break;
    }
    case OpKind::ConcatCols: {
      int64_t c0 = 0;
      for (size_t i = 0; i < op.inputs.size(); ++i) {
        int64_t w = op.inputs[i].shape()[1];
        if (want(i)) give(i, slice_cols(g, c0, c0 + w));
        c0 += w;
      }
      break;
    }
    case OpKind::SliceCols: {
      if (want(0)) {
        int64_t c0 = static_cast<int64_t>(op.a);
        int64_t R = op.shape0[0], C = op.shape0[1], W = g.shape()[1];
        Array dx = Array::zeros(op.shape0, dt);
        dispatch(dt, [&](auto tag) {
          using T = decltype(tag);
          auto pg = g.cdata<T>().data();
          auto po = dx.data<T>().data();
          for (int64_t r = 0; r < R; ++r)
            std::memcpy(po + r * C + c0, pg + r * W, sizeof(T) * W);
        });
        give(0, std::move(dx));
      }
      break;
    }
    case OpKind::FourierEncode: {
      if (want(0)) {
        const Array& x = op.inputs[0];
        int m = op.m;
        int64_t R = x.shape()[0], D = x.shape()[1];
        Array dx = make_like(x, x.shape());
        dispatch(dt, [&](auto tag) {
          using T = decltype(tag);
          auto px = x.cdata<T>().data();
          auto pg = g.cdata<T>().data();
          auto po = dx.data<T>().data();
          int64_t C = D * (1 + 2 * m);
          ThreadPool::instance().parallel_for(R, 2048, [&](int64_t lo, int64_t hi) {
            for (int64_t r = lo; r < hi; ++r) {
              const T* in = px + r * D;
              const T* gr = pg + r * C;
              T* o = po + r * D;
              for (int64_t d = 0; d < D; ++d) o[d] = gr[d];
              T freq = 1;
              for (int k = 0; k < m; ++k) {
                const T* gs = gr + D * (1 + 2 * k);
                const T* gc = gs + D;
                for (int64_t d = 0; d < D; ++d) {
                  T v = freq * in[d];
                  o[d] += freq * (std::cos(v) * gs[d] - std::sin(v) * gc[d]);
                }
                freq *= 2;
              }
            }
          });
        });
        give(0, std::move(dx));
      }
      break;
    }
    case OpKind::ExclusiveCumsumLast: {
      if (want(0)) {
        int64_t R = g.shape()[0], S = g.shape()[1];
        Array dx = make_like(g, g.shape());
        dispatch(dt, [&](auto tag) {
          using T = decltype(tag);
          auto pg = g.cdata<T>().data();
          auto po = dx.data<T>().data();
          ThreadPool::instance().parallel_for(R, 2048, [&](int64_t lo, int64_t hi) {
            for (int64_t r = lo; r < hi; ++r) {
              T run = 0;
              for (int64_t j = S - 1; j >= 0; --j) {
                po[r * S + j] = run;
                run += pg[r * S + j];
              }
            }
          });
        });
        give(0, std::move(dx));
      }
      break;
    }
    case OpKind::Matvec3Rows: {
      if (want(0)) {
        const Array& mats = op.inputs[1];
        int64_t R = g.shape()[0];
        Array dx = make_like(g, g.shape());
        dispatch(dt, [&](auto tag) {
          using T = decltype(tag);
          auto pg = g.cdata<T>().data();
          auto pm = mats.cdata<T>().data();
          auto po = dx.data<T>().data();
          ThreadPool::instance().parallel_for(R, 4096, [&](int64_t lo, int64_t hi) {
            for (int64_t r = lo; r < hi; ++r) {
              const T* v = pg + r * 3;
              const T* M = pm + r * 9;
              T* o = po + r * 3;
              o[0] = M[0] * v[0] + M[3] * v[1] + M[6] * v[2];
              o[1] = M[1] * v[0] + M[4] * v[1] + M[7] * v[2];
              o[2] = M[2] * v[0] + M[5] * v[1] + M[8] * v[2];
            }
          });
        });
        give(0, std::move(dx));
      }
      break;
    }
    case OpKind::ConcatRows: {
      int64_t r0 = 0;
      int64_t C = g.shape()[1];
      for (size_t i = 0; i < op.inputs.size(); ++i) {
        int64_t rows = op.inputs[i].shape()[0];
        if (want(i)) {
          Array part = make_like(g, {rows, C});
          dispatch(dt, [&](auto tag) {
            using T = decltype(tag);
            std::memcpy(part.data<T>().data(), g.cdata<T>().data() + r0 * C,
                        sizeof(T) * rows * C);
          });
          give(i, std::move(part));
        }
        r0 += rows;
      }
      break;
    }
    case OpKind::Transpose2D: {
      if (want(0)) give(0, transpose2d(g));
      break;
    }
    case OpKind::Reshape: {
      if (want(0)) give(0, g.reshaped(op.shape0));
      break;
    }
  }
}

}  // namespace

Gradients Tape::backward(const Array& loss) {
  if (consumed_)
    fail_usage("backward() called twice without a fresh forward pass");
  if (loss.numel() != 1)
    fail_usage("backward() requires a scalar loss, got shape " +
               loss.shape_str());
  if (ops_.empty()) fail_usage("backward() on an empty tape");

  GradMap grads;
  grads.accumulate(loss.uid(), Array::full({}, 1.0, loss.dtype()));

  // helper ops used by the backward rules must not re-record
  Tape* prev = Tape::exchange_active(nullptr);
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    Array g = grads.take(it->out_uid);
    if (!g.defined()) continue;
    op_backward(*it, g, grads);
  }
  Tape::exchange_active(prev);

  Gradients out;
  out.grads_.reserve(grads.m.size());
  for (auto& [uid, g] : grads.m) out.grads_.emplace_back(uid, std::move(g));
  consumed_ = true;
  ops_.clear();
  return out;
}

}  // namespace slrf
