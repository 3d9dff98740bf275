#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "avlm/util/rng.hpp"

namespace avlm::num {

/// Runtime toggles for the engine. Finite checking scans every op output and
/// is cheap at desk scale; flip it off for long sweeps if needed.
struct EngineFlags {
    bool check_finite = true;
    bool grad_enabled = true;
};

inline EngineFlags& flags() {
    static thread_local EngineFlags f;
    return f;
}

class NoGradGuard {
public:
    NoGradGuard() : prev_(flags().grad_enabled) { flags().grad_enabled = false; }
    ~NoGradGuard() { flags().grad_enabled = prev_; }

private:
    bool prev_;
};

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

/// One record on the tape: the op's saved output, its parents, and the
/// closure that pushes gradient back to them. Creation order doubles as
/// topological order because an op always runs after its inputs exist.
struct TensorNode {
    std::vector<size_t> shape;  // {rows, cols}
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(TensorNode&)> backward_fn;
    int64_t id = 0;
    const char* op = "leaf";

    size_t numel() const { return data.size(); }
    size_t rows() const { return shape[0]; }
    size_t cols() const { return shape[1]; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

inline int64_t next_node_id() {
    static std::atomic<int64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

/// Value-semantic handle onto a tape node. Copies share the node.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(size_t rows, size_t cols, bool requires_grad = false) {
        return make(rows, cols, std::vector<double>(rows * cols, 0.0), requires_grad);
    }

    static Tensor full(size_t rows, size_t cols, double value, bool requires_grad = false) {
        return make(rows, cols, std::vector<double>(rows * cols, value), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return make(1, 1, {value}, requires_grad);
    }

    static Tensor from_vector(size_t rows, size_t cols, std::vector<double> values,
                              bool requires_grad = false) {
        if (values.size() != rows * cols)
            throw std::invalid_argument("Tensor::from_vector: size mismatch");
        return make(rows, cols, std::move(values), requires_grad);
    }

    static Tensor randn(size_t rows, size_t cols, Rng& rng, double stddev = 1.0,
                        bool requires_grad = false) {
        std::vector<double> v(rows * cols);
        for (auto& x : v) x = rng.gaussian() * stddev;
        return make(rows, cols, std::move(v), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<size_t>& shape() const { return node_->shape; }
    size_t rows() const { return node_->rows(); }
    size_t cols() const { return node_->cols(); }
    size_t numel() const { return node_->numel(); }
    bool requires_grad() const { return node_->requires_grad; }

    double* data() { return node_->data.data(); }
    const double* data() const { return node_->data.data(); }
    std::vector<double>& data_vec() { return node_->data; }
    const std::vector<double>& data_vec() const { return node_->data; }

    double* grad() { return node_->grad.data(); }
    const double* grad() const { return node_->grad.data(); }
    bool has_grad() const { return node_->grad.size() == node_->data.size(); }
    std::vector<double>& grad_vec() { return node_->grad; }

    double at(size_t r, size_t c) const { return node_->data[r * cols() + c]; }
    double& at(size_t r, size_t c) { return node_->data[r * cols() + c]; }

    double item() const {
        if (numel() != 1) throw std::runtime_error("Tensor::item: not a scalar");
        return node_->data[0];
    }

    void zero_grad() {
        if (node_->requires_grad) node_->grad.assign(node_->data.size(), 0.0);
    }

    /// Tape cut: a leaf sharing this tensor's values. Gradient never flows
    /// through; this is the stop-gradient primitive.
    Tensor detach() const {
        Tensor t = make(rows(), cols(), node_->data, false);
        t.node_->op = "detach";
        return t;
    }

    /// Reverse pass from a scalar root. Visits each reachable node exactly
    /// once in reverse creation order.
    void backward() const {
        if (numel() != 1) throw std::runtime_error("backward: root must be scalar");
        std::vector<TensorNode*> order;
        std::unordered_set<TensorNode*> seen;
        std::vector<TensorNode*> stack{node_.get()};
        seen.insert(node_.get());
        while (!stack.empty()) {
            TensorNode* n = stack.back();
            stack.pop_back();
            order.push_back(n);
            for (auto& p : n->parents) {
                if (seen.insert(p.get()).second) stack.push_back(p.get());
            }
        }
        std::sort(order.begin(), order.end(),
                  [](const TensorNode* a, const TensorNode* b) { return a->id > b->id; });
        for (TensorNode* n : order) n->ensure_grad();
        node_->grad[0] = 1.0;
        for (TensorNode* n : order) {
            if (n->backward_fn) n->backward_fn(*n);
        }
    }

    TensorNode* node() const { return node_.get(); }
    NodePtr node_ptr() const { return node_; }

    static Tensor make(size_t rows, size_t cols, std::vector<double> values, bool requires_grad) {
        if (rows == 0 || cols == 0) throw std::invalid_argument("Tensor: zero extent");
        Tensor t;
        t.node_ = std::make_shared<TensorNode>();
        t.node_->shape = {rows, cols};
        t.node_->data = std::move(values);
        t.node_->requires_grad = requires_grad;
        t.node_->id = next_node_id();
        if (requires_grad) t.node_->ensure_grad();
        return t;
    }

private:
    NodePtr node_;
};

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
    if (!flags().check_finite) return;
    for (double v : t.data_vec()) {
        if (!std::isfinite(v)) {
            throw std::runtime_error(std::string("non-finite value produced by op '") + op + "'");
        }
    }
}

inline bool want_grad(const Tensor& t) { return flags().grad_enabled && t.requires_grad; }

inline Tensor new_result(size_t rows, size_t cols, std::vector<double> values, bool rg,
                         const char* op, std::vector<Tensor> parents,
                         std::function<void(TensorNode&)> backward) {
    Tensor out = Tensor::make(rows, cols, std::move(values), rg);
    out.node()->op = op;
    if (rg) {
        auto& ps = out.node()->parents;
        ps.reserve(parents.size());
        for (auto& p : parents) ps.push_back(p.node_ptr());
        out.node()->backward_fn = std::move(backward);
    }
    check_finite(out, op);
    return out;
}

inline void accumulate(TensorNode& dst, std::span<const double> delta) {
    dst.ensure_grad();
    for (size_t i = 0; i < delta.size(); ++i) dst.grad[i] += delta[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("add: shape mismatch");
    std::vector<double> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
    bool rg = detail::want_grad(a) || detail::want_grad(b);
    return detail::new_result(a.rows(), a.cols(), std::move(v), rg, "add", {a, b},
                              [](TensorNode& o) {
                                  for (auto& p : o.parents) {
                                      if (!p->requires_grad) continue;
                                      detail::accumulate(*p, o.grad);
                                  }
                              });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("sub: shape mismatch");
    std::vector<double> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
    bool rg = detail::want_grad(a) || detail::want_grad(b);
    return detail::new_result(a.rows(), a.cols(), std::move(v), rg, "sub", {a, b},
                              [](TensorNode& o) {
                                  auto& pa = *o.parents[0];
                                  auto& pb = *o.parents[1];
                                  if (pa.requires_grad) detail::accumulate(pa, o.grad);
                                  if (pb.requires_grad) {
                                      pb.ensure_grad();
                                      for (size_t i = 0; i < o.grad.size(); ++i)
                                          pb.grad[i] -= o.grad[i];
                                  }
                              });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("mul: shape mismatch");
    std::vector<double> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
    bool rg = detail::want_grad(a) || detail::want_grad(b);
    return detail::new_result(a.rows(), a.cols(), std::move(v), rg, "mul", {a, b},
                              [](TensorNode& o) {
                                  auto& pa = *o.parents[0];
                                  auto& pb = *o.parents[1];
                                  if (pa.requires_grad) {
                                      pa.ensure_grad();
                                      for (size_t i = 0; i < o.grad.size(); ++i)
                                          pa.grad[i] += o.grad[i] * pb.data[i];
                                  }
                                  if (pb.requires_grad) {
                                      pb.ensure_grad();
                                      for (size_t i = 0; i < o.grad.size(); ++i)
                                          pb.grad[i] += o.grad[i] * pa.data[i];
                                  }
                              });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * c;
    return detail::new_result(a.rows(), a.cols(), std::move(v), detail::want_grad(a), "scale",
                              {a}, [c](TensorNode& o) {
                                  auto& pa = *o.parents[0];
                                  if (!pa.requires_grad) return;
                                  pa.ensure_grad();
                                  for (size_t i = 0; i < o.grad.size(); ++i)
                                      pa.grad[i] += o.grad[i] * c;
                              });
}

/// x[m×n] + b[1×n], broadcast over rows (bias add).
inline Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    if (b.rows() != 1 || b.cols() != x.cols())
        throw std::invalid_argument("add_rowvec: bias must be 1×cols(x)");
    std::vector<double> v(x.numel());
    size_t m = x.rows(), n = x.cols();
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) v[i * n + j] = x.data()[i * n + j] + b.data()[j];
    bool rg = detail::want_grad(x) || detail::want_grad(b);
    return detail::new_result(m, n, std::move(v), rg, "add_rowvec", {x, b}, [](TensorNode& o) {
        auto& px = *o.parents[0];
        auto& pb = *o.parents[1];
        size_t m2 = o.rows(), n2 = o.cols();
        if (px.requires_grad) detail::accumulate(px, o.grad);
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < m2; ++i)
                for (size_t j = 0; j < n2; ++j) pb.grad[j] += o.grad[i * n2 + j];
        }
    });
}

/// x[m×n] * c[m×1], each row scaled by its own coefficient.
inline Tensor mul_colvec(const Tensor& x, const Tensor& c) {
    if (c.cols() != 1 || c.rows() != x.rows())
        throw std::invalid_argument("mul_colvec: coeffs must be rows(x)×1");
    std::vector<double> v(x.numel());
    size_t m = x.rows(), n = x.cols();
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) v[i * n + j] = x.data()[i * n + j] * c.data()[i];
    bool rg = detail::want_grad(x) || detail::want_grad(c);
    return detail::new_result(m, n, std::move(v), rg, "mul_colvec", {x, c}, [](TensorNode& o) {
        auto& px = *o.parents[0];
        auto& pc = *o.parents[1];
        size_t m2 = o.rows(), n2 = o.cols();
        if (px.requires_grad) {
            px.ensure_grad();
            for (size_t i = 0; i < m2; ++i)
                for (size_t j = 0; j < n2; ++j)
                    px.grad[i * n2 + j] += o.grad[i * n2 + j] * pc.data[i];
        }
        if (pc.requires_grad) {
            pc.ensure_grad();
            for (size_t i = 0; i < m2; ++i) {
                double acc = 0.0;
                for (size_t j = 0; j < n2; ++j) acc += o.grad[i * n2 + j] * px.data[i * n2 + j];
                pc.grad[i] += acc;
            }
        }
    });
}

inline Tensor gelu(const Tensor& x) {
    const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
    std::vector<double> v(x.numel());
    for (size_t i = 0; i < v.size(); ++i) {
        double t = x.data()[i];
        v[i] = 0.5 * t * (1.0 + std::erf(t * inv_sqrt2));
    }
    return detail::new_result(x.rows(), x.cols(), std::move(v), detail::want_grad(x), "gelu",
                              {x}, [inv_sqrt2](TensorNode& o) {
                                  auto& px = *o.parents[0];
                                  if (!px.requires_grad) return;
                                  px.ensure_grad();
                                  const double inv_sqrt2pi =
                                      1.0 / std::sqrt(2.0 * std::numbers::pi);
                                  for (size_t i = 0; i < o.grad.size(); ++i) {
                                      double t = px.data[i];
                                      double cdf = 0.5 * (1.0 + std::erf(t * inv_sqrt2));
                                      double pdf = std::exp(-0.5 * t * t) * inv_sqrt2pi;
                                      px.grad[i] += o.grad[i] * (cdf + t * pdf);
                                  }
                              });
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

namespace detail {

/// C[m×n] += A[m×k] · B[k×n], ikj loop order for contiguous inner access.
inline void matmul_acc(const double* a, const double* b, double* c, size_t m, size_t k,
                       size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (size_t p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

/// C[m×n] += A[k×m]ᵀ · B[k×n]
inline void matmul_tn_acc(const double* a, const double* b, double* c, size_t k, size_t m,
                          size_t n) {
    for (size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (size_t i = 0; i < m; ++i) {
            double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

/// C[m×n] += A[m×k] · B[n×k]ᵀ
inline void matmul_nt_acc(const double* a, const double* b, double* c, size_t m, size_t k,
                          size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dims differ");
    size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> v(m * n, 0.0);
    detail::matmul_acc(a.data(), b.data(), v.data(), m, k, n);
    bool rg = detail::want_grad(a) || detail::want_grad(b);
    return detail::new_result(m, n, std::move(v), rg, "matmul", {a, b}, [](TensorNode& o) {
        auto& pa = *o.parents[0];
        auto& pb = *o.parents[1];
        size_t m2 = pa.rows(), k2 = pa.cols(), n2 = pb.cols();
        if (pa.requires_grad) {
            pa.ensure_grad();
            detail::matmul_nt_acc(o.grad.data(), pb.data.data(), pa.grad.data(), m2, n2, k2);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            detail::matmul_tn_acc(pa.data.data(), o.grad.data(), pb.grad.data(), m2, k2, n2);
        }
    });
}

inline Tensor transpose(const Tensor& a) {
    size_t m = a.rows(), n = a.cols();
    std::vector<double> v(m * n);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) v[j * m + i] = a.data()[i * n + j];
    return detail::new_result(n, m, std::move(v), detail::want_grad(a), "transpose", {a},
                              [](TensorNode& o) {
                                  auto& pa = *o.parents[0];
                                  if (!pa.requires_grad) return;
                                  pa.ensure_grad();
                                  size_t n2 = o.rows(), m2 = o.cols();
                                  for (size_t j = 0; j < n2; ++j)
                                      for (size_t i = 0; i < m2; ++i)
                                          pa.grad[i * n2 + j] += o.grad[j * m2 + i];
                              });
}

// ---------------------------------------------------------------------------
// Row/col assembly
// ---------------------------------------------------------------------------

inline Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
    size_t n = parts[0].cols(), m = 0;
    bool rg = false;
    for (const auto& p : parts) {
        if (p.cols() != n) throw std::invalid_argument("concat_rows: col mismatch");
        m += p.rows();
        rg = rg || detail::want_grad(p);
    }
    std::vector<double> v;
    v.reserve(m * n);
    for (const auto& p : parts) v.insert(v.end(), p.data_vec().begin(), p.data_vec().end());
    std::vector<Tensor> ps(parts.begin(), parts.end());
    return detail::new_result(m, n, std::move(v), rg, "concat_rows", ps, [](TensorNode& o) {
        size_t n2 = o.cols();
        size_t row = 0;
        for (auto& p : o.parents) {
            size_t r = p->rows();
            if (p->requires_grad) {
                p->ensure_grad();
                for (size_t i = 0; i < r * n2; ++i) p->grad[i] += o.grad[row * n2 + i];
            }
            row += r;
        }
    });
}

inline Tensor concat_rows(std::initializer_list<Tensor> parts) {
    std::vector<Tensor> v(parts);
    return concat_rows(std::span<const Tensor>(v));
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows()) throw std::invalid_argument("concat_cols: row mismatch");
    size_t m = a.rows(), na = a.cols(), nb = b.cols();
    std::vector<double> v(m * (na + nb));
    for (size_t i = 0; i < m; ++i) {
        std::copy_n(a.data() + i * na, na, v.data() + i * (na + nb));
        std::copy_n(b.data() + i * nb, nb, v.data() + i * (na + nb) + na);
    }
    bool rg = detail::want_grad(a) || detail::want_grad(b);
    return detail::new_result(m, na + nb, std::move(v), rg, "concat_cols", {a, b},
                              [](TensorNode& o) {
                                  auto& pa = *o.parents[0];
                                  auto& pb = *o.parents[1];
                                  size_t m2 = o.rows(), na2 = pa.cols(), nb2 = pb.cols();
                                  if (pa.requires_grad) {
                                      pa.ensure_grad();
                                      for (size_t i = 0; i < m2; ++i)
                                          for (size_t j = 0; j < na2; ++j)
                                              pa.grad[i * na2 + j] +=
                                                  o.grad[i * (na2 + nb2) + j];
                                  }
                                  if (pb.requires_grad) {
                                      pb.ensure_grad();
                                      for (size_t i = 0; i < m2; ++i)
                                          for (size_t j = 0; j < nb2; ++j)
                                              pb.grad[i * nb2 + j] +=
                                                  o.grad[i * (na2 + nb2) + na2 + j];
                                  }
                              });
}

inline Tensor slice_rows(const Tensor& x, size_t lo, size_t hi) {
    if (lo >= hi || hi > x.rows()) throw std::invalid_argument("slice_rows: bad range");
    size_t n = x.cols(), m = hi - lo;
    std::vector<double> v(x.data() + lo * n, x.data() + hi * n);
    return detail::new_result(m, n, std::move(v), detail::want_grad(x), "slice_rows", {x},
                              [lo](TensorNode& o) {
                                  auto& px = *o.parents[0];
                                  if (!px.requires_grad) return;
                                  px.ensure_grad();
                                  size_t n2 = o.cols();
                                  for (size_t i = 0; i < o.rows(); ++i)
                                      for (size_t j = 0; j < n2; ++j)
                                          px.grad[(lo + i) * n2 + j] += o.grad[i * n2 + j];
                              });
}

inline Tensor slice_cols(const Tensor& x, size_t lo, size_t hi) {
    if (lo >= hi || hi > x.cols()) throw std::invalid_argument("slice_cols: bad range");
    size_t m = x.rows(), n = x.cols(), w = hi - lo;
    std::vector<double> v(m * w);
    for (size_t i = 0; i < m; ++i) std::copy_n(x.data() + i * n + lo, w, v.data() + i * w);
    return detail::new_result(m, w, std::move(v), detail::want_grad(x), "slice_cols", {x},
                              [lo, n](TensorNode& o) {
                                  auto& px = *o.parents[0];
                                  if (!px.requires_grad) return;
                                  px.ensure_grad();
                                  size_t w2 = o.cols();
                                  for (size_t i = 0; i < o.rows(); ++i)
                                      for (size_t j = 0; j < w2; ++j)
                                          px.grad[i * n + lo + j] += o.grad[i * w2 + j];
                              });
}

/// Row gather: out[i] = x[idx[i]]. Serves both embedding lookup (x = table,
/// idx = token ids) and hidden-state selection. Repeated indices accumulate
/// on the way back.
inline Tensor gather_rows(const Tensor& x, std::span<const int> idx) {
    size_t n = x.cols();
    std::vector<double> v(idx.size() * n);
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || static_cast<size_t>(idx[i]) >= x.rows())
            throw std::out_of_range("gather_rows: index out of range");
        std::copy_n(x.data() + static_cast<size_t>(idx[i]) * n, n, v.data() + i * n);
    }
    std::vector<int> saved(idx.begin(), idx.end());
    return detail::new_result(idx.size(), n, std::move(v), detail::want_grad(x), "gather_rows",
                              {x}, [saved = std::move(saved)](TensorNode& o) {
                                  auto& px = *o.parents[0];
                                  if (!px.requires_grad) return;
                                  px.ensure_grad();
                                  size_t n2 = o.cols();
                                  for (size_t i = 0; i < saved.size(); ++i) {
                                      size_t r = static_cast<size_t>(saved[i]);
                                      for (size_t j = 0; j < n2; ++j)
                                          px.grad[r * n2 + j] += o.grad[i * n2 + j];
                                  }
                              });
}

// ---------------------------------------------------------------------------
// Reductions and normalizations
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data_vec()) acc += v;
    return detail::new_result(1, 1, {acc}, detail::want_grad(x), "sum_all", {x},
                              [](TensorNode& o) {
                                  auto& px = *o.parents[0];
                                  if (!px.requires_grad) return;
                                  px.ensure_grad();
                                  for (auto& g : px.grad) g += o.grad[0];
                              });
}

inline Tensor mean_all(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data_vec()) acc += v;
    double inv = 1.0 / static_cast<double>(x.numel());
    return detail::new_result(1, 1, {acc * inv}, detail::want_grad(x), "mean_all", {x},
                              [inv](TensorNode& o) {
                                  auto& px = *o.parents[0];
                                  if (!px.requires_grad) return;
                                  px.ensure_grad();
                                  for (auto& g : px.grad) g += o.grad[0] * inv;
                              });
}

/// Column means: [m×n] → [1×n].
inline Tensor mean_rows(const Tensor& x) {
    size_t m = x.rows(), n = x.cols();
    std::vector<double> v(n, 0.0);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) v[j] += x.data()[i * n + j];
    double inv = 1.0 / static_cast<double>(m);
    for (auto& t : v) t *= inv;
    return detail::new_result(1, n, std::move(v), detail::want_grad(x), "mean_rows", {x},
                              [inv, m](TensorNode& o) {
                                  auto& px = *o.parents[0];
                                  if (!px.requires_grad) return;
                                  px.ensure_grad();
                                  size_t n2 = o.cols();
                                  for (size_t i = 0; i < m; ++i)
                                      for (size_t j = 0; j < n2; ++j)
                                          px.grad[i * n2 + j] += o.grad[j] * inv;
                              });
}

/// Numerically stable row softmax. Row max is subtracted first, which is
/// what makes the shift-invariance contract hold to rounding.
inline Tensor softmax_rows(const Tensor& x) {
    size_t m = x.rows(), n = x.cols();
    std::vector<double> v(m * n);
    for (size_t i = 0; i < m; ++i) {
        const double* row = x.data() + i * n;
        double mx = row[0];
        for (size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (size_t j = 0; j < n; ++j) {
            double e = std::exp(row[j] - mx);
            v[i * n + j] = e;
            z += e;
        }
        double inv = 1.0 / z;
        for (size_t j = 0; j < n; ++j) v[i * n + j] *= inv;
    }
    return detail::new_result(m, n, std::move(v), detail::want_grad(x), "softmax_rows", {x},
                              [](TensorNode& o) {
                                  auto& px = *o.parents[0];
                                  if (!px.requires_grad) return;
                                  px.ensure_grad();
                                  size_t m2 = o.rows(), n2 = o.cols();
                                  for (size_t i = 0; i < m2; ++i) {
                                      const double* y = o.data.data() + i * n2;
                                      const double* dy = o.grad.data() + i * n2;
                                      double dot = 0.0;
                                      for (size_t j = 0; j < n2; ++j) dot += y[j] * dy[j];
                                      double* dx = px.grad.data() + i * n2;
                                      for (size_t j = 0; j < n2; ++j)
                                          dx[j] += y[j] * (dy[j] - dot);
                                  }
                              });
}

/// Row layer norm with learned gain/bias: gamma, beta are [1×n].
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
    size_t m = x.rows(), n = x.cols();
    if (gamma.cols() != n || beta.cols() != n || gamma.rows() != 1 || beta.rows() != 1)
        throw std::invalid_argument("layer_norm: gamma/beta must be 1×cols(x)");
    std::vector<double> v(m * n);
    std::vector<double> xhat(m * n);
    std::vector<double> inv_sigma(m);
    for (size_t i = 0; i < m; ++i) {
        const double* row = x.data() + i * n;
        double mu = 0.0;
        for (size_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (size_t j = 0; j < n; ++j) {
            double d = row[j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[i] = is;
        for (size_t j = 0; j < n; ++j) {
            double h = (row[j] - mu) * is;
            xhat[i * n + j] = h;
            v[i * n + j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    bool rg = detail::want_grad(x) || detail::want_grad(gamma) || detail::want_grad(beta);
    return detail::new_result(
        m, n, std::move(v), rg, "layer_norm", {x, gamma, beta},
        [xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](TensorNode& o) {
            auto& px = *o.parents[0];
            auto& pg = *o.parents[1];
            auto& pb = *o.parents[2];
            size_t m2 = o.rows(), n2 = o.cols();
            if (pg.requires_grad) {
                pg.ensure_grad();
                for (size_t i = 0; i < m2; ++i)
                    for (size_t j = 0; j < n2; ++j)
                        pg.grad[j] += o.grad[i * n2 + j] * xhat[i * n2 + j];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (size_t i = 0; i < m2; ++i)
                    for (size_t j = 0; j < n2; ++j) pb.grad[j] += o.grad[i * n2 + j];
            }
            if (px.requires_grad) {
                px.ensure_grad();
                for (size_t i = 0; i < m2; ++i) {
                    const double* dy = o.grad.data() + i * n2;
                    const double* h = xhat.data() + i * n2;
                    double mean_dyg = 0.0, mean_dygh = 0.0;
                    for (size_t j = 0; j < n2; ++j) {
                        double dyg = dy[j] * pg.data[j];
                        mean_dyg += dyg;
                        mean_dygh += dyg * h[j];
                    }
                    mean_dyg /= static_cast<double>(n2);
                    mean_dygh /= static_cast<double>(n2);
                    for (size_t j = 0; j < n2; ++j) {
                        double dyg = dy[j] * pg.data[j];
                        px.grad[i * n2 + j] +=
                            inv_sigma[i] * (dyg - mean_dyg - h[j] * mean_dygh);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Losses and regularization
// ---------------------------------------------------------------------------

/// Mean NLL over unmasked positions. mask[t] == true means position t counts.
/// Gradient reaches only unmasked logit rows.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                            std::span<const uint8_t> mask) {
    size_t t_len = logits.rows(), vocab = logits.cols();
    if (targets.size() != t_len) throw std::invalid_argument("cross_entropy: targets size");
    if (!mask.empty() && mask.size() != t_len)
        throw std::invalid_argument("cross_entropy: mask size");
    size_t kept = 0;
    for (size_t t = 0; t < t_len; ++t)
        if (mask.empty() || mask[t]) ++kept;
    if (kept == 0) throw std::invalid_argument("cross_entropy: all positions masked");

    std::vector<double> probs(t_len * vocab);
    double total = 0.0;
    for (size_t t = 0; t < t_len; ++t) {
        const double* row = logits.data() + t * vocab;
        double mx = row[0];
        for (size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (size_t j = 0; j < vocab; ++j) {
            double e = std::exp(row[j] - mx);
            probs[t * vocab + j] = e;
            z += e;
        }
        double inv = 1.0 / z;
        for (size_t j = 0; j < vocab; ++j) probs[t * vocab + j] *= inv;
        if (mask.empty() || mask[t]) {
            int y = targets[t];
            if (y < 0 || static_cast<size_t>(y) >= vocab)
                throw std::out_of_range("cross_entropy: target out of vocab");
            total += -(row[static_cast<size_t>(y)] - mx - std::log(z));
        }
    }
    double inv_kept = 1.0 / static_cast<double>(kept);
    std::vector<int> tg(targets.begin(), targets.end());
    std::vector<uint8_t> mk(mask.begin(), mask.end());
    return detail::new_result(
        1, 1, {total * inv_kept}, detail::want_grad(logits), "cross_entropy", {logits},
        [probs = std::move(probs), tg = std::move(tg), mk = std::move(mk),
         inv_kept](TensorNode& o) {
            auto& pl = *o.parents[0];
            if (!pl.requires_grad) return;
            pl.ensure_grad();
            size_t vocab2 = pl.cols();
            double go = o.grad[0] * inv_kept;
            for (size_t t = 0; t < pl.rows(); ++t) {
                if (!mk.empty() && !mk[t]) continue;
                const double* p = probs.data() + t * vocab2;
                double* g = pl.grad.data() + t * vocab2;
                for (size_t j = 0; j < vocab2; ++j) g[j] += go * p[j];
                g[static_cast<size_t>(tg[t])] -= go;
            }
        });
}

inline Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
    return cross_entropy(logits, targets, {});
}

/// Inverted dropout: scales kept activations by 1/(1-p) at train time,
/// identity at eval time. The mask comes from the run's seeded stream.
inline Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
    if (!training || p <= 0.0) return x;
    if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
    double keep = 1.0 - p;
    std::vector<double> m(x.numel());
    for (auto& v : m) v = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
    std::vector<double> v(x.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = x.data()[i] * m[i];
    return detail::new_result(x.rows(), x.cols(), std::move(v), detail::want_grad(x), "dropout",
                              {x}, [m = std::move(m)](TensorNode& o) {
                                  auto& px = *o.parents[0];
                                  if (!px.requires_grad) return;
                                  px.ensure_grad();
                                  for (size_t i = 0; i < o.grad.size(); ++i)
                                      px.grad[i] += o.grad[i] * m[i];
                              });
}

/// Per-row NLL of targets under row-softmax, computed outside the graph.
/// Evaluation helper shared by the perplexity and generation metrics.
inline std::vector<double> nll_rows(const Tensor& logits, std::span<const int> targets) {
    size_t t_len = logits.rows(), vocab = logits.cols();
    if (targets.size() != t_len) throw std::invalid_argument("nll_rows: targets size");
    std::vector<double> out(t_len);
    for (size_t t = 0; t < t_len; ++t) {
        const double* row = logits.data() + t * vocab;
        double mx = row[0];
        for (size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
        int y = targets[t];
        if (y < 0 || static_cast<size_t>(y) >= vocab)
            throw std::out_of_range("nll_rows: target out of vocab");
        out[t] = -(row[static_cast<size_t>(y)] - mx - std::log(z));
    }
    return out;
}

}  // namespace avlm::num
