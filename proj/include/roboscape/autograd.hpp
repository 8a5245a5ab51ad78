#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "roboscape/tensor.hpp"

namespace rs {

// A named, persistent learnable tensor. Gradients accumulate across tapes;
// m/v are optimizer state owned by the trainer.
template <class T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> m, v;
  bool trainable = true;

  Param(std::string n, Tensor<T> init)
      : name(std::move(n)), value(std::move(init)), grad(value.shape, T(0)) {}
};

template <class T>
class ParamStore {
 public:
  Param<T>& add(std::string name, Tensor<T> init) {
    RS_CHECK(find(name) == nullptr, "param '%s' already registered", name.c_str());
    items_.push_back(std::make_unique<Param<T>>(std::move(name), std::move(init)));
    return *items_.back();
  }

  Param<T>* find(const std::string& name) {
    for (auto& p : items_)
      if (p->name == name) return p.get();
    return nullptr;
  }
  Param<T>& get(const std::string& name) {
    Param<T>* p = find(name);
    RS_CHECK(p != nullptr, "unknown param '%s'", name.c_str());
    return *p;
  }

  size_t size() const { return items_.size(); }
  Param<T>& operator[](size_t i) { return *items_[i]; }
  const Param<T>& operator[](size_t i) const { return *items_[i]; }

  int64_t total_scalars() const {
    int64_t n = 0;
    for (const auto& p : items_) n += p->value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : items_) std::fill(p->grad.data.begin(), p->grad.data.end(), T(0));
  }

  bool all_finite() const {
    for (const auto& p : items_)
      if (!p->value.all_finite()) return false;
    return true;
  }

 private:
  std::vector<std::unique_ptr<Param<T>>> items_;
};

// ---------------------------------------------------------------------------
// Reverse-mode tape. Ops append nodes; backward() replays the recorded
// closures in reverse creation order (reverse topological by construction)
// and accumulates into Param::grad. Node buffers are released as the sweep
// passes them, so read values before calling backward().
// ---------------------------------------------------------------------------
template <class T>
class Tape {
 public:
  using BackFn = std::function<void(Tape&)>;

  // grad_enabled=false records values only (pure inference, params untouched).
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  int leaf(Param<T>& p) {
    Node n;
    n.param = &p;
    n.needs_grad = grad_enabled_ && p.trainable;
    nodes_.push_back(std::move(n));
    return last();
  }

  int constant(Tensor<T> v) {
    Node n;
    n.val = std::move(v);
    nodes_.push_back(std::move(n));
    return last();
  }

  int make(Tensor<T> val, bool needs_grad) {
    Node n;
    n.val = std::move(val);
    n.needs_grad = grad_enabled_ && needs_grad;
    if (n.needs_grad) n.grad = Tensor<T>(n.val.shape, T(0));
    nodes_.push_back(std::move(n));
    return last();
  }

  void set_back(int id, BackFn fn) { nodes_[static_cast<size_t>(id)].back = std::move(fn); }

  Tensor<T>& val(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    return n.param ? n.param->value : n.val;
  }
  Tensor<T>& grad(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    return n.param ? n.param->grad : n.grad;
  }
  bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

  // Accumulates d(loss)/d(param) into every param reachable from loss_id.
  void backward(int loss_id) {
    RS_CHECK(!consumed_, "tape consumed twice without reset");
    RS_CHECK(val(loss_id).numel() == 1, "backward: loss must be scalar, got %s",
             shape_str(val(loss_id).shape).c_str());
    consumed_ = true;
    if (nodes_[static_cast<size_t>(loss_id)].needs_grad) grad(loss_id).at(0) = T(1);
    for (int i = loss_id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.needs_grad && n.back) n.back(*this);
      if (!n.param) {  // release as the sweep passes
        n.val = Tensor<T>();
        n.grad = Tensor<T>();
        n.back = nullptr;
      }
    }
  }

  size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    Tensor<T> val;
    Tensor<T> grad;
    Param<T>* param = nullptr;
    bool needs_grad = false;
    BackFn back;
  };

  int last() const { return static_cast<int>(nodes_.size()) - 1; }
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Elementwise / broadcast ops.
// ---------------------------------------------------------------------------

template <class T>
int op_add(Tape<T>& t, int a, int b) {
  RS_CHECK(t.val(a).same_shape(t.val(b)), "add: shape mismatch %s vs %s",
           shape_str(t.val(a).shape).c_str(), shape_str(t.val(b).shape).c_str());
  Tensor<T> out = t.val(a);
  const Tensor<T>& bv = t.val(b);
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += bv.data[i];
  const int id = t.make(std::move(out), t.needs_grad(a) || t.needs_grad(b));
  if (t.needs_grad(id))
    t.set_back(id, [id, a, b](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(id);
      if (tp.needs_grad(a)) {
        Tensor<T>& ga = tp.grad(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
      }
      if (tp.needs_grad(b)) {
        Tensor<T>& gb = tp.grad(b);
        for (int64_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i];
      }
    });
  return id;
}

template <class T>
int op_sub(Tape<T>& t, int a, int b) {
  RS_CHECK(t.val(a).same_shape(t.val(b)), "sub: shape mismatch");
  Tensor<T> out = t.val(a);
  const Tensor<T>& bv = t.val(b);
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] -= bv.data[i];
  const int id = t.make(std::move(out), t.needs_grad(a) || t.needs_grad(b));
  if (t.needs_grad(id))
    t.set_back(id, [id, a, b](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(id);
      if (tp.needs_grad(a)) {
        Tensor<T>& ga = tp.grad(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
      }
      if (tp.needs_grad(b)) {
        Tensor<T>& gb = tp.grad(b);
        for (int64_t i = 0; i < g.numel(); ++i) gb.data[i] -= g.data[i];
      }
    });
  return id;
}

template <class T>
int op_scale(Tape<T>& t, int a, T c) {
  Tensor<T> out = t.val(a);
  for (auto& v : out.data) v *= c;
  const int id = t.make(std::move(out), t.needs_grad(a));
  if (t.needs_grad(id))
    t.set_back(id, [id, a, c](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(id);
      Tensor<T>& ga = tp.grad(a);
      for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += c * g.data[i];
    });
  return id;
}

// x[n,d] + y[i/rep]  (y has n/rep rows): per-frame broadcast over cells.
template <class T>
int op_add_rows_grouped(Tape<T>& t, int x, int y, int rep) {
  const Tensor<T>& xv = t.val(x);
  const Tensor<T>& yv = t.val(y);
  const int n = xv.rows(), d = xv.cols();
  RS_CHECK(rep >= 1 && n == yv.rows() * rep && d == yv.cols(),
           "add_rows_grouped: %s + %s rep=%d", shape_str(xv.shape).c_str(),
           shape_str(yv.shape).c_str(), rep);
  Tensor<T> out = xv;
  for (int i = 0; i < n; ++i) {
    const T* yr = yv.ptr() + static_cast<int64_t>(i / rep) * d;
    T* o = out.ptr() + static_cast<int64_t>(i) * d;
    for (int j = 0; j < d; ++j) o[j] += yr[j];
  }
  const int id = t.make(std::move(out), t.needs_grad(x) || t.needs_grad(y));
  if (t.needs_grad(id))
    t.set_back(id, [id, x, y, rep, n, d](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(id);
      if (tp.needs_grad(x)) {
        Tensor<T>& gx = tp.grad(x);
        for (int64_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i];
      }
      if (tp.needs_grad(y)) {
        Tensor<T>& gy = tp.grad(y);
        for (int i = 0; i < n; ++i) {
          const T* gr = g.ptr() + static_cast<int64_t>(i) * d;
          T* yr = gy.ptr() + static_cast<int64_t>(i / rep) * d;
          for (int j = 0; j < d; ++j) yr[j] += gr[j];
        }
      }
    });
  return id;
}

// x[n,d] + y[i % ry]: tiled broadcast (spatial position table over frames).
template <class T>
int op_add_rows_tiled(Tape<T>& t, int x, int y) {
  const Tensor<T>& xv = t.val(x);
  const Tensor<T>& yv = t.val(y);
  const int n = xv.rows(), d = xv.cols(), ry = yv.rows();
  RS_CHECK(ry >= 1 && n % ry == 0 && d == yv.cols(), "add_rows_tiled: %s + %s",
           shape_str(xv.shape).c_str(), shape_str(yv.shape).c_str());
  Tensor<T> out = xv;
  for (int i = 0; i < n; ++i) {
    const T* yr = yv.ptr() + static_cast<int64_t>(i % ry) * d;
    T* o = out.ptr() + static_cast<int64_t>(i) * d;
    for (int j = 0; j < d; ++j) o[j] += yr[j];
  }
  const int id = t.make(std::move(out), t.needs_grad(x) || t.needs_grad(y));
  if (t.needs_grad(id))
    t.set_back(id, [id, x, y, n, d, ry](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(id);
      if (tp.needs_grad(x)) {
        Tensor<T>& gx = tp.grad(x);
        for (int64_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i];
      }
      if (tp.needs_grad(y)) {
        Tensor<T>& gy = tp.grad(y);
        for (int i = 0; i < n; ++i) {
          const T* gr = g.ptr() + static_cast<int64_t>(i) * d;
          T* yr = gy.ptr() + static_cast<int64_t>(i % ry) * d;
          for (int j = 0; j < d; ++j) yr[j] += gr[j];
        }
      }
    });
  return id;
}

template <class T>
int op_embedding(Tape<T>& t, int table, std::vector<int> ids) {
  const Tensor<T>& tab = t.val(table);
  RS_CHECK(tab.ndim() == 2, "embedding: table must be 2-D");
  const int V = tab.rows(), D = tab.cols();
  const int n = static_cast<int>(ids.size());
  Tensor<T> out({n, D});
  for (int i = 0; i < n; ++i) {
    RS_CHECK(ids[i] >= 0 && ids[i] < V, "embedding: index %d out of range [0,%d)", ids[i], V);
    std::memcpy(out.ptr() + static_cast<int64_t>(i) * D,
                tab.ptr() + static_cast<int64_t>(ids[i]) * D, sizeof(T) * D);
  }
  const int id = t.make(std::move(out), t.needs_grad(table));
  if (t.needs_grad(id))
    t.set_back(id, [id, table, ids = std::move(ids), D](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(id);
      Tensor<T>& gt = tp.grad(table);
      for (size_t i = 0; i < ids.size(); ++i) {
        const T* gr = g.ptr() + static_cast<int64_t>(i) * D;
        T* tr = gt.ptr() + static_cast<int64_t>(ids[i]) * D;
        for (int j = 0; j < D; ++j) tr[j] += gr[j];
      }
    });
  return id;
}

// out[i] = x[perm[i]]; perm must be a bijection on rows.
template <class T>
int op_permute_rows(Tape<T>& t, int x, std::shared_ptr<const std::vector<int>> perm) {
  const Tensor<T>& xv = t.val(x);
  const int n = xv.rows(), d = xv.cols();
  RS_CHECK(static_cast<int>(perm->size()) == n, "permute_rows: perm size mismatch");
  Tensor<T> out({n, d});
  parallel_for(n, [&](int64_t i) {
    std::memcpy(out.ptr() + i * d, xv.ptr() + static_cast<int64_t>((*perm)[i]) * d,
                sizeof(T) * static_cast<size_t>(d));
  });
  const int id = t.make(std::move(out), t.needs_grad(x));
  if (t.needs_grad(id))
    t.set_back(id, [id, x, perm, d](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(id);
      Tensor<T>& gx = tp.grad(x);
      const int n2 = g.rows();
      parallel_for(n2, [&](int64_t i) {
        const T* gr = g.ptr() + i * d;
        T* xr = gx.ptr() + static_cast<int64_t>((*perm)[i]) * d;
        for (int j = 0; j < d; ++j) xr[j] += gr[j];
      });
    });
  return id;
}

// ---------------------------------------------------------------------------
// Linear algebra ops.
// ---------------------------------------------------------------------------

// x[n,k] @ W[k,m] (+ b[m]). Pass b = -1 for no bias.
template <class T>
int op_linear(Tape<T>& t, int x, int W, int b = -1) {
  const Tensor<T>& xv = t.val(x);
  const Tensor<T>& wv = t.val(W);
  RS_CHECK(xv.ndim() == 2 && wv.ndim() == 2 && xv.cols() == wv.rows(),
           "linear: %s @ %s", shape_str(xv.shape).c_str(), shape_str(wv.shape).c_str());
  const int n = xv.rows(), k = xv.cols(), m = wv.cols();
  Tensor<T> out({n, m});
  matmul(xv.ptr(), wv.ptr(), out.ptr(), n, k, m);
  if (b >= 0) {
    const Tensor<T>& bv = t.val(b);
    RS_CHECK(bv.numel() == m, "linear: bias size mismatch");
    for (int i = 0; i < n; ++i) {
      T* o = out.ptr() + static_cast<int64_t>(i) * m;
      for (int j = 0; j < m; ++j) o[j] += bv.data[static_cast<size_t>(j)];
    }
  }
  const bool ng = t.needs_grad(x) || t.needs_grad(W) || (b >= 0 && t.needs_grad(b));
  const int id = t.make(std::move(out), ng);
  if (ng)
    t.set_back(id, [id, x, W, b, n, k, m](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(id);
      if (tp.needs_grad(x)) {
        Tensor<T> gx({n, k});
        matmul_nt(g.ptr(), tp.val(W).ptr(), gx.ptr(), n, m, k);
        Tensor<T>& acc = tp.grad(x);
        for (int64_t i = 0; i < gx.numel(); ++i) acc.data[i] += gx.data[i];
      }
      if (tp.needs_grad(W)) {
        Tensor<T> gw({k, m});
        matmul_tn(tp.val(x).ptr(), g.ptr(), gw.ptr(), n, k, m);
        Tensor<T>& acc = tp.grad(W);
        for (int64_t i = 0; i < gw.numel(); ++i) acc.data[i] += gw.data[i];
      }
      if (b >= 0 && tp.needs_grad(b)) {
        Tensor<T>& gb = tp.grad(b);
        for (int i = 0; i < n; ++i) {
          const T* gr = g.ptr() + static_cast<int64_t>(i) * m;
          for (int j = 0; j < m; ++j) gb.data[static_cast<size_t>(j)] += gr[j];
        }
      }
    });
  return id;
}

template <class T>
int op_layer_norm(Tape<T>& t, int x, int gain, int bias, T eps) {
  const Tensor<T>& xv = t.val(x);
  const int d = xv.cols();
  const int n = static_cast<int>(xv.numel() / d);
  RS_CHECK(d >= 1 && t.val(gain).numel() == d && t.val(bias).numel() == d,
           "layer_norm: size mismatch (D=%d)", d);
  RS_CHECK(eps > T(0), "layer_norm: eps must be positive");
  Tensor<T> out(xv.shape);
  auto stat = std::make_shared<std::vector<T>>(static_cast<size_t>(n) * 2);  // mu, invstd
  const Tensor<T>& gv = t.val(gain);
  const Tensor<T>& bv = t.val(bias);
  parallel_for(n, [&](int64_t i) {
    const T* xr = xv.ptr() + i * d;
    T mu = 0;
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + eps);
    (*stat)[static_cast<size_t>(i) * 2] = mu;
    (*stat)[static_cast<size_t>(i) * 2 + 1] = inv;
    T* o = out.ptr() + i * d;
    for (int j = 0; j < d; ++j) o[j] = (xr[j] - mu) * inv * gv.data[static_cast<size_t>(j)] + bv.data[static_cast<size_t>(j)];
  });
  const bool ng = t.needs_grad(x) || t.needs_grad(gain) || t.needs_grad(bias);
  const int id = t.make(std::move(out), ng);
  if (ng)
    t.set_back(id, [id, x, gain, bias, n, d, stat](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(id);
      const Tensor<T>& xv2 = tp.val(x);
      const Tensor<T>& gv2 = tp.val(gain);
      const bool wx = tp.needs_grad(x), wg = tp.needs_grad(gain), wb = tp.needs_grad(bias);
      // gain/bias reductions go row-major for determinism
      for (int i = 0; i < n; ++i) {
        const T mu = (*stat)[static_cast<size_t>(i) * 2];
        const T inv = (*stat)[static_cast<size_t>(i) * 2 + 1];
        const T* xr = xv2.ptr() + static_cast<int64_t>(i) * d;
        const T* gr = g.ptr() + static_cast<int64_t>(i) * d;
        if (wg || wb) {
          Tensor<T>& gg = tp.grad(gain);
          Tensor<T>& gb = tp.grad(bias);
          for (int j = 0; j < d; ++j) {
            if (wg) gg.data[static_cast<size_t>(j)] += gr[j] * (xr[j] - mu) * inv;
            if (wb) gb.data[static_cast<size_t>(j)] += gr[j];
          }
        }
        if (wx) {
          T sum_dxhat = 0, sum_dxhat_xhat = 0;
          for (int j = 0; j < d; ++j) {
            const T dxhat = gr[j] * gv2.data[static_cast<size_t>(j)];
            const T xhat = (xr[j] - mu) * inv;
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
          }
          Tensor<T>& gx = tp.grad(x);
          T* gxr = gx.ptr() + static_cast<int64_t>(i) * d;
          const T invd = T(1) / static_cast<T>(d);
          for (int j = 0; j < d; ++j) {
            const T dxhat = gr[j] * gv2.data[static_cast<size_t>(j)];
            const T xhat = (xr[j] - mu) * inv;
            gxr[j] += inv * (dxhat - invd * sum_dxhat - xhat * invd * sum_dxhat_xhat);
          }
        }
      }
    });
  return id;
}

template <class T>
int op_gelu(Tape<T>& t, int x) {
  static const T c0 = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  static const T c1 = static_cast<T>(0.044715);
  const Tensor<T>& xv = t.val(x);
  Tensor<T> out(xv.shape);
  for (int64_t i = 0; i < xv.numel(); ++i) {
    const T v = xv.data[i];
    out.data[i] = T(0.5) * v * (T(1) + std::tanh(c0 * (v + c1 * v * v * v)));
  }
  const int id = t.make(std::move(out), t.needs_grad(x));
  if (t.needs_grad(id))
    t.set_back(id, [id, x](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(id);
      const Tensor<T>& xv2 = tp.val(x);
      Tensor<T>& gx = tp.grad(x);
      for (int64_t i = 0; i < g.numel(); ++i) {
        const T v = xv2.data[i];
        const T u = c0 * (v + c1 * v * v * v);
        const T th = std::tanh(u);
        const T sech2 = T(1) - th * th;
        const T dudv = c0 * (T(1) + T(3) * c1 * v * v);
        gx.data[i] += g.data[i] * (T(0.5) * (T(1) + th) + T(0.5) * v * sech2 * dudv);
      }
    });
  return id;
}

// Multi-head attention over contiguous groups: qkv[n,3D] with n == groups*len.
// Per (group, head): out = softmax(Q Kᵀ/√dh [+ causal mask]) V.
template <class T>
int op_mha(Tape<T>& t, int qkv, int groups, int len, int heads, bool causal) {
  const Tensor<T>& qv = t.val(qkv);
  RS_CHECK(qv.ndim() == 2 && qv.cols() % 3 == 0, "mha: qkv must be [n,3D]");
  const int D = qv.cols() / 3;
  RS_CHECK(D % heads == 0, "mha: D=%d not divisible by heads=%d", D, heads);
  RS_CHECK(qv.rows() == groups * len, "mha: rows %d != groups*len %d", qv.rows(), groups * len);
  const int dh = D / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Tensor<T> out({qv.rows(), D});
  auto probs = std::make_shared<std::vector<T>>(
      static_cast<size_t>(groups) * heads * len * len, T(0));
  const T* qp = qv.ptr();
  parallel_for(groups, [&](int64_t g) {
    std::vector<T> srow(static_cast<size_t>(len));
    for (int h = 0; h < heads; ++h) {
      T* pg = probs->data() + ((g * heads) + h) * static_cast<int64_t>(len) * len;
      for (int i = 0; i < len; ++i) {
        const T* qi = qp + (g * len + i) * (3 * D) + h * dh;
        const int lim = causal ? i + 1 : len;
        for (int j = 0; j < lim; ++j) {
          const T* kj = qp + (g * len + j) * (3 * D) + D + h * dh;
          T s = 0;
          for (int d2 = 0; d2 < dh; ++d2) s += qi[d2] * kj[d2];
          srow[static_cast<size_t>(j)] = s * scale;
        }
        softmax_row(srow.data(), lim);
        T* pr = pg + static_cast<int64_t>(i) * len;
        for (int j = 0; j < lim; ++j) pr[j] = srow[static_cast<size_t>(j)];
        T* oi = out.ptr() + (g * len + i) * D + h * dh;
        std::memset(oi, 0, sizeof(T) * static_cast<size_t>(dh));
        for (int j = 0; j < lim; ++j) {
          const T* vj = qp + (g * len + j) * (3 * D) + 2 * D + h * dh;
          const T p = pr[j];
          for (int d2 = 0; d2 < dh; ++d2) oi[d2] += p * vj[d2];
        }
      }
    }
  });
  const int id = t.make(std::move(out), t.needs_grad(qkv));
  if (t.needs_grad(id))
    t.set_back(id, [id, qkv, groups, len, heads, dh, D, scale, causal, probs](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(id);
      const Tensor<T>& qv2 = tp.val(qkv);
      Tensor<T>& gq = tp.grad(qkv);
      const T* qp2 = qv2.ptr();
      parallel_for(groups, [&](int64_t gi) {
        std::vector<T> dp(static_cast<size_t>(len)), ds(static_cast<size_t>(len));
        for (int h = 0; h < heads; ++h) {
          const T* pg = probs->data() + ((gi * heads) + h) * static_cast<int64_t>(len) * len;
          for (int i = 0; i < len; ++i) {
            const int lim = causal ? i + 1 : len;
            const T* go = g.ptr() + (gi * len + i) * D + h * dh;
            const T* pr = pg + static_cast<int64_t>(i) * len;
            // dV and dp
            T pdot = 0;
            for (int j = 0; j < lim; ++j) {
              const T* vj = qp2 + (gi * len + j) * (3 * D) + 2 * D + h * dh;
              T d = 0;
              for (int d2 = 0; d2 < dh; ++d2) d += go[d2] * vj[d2];
              dp[static_cast<size_t>(j)] = d;
              pdot += pr[j] * d;
              T* gvj = gq.ptr() + (gi * len + j) * (3 * D) + 2 * D + h * dh;
              const T p = pr[j];
              for (int d2 = 0; d2 < dh; ++d2) gvj[d2] += p * go[d2];
            }
            for (int j = 0; j < lim; ++j)
              ds[static_cast<size_t>(j)] = pr[j] * (dp[static_cast<size_t>(j)] - pdot) * scale;
            const T* qi = qp2 + (gi * len + i) * (3 * D) + h * dh;
            T* gqi = gq.ptr() + (gi * len + i) * (3 * D) + h * dh;
            for (int j = 0; j < lim; ++j) {
              const T* kj = qp2 + (gi * len + j) * (3 * D) + D + h * dh;
              T* gkj = gq.ptr() + (gi * len + j) * (3 * D) + D + h * dh;
              const T dsj = ds[static_cast<size_t>(j)];
              for (int d2 = 0; d2 < dh; ++d2) {
                gqi[d2] += dsj * kj[d2];
                gkj[d2] += dsj * qi[d2];
              }
            }
          }
        }
      });
    });
  return id;
}

// ---------------------------------------------------------------------------
// Gather / reductions / losses.
// ---------------------------------------------------------------------------

template <class T>
int op_gather_rows(Tape<T>& t, int x, std::vector<int> rows, bool stop_grad = false) {
  const Tensor<T>& xv = t.val(x);
  const int d = xv.cols();
  const int n = static_cast<int>(rows.size());
  Tensor<T> out({n, d});
  for (int i = 0; i < n; ++i) {
    RS_CHECK(rows[static_cast<size_t>(i)] >= 0 && rows[static_cast<size_t>(i)] < xv.rows(),
             "gather_rows: row %d out of range", rows[static_cast<size_t>(i)]);
    std::memcpy(out.ptr() + static_cast<int64_t>(i) * d,
                xv.ptr() + static_cast<int64_t>(rows[static_cast<size_t>(i)]) * d,
                sizeof(T) * static_cast<size_t>(d));
  }
  const bool ng = t.needs_grad(x) && !stop_grad;
  const int id = t.make(std::move(out), ng);
  if (ng)
    t.set_back(id, [id, x, rows = std::move(rows), d](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(id);
      Tensor<T>& gx = tp.grad(x);
      for (size_t i = 0; i < rows.size(); ++i) {
        const T* gr = g.ptr() + static_cast<int64_t>(i) * d;
        T* xr = gx.ptr() + static_cast<int64_t>(rows[i]) * d;
        for (int j = 0; j < d; ++j) xr[j] += gr[j];
      }
    });
  return id;
}

// Same buffer, new shape (copied; tapes free buffers during backward).
template <class T>
int op_reshape(Tape<T>& t, int x, std::vector<int> shape) {
  const Tensor<T>& xv = t.val(x);
  RS_CHECK(Tensor<T>::count(shape) == xv.numel(), "reshape: %s -> %s changes numel",
           shape_str(xv.shape).c_str(), shape_str(shape).c_str());
  Tensor<T> out(std::move(shape), xv.data);
  const int id = t.make(std::move(out), t.needs_grad(x));
  if (t.needs_grad(id))
    t.set_back(id, [id, x](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(id);
      Tensor<T>& gx = tp.grad(x);
      for (int64_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i];
    });
  return id;
}

// c * sum(x), scalar.
template <class T>
int op_sum_scale(Tape<T>& t, int x, T c) {
  const Tensor<T>& xv = t.val(x);
  T acc = 0;
  for (int64_t i = 0; i < xv.numel(); ++i) acc += xv.data[i];
  const int id = t.make(Tensor<T>({1}, acc * c), t.needs_grad(x));
  if (t.needs_grad(id))
    t.set_back(id, [id, x, c](Tape<T>& tp) {
      const T k = c * tp.grad(id).at(0);
      Tensor<T>& gx = tp.grad(x);
      for (int64_t i = 0; i < gx.numel(); ++i) gx.data[i] += k;
    });
  return id;
}

// c * sum(x^2), scalar.
template <class T>
int op_sum_sq_scale(Tape<T>& t, int x, T c) {
  const Tensor<T>& xv = t.val(x);
  T acc = 0;
  for (int64_t i = 0; i < xv.numel(); ++i) acc += xv.data[i] * xv.data[i];
  const int id = t.make(Tensor<T>({1}, acc * c), t.needs_grad(x));
  if (t.needs_grad(id))
    t.set_back(id, [id, x, c](Tape<T>& tp) {
      const T go = tp.grad(id).at(0);
      const Tensor<T>& xv2 = tp.val(x);
      Tensor<T>& gx = tp.grad(x);
      const T k = T(2) * c * go;
      for (int64_t i = 0; i < xv2.numel(); ++i) gx.data[i] += k * xv2.data[i];
    });
  return id;
}

// scale * sum_i w_i * (logsumexp(l_i) - l_i[target_i]); weights empty = all 1.
template <class T>
int op_softmax_xent(Tape<T>& t, int logits, std::vector<int> targets,
                    std::vector<T> weights, T scale) {
  const Tensor<T>& lv = t.val(logits);
  RS_CHECK(lv.ndim() == 2, "softmax_xent: logits must be 2-D");
  const int n = lv.rows(), V = lv.cols();
  RS_CHECK(static_cast<int>(targets.size()) == n, "softmax_xent: %zu targets for %d rows",
           targets.size(), n);
  RS_CHECK(weights.empty() || static_cast<int>(weights.size()) == n,
           "softmax_xent: weight count mismatch");
  auto lse = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
  T acc = 0;
  for (int i = 0; i < n; ++i) {
    const int ti = targets[static_cast<size_t>(i)];
    RS_CHECK(ti >= 0 && ti < V, "softmax_xent: target %d out of range [0,%d)", ti, V);
    const T* row = lv.ptr() + static_cast<int64_t>(i) * V;
    T mx = row[0];
    for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    T s = 0;
    for (int j = 0; j < V; ++j) s += std::exp(row[j] - mx);
    const T l = mx + std::log(s);
    (*lse)[static_cast<size_t>(i)] = l;
    const T ce = l - row[ti];
    acc += weights.empty() ? ce : weights[static_cast<size_t>(i)] * ce;
  }
  const int id = t.make(Tensor<T>({1}, acc * scale), t.needs_grad(logits));
  if (t.needs_grad(id))
    t.set_back(id, [id, logits, targets = std::move(targets), weights = std::move(weights),
                    scale, lse, n, V](Tape<T>& tp) {
      const T go = tp.grad(id).at(0) * scale;
      const Tensor<T>& lv2 = tp.val(logits);
      Tensor<T>& gl = tp.grad(logits);
      parallel_for(n, [&](int64_t i) {
        const T w = weights.empty() ? T(1) : weights[static_cast<size_t>(i)];
        const T* row = lv2.ptr() + i * V;
        T* gr = gl.ptr() + i * V;
        const T l = (*lse)[static_cast<size_t>(i)];
        const T k = go * w;
        for (int j = 0; j < V; ++j) gr[j] += k * std::exp(row[j] - l);
        gr[targets[static_cast<size_t>(i)]] -= k;
      });
    });
  return id;
}

// sum_i coeff_i * scalar_i.
template <class T>
int op_combine_scalars(Tape<T>& t, const std::vector<int>& ids, const std::vector<T>& coeffs) {
  RS_CHECK(ids.size() == coeffs.size() && !ids.empty(), "combine_scalars: arity mismatch");
  T acc = 0;
  bool ng = false;
  for (size_t i = 0; i < ids.size(); ++i) {
    RS_CHECK(t.val(ids[i]).numel() == 1, "combine_scalars: inputs must be scalar");
    acc += coeffs[i] * t.val(ids[i]).at(0);
    ng = ng || t.needs_grad(ids[i]);
  }
  const int id = t.make(Tensor<T>({1}, acc), ng);
  if (ng)
    t.set_back(id, [id, ids, coeffs](Tape<T>& tp) {
      const T go = tp.grad(id).at(0);
      for (size_t i = 0; i < ids.size(); ++i)
        if (tp.needs_grad(ids[static_cast<size_t>(i)]))
          tp.grad(ids[static_cast<size_t>(i)]).at(0) += coeffs[i] * go;
    });
  return id;
}

// ---------------------------------------------------------------------------
// Convolution ops (channels-last activations: {B, H, W, C}).
// ---------------------------------------------------------------------------

struct ConvGeom {
  int B, H, W, Cin, Cout, k, stride, pad;
  bool clamp_pad = false;  // replicate border instead of zeros
  int out_h() const { return (H + 2 * pad - k) / stride + 1; }
  int out_w() const { return (W + 2 * pad - k) / stride + 1; }
  int cols() const { return Cin * k * k; }
};

namespace detail {
inline int clamp_idx(int v, int n) { return v < 0 ? 0 : (v >= n ? n - 1 : v); }

template <class T>
void im2col(const T* x, T* col, const ConvGeom& g, int b) {
  const int Ho = g.out_h(), Wo = g.out_w(), K = g.cols();
  const T* xb = x + static_cast<int64_t>(b) * g.H * g.W * g.Cin;
  for (int oy = 0; oy < Ho; ++oy) {
    for (int ox = 0; ox < Wo; ++ox) {
      T* row = col + (static_cast<int64_t>(oy) * Wo + ox) * K;
      int c = 0;
      for (int ky = 0; ky < g.k; ++ky) {
        int iy = oy * g.stride - g.pad + ky;
        for (int kx = 0; kx < g.k; ++kx) {
          int ix = ox * g.stride - g.pad + kx;
          if (g.clamp_pad) {
            std::memcpy(row + c,
                        xb + (static_cast<int64_t>(clamp_idx(iy, g.H)) * g.W + clamp_idx(ix, g.W)) * g.Cin,
                        sizeof(T) * static_cast<size_t>(g.Cin));
          } else if (iy >= 0 && iy < g.H && ix >= 0 && ix < g.W) {
            std::memcpy(row + c, xb + (static_cast<int64_t>(iy) * g.W + ix) * g.Cin,
                        sizeof(T) * static_cast<size_t>(g.Cin));
          } else {
            std::memset(row + c, 0, sizeof(T) * static_cast<size_t>(g.Cin));
          }
          c += g.Cin;
        }
      }
    }
  }
}

template <class T>
void col2im_acc(const T* col, T* gx, const ConvGeom& g, int b) {
  const int Ho = g.out_h(), Wo = g.out_w();
  T* xb = gx + static_cast<int64_t>(b) * g.H * g.W * g.Cin;
  for (int oy = 0; oy < Ho; ++oy) {
    for (int ox = 0; ox < Wo; ++ox) {
      const T* row = col + (static_cast<int64_t>(oy) * Wo + ox) * g.cols();
      int c = 0;
      for (int ky = 0; ky < g.k; ++ky) {
        int iy = oy * g.stride - g.pad + ky;
        for (int kx = 0; kx < g.k; ++kx) {
          int ix = ox * g.stride - g.pad + kx;
          if (g.clamp_pad) {
            iy = clamp_idx(iy, g.H);
            ix = clamp_idx(ix, g.W);
          }
          if (iy >= 0 && iy < g.H && ix >= 0 && ix < g.W) {
            T* dst = xb + (static_cast<int64_t>(iy) * g.W + ix) * g.Cin;
            for (int ci = 0; ci < g.Cin; ++ci) dst[ci] += row[c + ci];
          }
          c += g.Cin;
        }
      }
    }
  }
}
}  // namespace detail

// x {B,H,W,Cin} conv weight Wt [Cin*k*k, Cout] + bias[Cout] -> {B,Ho,Wo,Cout}.
template <class T>
int op_conv2d(Tape<T>& t, int x, int Wt, int bias, ConvGeom g) {
  const Tensor<T>& xv = t.val(x);
  RS_CHECK(xv.numel() == static_cast<int64_t>(g.B) * g.H * g.W * g.Cin,
           "conv2d: input numel mismatch");
  RS_CHECK(t.val(Wt).rows() == g.cols() && t.val(Wt).cols() == g.Cout,
           "conv2d: weight shape mismatch");
  const int Ho = g.out_h(), Wo = g.out_w(), K = g.cols();
  Tensor<T> out({g.B, Ho, Wo, g.Cout});
  const Tensor<T>& wv = t.val(Wt);
  const Tensor<T>& bv = t.val(bias);
  std::vector<T> col(static_cast<size_t>(Ho) * Wo * K);
  for (int b = 0; b < g.B; ++b) {
    detail::im2col(xv.ptr(), col.data(), g, b);
    matmul(col.data(), wv.ptr(), out.ptr() + static_cast<int64_t>(b) * Ho * Wo * g.Cout,
           Ho * Wo, K, g.Cout);
  }
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += bv.data[static_cast<size_t>(i % g.Cout)];
  const bool ng = t.needs_grad(x) || t.needs_grad(Wt) || t.needs_grad(bias);
  const int id = t.make(std::move(out), ng);
  if (ng)
    t.set_back(id, [id, x, Wt, bias, g, Ho, Wo, K](Tape<T>& tp) {
      const Tensor<T>& gout = tp.grad(id);
      const int rows = Ho * Wo;
      std::vector<T> col(static_cast<size_t>(rows) * K);
      std::vector<T> gcol(static_cast<size_t>(rows) * K);
      for (int b = 0; b < g.B; ++b) {
        const T* go_b = gout.ptr() + static_cast<int64_t>(b) * rows * g.Cout;
        if (tp.needs_grad(Wt)) {
          detail::im2col(tp.val(x).ptr(), col.data(), g, b);
          Tensor<T> gw({K, g.Cout});
          matmul_tn(col.data(), go_b, gw.ptr(), rows, K, g.Cout);
          Tensor<T>& acc = tp.grad(Wt);
          for (int64_t i = 0; i < gw.numel(); ++i) acc.data[i] += gw.data[i];
        }
        if (tp.needs_grad(x)) {
          matmul_nt(go_b, tp.val(Wt).ptr(), gcol.data(), rows, g.Cout, K);
          detail::col2im_acc(gcol.data(), tp.grad(x).ptr(), g, b);
        }
      }
      if (tp.needs_grad(bias)) {
        Tensor<T>& gb = tp.grad(bias);
        for (int64_t i = 0; i < gout.numel(); ++i)
          gb.data[static_cast<size_t>(i % g.Cout)] += gout.data[i];
      }
    });
  return id;
}

// Nearest-neighbor 2x upsample, {B,H,W,C} -> {B,2H,2W,C}.
template <class T>
int op_upsample2x(Tape<T>& t, int x, int B, int H, int W, int C) {
  const Tensor<T>& xv = t.val(x);
  RS_CHECK(xv.numel() == static_cast<int64_t>(B) * H * W * C, "upsample2x: numel mismatch");
  Tensor<T> out({B, 2 * H, 2 * W, C});
  for (int b = 0; b < B; ++b)
    for (int y = 0; y < 2 * H; ++y)
      for (int xx = 0; xx < 2 * W; ++xx)
        std::memcpy(out.ptr() + ((static_cast<int64_t>(b) * 2 * H + y) * 2 * W + xx) * C,
                    xv.ptr() + ((static_cast<int64_t>(b) * H + y / 2) * W + xx / 2) * C,
                    sizeof(T) * static_cast<size_t>(C));
  const int id = t.make(std::move(out), t.needs_grad(x));
  if (t.needs_grad(id))
    t.set_back(id, [id, x, B, H, W, C](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(id);
      Tensor<T>& gx = tp.grad(x);
      for (int b = 0; b < B; ++b)
        for (int y = 0; y < 2 * H; ++y)
          for (int xx = 0; xx < 2 * W; ++xx) {
            const T* gr = g.ptr() + ((static_cast<int64_t>(b) * 2 * H + y) * 2 * W + xx) * C;
            T* xr = gx.ptr() + ((static_cast<int64_t>(b) * H + y / 2) * W + xx / 2) * C;
            for (int c = 0; c < C; ++c) xr[c] += gr[c];
          }
    });
  return id;
}

// Vector quantization with straight-through gradients: forward snaps each row
// of pre[n,Dc] to its nearest codebook row (L2, ties -> lowest index); the
// backward pass copies gradients to pre unchanged. Assigned indices are
// written to *indices_out.
template <class T>
int op_st_quantize(Tape<T>& t, int pre, const Tensor<T>& codebook, std::vector<int>* indices_out) {
  const Tensor<T>& pv = t.val(pre);
  const int n = pv.rows(), d = pv.cols();
  RS_CHECK(codebook.cols() == d, "st_quantize: code dim mismatch %d vs %d", codebook.cols(), d);
  const int V = codebook.rows();
  Tensor<T> out({n, d});
  indices_out->resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const T* row = pv.ptr() + static_cast<int64_t>(i) * d;
    int best = 0;
    T best_d = std::numeric_limits<T>::max();
    for (int j = 0; j < V; ++j) {
      const T* cj = codebook.ptr() + static_cast<int64_t>(j) * d;
      T dist = 0;
      for (int c = 0; c < d; ++c) dist += (row[c] - cj[c]) * (row[c] - cj[c]);
      if (dist < best_d) {  // strict: ties keep the lowest index
        best_d = dist;
        best = j;
      }
    }
    (*indices_out)[static_cast<size_t>(i)] = best;
    std::memcpy(out.ptr() + static_cast<int64_t>(i) * d,
                codebook.ptr() + static_cast<int64_t>(best) * d, sizeof(T) * static_cast<size_t>(d));
  }
  const int id = t.make(std::move(out), t.needs_grad(pre));
  if (t.needs_grad(id))
    t.set_back(id, [id, pre](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(id);
      Tensor<T>& gp = tp.grad(pre);
      for (int64_t i = 0; i < g.numel(); ++i) gp.data[i] += g.data[i];
    });
  return id;
}

}  // namespace rs
