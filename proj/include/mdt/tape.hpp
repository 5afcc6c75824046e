#pragma once

// Reverse-mode autodiff over channel-stacked image grids. Nodes are created in
// topological order on a per-sample Graph; backward() walks the tape in
// reverse. Masks and index selections (min/median/trim/auto-mask) are frozen
// at forward time, so gradients are the almost-everywhere derivatives.

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <numeric>
#include <utility>
#include <vector>

#include "mdt/common.hpp"

namespace mdt {

class Graph;

struct Var {
  Graph* g = nullptr;
  int id = -1;
  bool valid() const { return g != nullptr && id >= 0; }
};

class Graph {
 public:
  Var constant(Tensor v) { return push(std::move(v), false); }
  Var constant(const Grid& g) { return push(Tensor(g), false); }
  Var constant_scalar(double v) { return push(Tensor::scalar(v), false); }
  Var leaf(Tensor v) { return push(std::move(v), true); }
  Var leaf(const Grid& g) { return push(Tensor(g), true); }

  const Tensor& val(Var v) const { return nodes_[v.id].val; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  /// Gradient of the last backward()'d scalar w.r.t. v. Zero tensor if the
  /// node never received a contribution.
  const Tensor& grad(Var v) {
    Node& n = nodes_[v.id];
    ensure_grad(n);
    return n.grad;
  }

  void backward(Var loss) {
    require(loss.g == this, "backward: var from another graph");
    const Tensor& lv = nodes_[loss.id].val;
    require(lv.is_scalar(), "backward: loss must be scalar");
    ensure_grad(nodes_[loss.id]);
    nodes_[loss.id].grad.ch[0](0, 0) += 1.0;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.needs_grad && n.back && n.grad_alloc) n.back(*this, n.grad);
    }
  }

  // --- used by op implementations ---

  Var make(Tensor v, std::vector<Var> parents,
           std::function<void(Graph&, const Tensor&)> back) {
    bool ng = false;
    for (const Var& p : parents) ng = ng || nodes_[p.id].needs_grad;
    Var out = push(std::move(v), ng);
    if (ng) nodes_[out.id].back = std::move(back);
    return out;
  }

  void accumulate(Var v, const Tensor& g) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    ensure_grad(n);
    for (int c = 0; c < n.val.channels(); ++c) n.grad.ch[c] += g.ch[c];
  }
  void accumulate_at(Var v, int c, int r, int col, double g) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    ensure_grad(n);
    n.grad.ch[c](r, col) += g;
  }
  // Accumulate into a single channel.
  void accumulate_ch(Var v, int c, const Grid& g) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    ensure_grad(n);
    n.grad.ch[c] += g;
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor val;
    Tensor grad;
    bool grad_alloc = false;
    bool needs_grad = false;
    std::function<void(Graph&, const Tensor&)> back;
  };

  Var push(Tensor v, bool needs_grad) {
    Node n;
    n.val = std::move(v);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  void ensure_grad(Node& n) {
    if (!n.grad_alloc) {
      n.grad = Tensor::zeros(n.val.channels(), n.val.rows(), n.val.cols());
      n.grad_alloc = true;
    }
  }

  // deque: push_back must not invalidate val()/grad() references held by op
  // builders while they append nodes
  std::deque<Node> nodes_;
};

namespace detail {

inline void check_same_graph(Var a, Var b) {
  require(a.g == b.g, "ops require vars on the same graph");
}

// Shapes must match elementwise, or one side is a 1x1x1 scalar broadcast.
enum class BcastKind { kSame, kLeftScalar, kRightScalar };

inline BcastKind bcast_kind(const Tensor& a, const Tensor& b) {
  if (a.same_shape(b)) return BcastKind::kSame;
  if (a.is_scalar()) return BcastKind::kLeftScalar;
  if (b.is_scalar()) return BcastKind::kRightScalar;
  throw std::logic_error("tensor shape mismatch without scalar broadcast");
}

inline double tsum(const Tensor& t) {
  double s = 0;
  for (const Grid& g : t.ch) s += g.sum();
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (with 1x1x1 scalar broadcasting)
// ---------------------------------------------------------------------------

inline Var operator+(Var a, Var b) {
  detail::check_same_graph(a, b);
  Graph& g = *a.g;
  const Tensor& av = g.val(a);
  const Tensor& bv = g.val(b);
  auto kind = detail::bcast_kind(av, bv);
  Tensor out;
  switch (kind) {
    case detail::BcastKind::kSame: {
      out = av;
      for (int c = 0; c < out.channels(); ++c) out.ch[c] += bv.ch[c];
      break;
    }
    case detail::BcastKind::kLeftScalar: {
      out = bv;
      for (Grid& p : out.ch) p += av.scalar_value();
      break;
    }
    case detail::BcastKind::kRightScalar: {
      out = av;
      for (Grid& p : out.ch) p += bv.scalar_value();
      break;
    }
  }
  return g.make(std::move(out), {a, b}, [a, b, kind](Graph& gg, const Tensor& go) {
    if (kind == detail::BcastKind::kLeftScalar)
      gg.accumulate_at(a, 0, 0, 0, detail::tsum(go));
    else
      gg.accumulate(a, go);
    if (kind == detail::BcastKind::kRightScalar)
      gg.accumulate_at(b, 0, 0, 0, detail::tsum(go));
    else
      gg.accumulate(b, go);
  });
}

inline Var operator-(Var a, Var b) {
  detail::check_same_graph(a, b);
  Graph& g = *a.g;
  const Tensor& av = g.val(a);
  const Tensor& bv = g.val(b);
  auto kind = detail::bcast_kind(av, bv);
  Tensor out;
  switch (kind) {
    case detail::BcastKind::kSame: {
      out = av;
      for (int c = 0; c < out.channels(); ++c) out.ch[c] -= bv.ch[c];
      break;
    }
    case detail::BcastKind::kLeftScalar: {
      out = bv;
      for (Grid& p : out.ch) p = av.scalar_value() - p;
      break;
    }
    case detail::BcastKind::kRightScalar: {
      out = av;
      for (Grid& p : out.ch) p -= bv.scalar_value();
      break;
    }
  }
  return g.make(std::move(out), {a, b}, [a, b, kind](Graph& gg, const Tensor& go) {
    if (kind == detail::BcastKind::kLeftScalar)
      gg.accumulate_at(a, 0, 0, 0, detail::tsum(go));
    else
      gg.accumulate(a, go);
    if (kind == detail::BcastKind::kRightScalar) {
      gg.accumulate_at(b, 0, 0, 0, -detail::tsum(go));
    } else {
      Tensor neg = go;
      for (Grid& p : neg.ch) p = -p;
      gg.accumulate(b, neg);
    }
  });
}

inline Var operator*(Var a, Var b) {
  detail::check_same_graph(a, b);
  Graph& g = *a.g;
  const Tensor& av = g.val(a);
  const Tensor& bv = g.val(b);
  auto kind = detail::bcast_kind(av, bv);
  Tensor out;
  switch (kind) {
    case detail::BcastKind::kSame: {
      out = av;
      for (int c = 0; c < out.channels(); ++c) out.ch[c] *= bv.ch[c];
      break;
    }
    case detail::BcastKind::kLeftScalar: {
      out = bv;
      for (Grid& p : out.ch) p *= av.scalar_value();
      break;
    }
    case detail::BcastKind::kRightScalar: {
      out = av;
      for (Grid& p : out.ch) p *= bv.scalar_value();
      break;
    }
  }
  return g.make(std::move(out), {a, b}, [a, b, kind](Graph& gg, const Tensor& go) {
    const Tensor& avv = gg.val(a);
    const Tensor& bvv = gg.val(b);
    switch (kind) {
      case detail::BcastKind::kSame: {
        if (gg.needs_grad(a)) {
          Tensor da = go;
          for (int c = 0; c < da.channels(); ++c) da.ch[c] *= bvv.ch[c];
          gg.accumulate(a, da);
        }
        if (gg.needs_grad(b)) {
          Tensor db = go;
          for (int c = 0; c < db.channels(); ++c) db.ch[c] *= avv.ch[c];
          gg.accumulate(b, db);
        }
        break;
      }
      case detail::BcastKind::kLeftScalar: {
        if (gg.needs_grad(a)) {
          double s = 0;
          for (int c = 0; c < go.channels(); ++c) s += (go.ch[c] * bvv.ch[c]).sum();
          gg.accumulate_at(a, 0, 0, 0, s);
        }
        if (gg.needs_grad(b)) {
          Tensor db = go;
          for (Grid& p : db.ch) p *= avv.scalar_value();
          gg.accumulate(b, db);
        }
        break;
      }
      case detail::BcastKind::kRightScalar: {
        if (gg.needs_grad(a)) {
          Tensor da = go;
          for (Grid& p : da.ch) p *= bvv.scalar_value();
          gg.accumulate(a, da);
        }
        if (gg.needs_grad(b)) {
          double s = 0;
          for (int c = 0; c < go.channels(); ++c) s += (go.ch[c] * avv.ch[c]).sum();
          gg.accumulate_at(b, 0, 0, 0, s);
        }
        break;
      }
    }
  });
}

inline Var operator/(Var a, Var b) {
  detail::check_same_graph(a, b);
  Graph& g = *a.g;
  const Tensor& av = g.val(a);
  const Tensor& bv = g.val(b);
  auto kind = detail::bcast_kind(av, bv);
  Tensor out;
  switch (kind) {
    case detail::BcastKind::kSame: {
      out = av;
      for (int c = 0; c < out.channels(); ++c) out.ch[c] /= bv.ch[c];
      break;
    }
    case detail::BcastKind::kLeftScalar: {
      out = bv;
      for (Grid& p : out.ch) p = av.scalar_value() / p;
      break;
    }
    case detail::BcastKind::kRightScalar: {
      out = av;
      for (Grid& p : out.ch) p /= bv.scalar_value();
      break;
    }
  }
  return g.make(std::move(out), {a, b}, [a, b, kind](Graph& gg, const Tensor& go) {
    const Tensor& avv = gg.val(a);
    const Tensor& bvv = gg.val(b);
    switch (kind) {
      case detail::BcastKind::kSame: {
        if (gg.needs_grad(a)) {
          Tensor da = go;
          for (int c = 0; c < da.channels(); ++c) da.ch[c] /= bvv.ch[c];
          gg.accumulate(a, da);
        }
        if (gg.needs_grad(b)) {
          Tensor db = go;
          for (int c = 0; c < db.channels(); ++c)
            db.ch[c] = -go.ch[c] * avv.ch[c] / (bvv.ch[c] * bvv.ch[c]);
          gg.accumulate(b, db);
        }
        break;
      }
      case detail::BcastKind::kLeftScalar: {
        if (gg.needs_grad(a)) {
          double s = 0;
          for (int c = 0; c < go.channels(); ++c) s += (go.ch[c] / bvv.ch[c]).sum();
          gg.accumulate_at(a, 0, 0, 0, s);
        }
        if (gg.needs_grad(b)) {
          Tensor db = go;
          for (int c = 0; c < db.channels(); ++c)
            db.ch[c] = -go.ch[c] * avv.scalar_value() / (bvv.ch[c] * bvv.ch[c]);
          gg.accumulate(b, db);
        }
        break;
      }
      case detail::BcastKind::kRightScalar: {
        const double bs = bvv.scalar_value();
        if (gg.needs_grad(a)) {
          Tensor da = go;
          for (Grid& p : da.ch) p /= bs;
          gg.accumulate(a, da);
        }
        if (gg.needs_grad(b)) {
          double s = 0;
          for (int c = 0; c < go.channels(); ++c) s += (go.ch[c] * avv.ch[c]).sum();
          gg.accumulate_at(b, 0, 0, 0, -s / (bs * bs));
        }
        break;
      }
    }
  });
}

inline Var operator+(Var a, double s) { return a + a.g->constant_scalar(s); }
inline Var operator+(double s, Var a) { return a + s; }
inline Var operator-(Var a, double s) { return a - a.g->constant_scalar(s); }
inline Var operator-(double s, Var a) { return a.g->constant_scalar(s) - a; }
inline Var operator*(Var a, double s) { return a * a.g->constant_scalar(s); }
inline Var operator*(double s, Var a) { return a * s; }
inline Var operator/(Var a, double s) { return a / a.g->constant_scalar(s); }
inline Var operator/(double s, Var a) { return a.g->constant_scalar(s) / a; }
inline Var operator-(Var a) { return a * -1.0; }

// ---------------------------------------------------------------------------
// Elementwise functions
// ---------------------------------------------------------------------------

inline Var vabs(Var a) {
  Graph& g = *a.g;
  Tensor out = g.val(a);
  for (Grid& p : out.ch) p = p.abs();
  return g.make(std::move(out), {a}, [a](Graph& gg, const Tensor& go) {
    const Tensor& av = gg.val(a);
    Tensor da = go;
    for (int c = 0; c < da.channels(); ++c)
      da.ch[c] *= av.ch[c].sign();
    gg.accumulate(a, da);
  });
}

inline Var vexp(Var a) {
  Graph& g = *a.g;
  Tensor out = g.val(a);
  for (Grid& p : out.ch) p = p.exp();
  Tensor saved = out;
  return g.make(std::move(out), {a}, [a, saved](Graph& gg, const Tensor& go) {
    Tensor da = go;
    for (int c = 0; c < da.channels(); ++c) da.ch[c] *= saved.ch[c];
    gg.accumulate(a, da);
  });
}

inline Var sigmoid(Var a) {
  Graph& g = *a.g;
  Tensor out = g.val(a);
  for (Grid& p : out.ch) p = 1.0 / (1.0 + (-p).exp());
  Tensor saved = out;
  return g.make(std::move(out), {a}, [a, saved](Graph& gg, const Tensor& go) {
    Tensor da = go;
    for (int c = 0; c < da.channels(); ++c)
      da.ch[c] *= saved.ch[c] * (1.0 - saved.ch[c]);
    gg.accumulate(a, da);
  });
}

inline Var elu(Var a) {
  Graph& g = *a.g;
  Tensor out = g.val(a);
  for (Grid& p : out.ch) p = (p > 0.0).select(p, p.exp() - 1.0);
  Tensor saved = out;
  return g.make(std::move(out), {a}, [a, saved](Graph& gg, const Tensor& go) {
    const Tensor& av = gg.val(a);
    Tensor da = go;
    for (int c = 0; c < da.channels(); ++c)
      da.ch[c] *= (av.ch[c] > 0.0).select(Grid::Ones(av.rows(), av.cols()),
                                          saved.ch[c] + 1.0);
    gg.accumulate(a, da);
  });
}

/// max(a, c): gradient passes only where a > c.
inline Var clamp_min(Var a, double c) {
  Graph& g = *a.g;
  const Tensor& av = g.val(a);
  Tensor out = av;
  for (Grid& p : out.ch) p = p.max(c);
  return g.make(std::move(out), {a}, [a, c](Graph& gg, const Tensor& go) {
    const Tensor& av2 = gg.val(a);
    Tensor da = go;
    for (int cch = 0; cch < da.channels(); ++cch)
      da.ch[cch] *= (av2.ch[cch] > c).cast<double>();
    gg.accumulate(a, da);
  });
}

/// Elementwise min of two same-shape tensors; ties route gradient to a.
inline Var vmin(Var a, Var b) {
  detail::check_same_graph(a, b);
  Graph& g = *a.g;
  const Tensor& av = g.val(a);
  const Tensor& bv = g.val(b);
  require(av.same_shape(bv), "vmin: shape mismatch");
  Tensor out = av;
  for (int c = 0; c < out.channels(); ++c) out.ch[c] = av.ch[c].min(bv.ch[c]);
  return g.make(std::move(out), {a, b}, [a, b](Graph& gg, const Tensor& go) {
    const Tensor& av2 = gg.val(a);
    const Tensor& bv2 = gg.val(b);
    for (int c = 0; c < go.channels(); ++c) {
      Grid sel = (av2.ch[c] <= bv2.ch[c]).cast<double>();
      if (gg.needs_grad(a)) gg.accumulate_ch(a, c, go.ch[c] * sel);
      if (gg.needs_grad(b)) gg.accumulate_ch(b, c, go.ch[c] * (1.0 - sel));
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var vsum(Var a) {
  Graph& g = *a.g;
  return g.make(Tensor::scalar(detail::tsum(g.val(a))), {a},
                [a](Graph& gg, const Tensor& go) {
                  const double s = go.scalar_value();
                  const Tensor& av = gg.val(a);
                  Tensor da = Tensor::full(av.channels(), av.rows(), av.cols(), s);
                  gg.accumulate(a, da);
                });
}

inline Var vmean(Var a) {
  const double n = static_cast<double>(a.g->val(a).size());
  return vsum(a) / n;
}

namespace detail {
struct ScanPos {
  int c, r, col;
};
inline ScanPos argext(const Tensor& t, bool want_min) {
  ScanPos best{0, 0, 0};
  double bv = t.ch[0](0, 0);
  for (int c = 0; c < t.channels(); ++c)
    for (int col = 0; col < t.cols(); ++col)
      for (int r = 0; r < t.rows(); ++r) {
        const double v = t.ch[c](r, col);
        if (want_min ? (v < bv) : (v > bv)) {
          bv = v;
          best = {c, r, col};
        }
      }
  return best;
}
}  // namespace detail

inline Var reduce_min(Var a) {
  Graph& g = *a.g;
  auto pos = detail::argext(g.val(a), true);
  const double v = g.val(a).ch[pos.c](pos.r, pos.col);
  return g.make(Tensor::scalar(v), {a}, [a, pos](Graph& gg, const Tensor& go) {
    gg.accumulate_at(a, pos.c, pos.r, pos.col, go.scalar_value());
  });
}

inline Var reduce_max(Var a) {
  Graph& g = *a.g;
  auto pos = detail::argext(g.val(a), false);
  const double v = g.val(a).ch[pos.c](pos.r, pos.col);
  return g.make(Tensor::scalar(v), {a}, [a, pos](Graph& gg, const Tensor& go) {
    gg.accumulate_at(a, pos.c, pos.r, pos.col, go.scalar_value());
  });
}

/// Median across all entries; even counts average the two central order
/// statistics (gradient 0.5 to each).
inline Var median_scalar(Var a) {
  Graph& g = *a.g;
  const Tensor& t = g.val(a);
  const std::int64_t n = t.size();
  require(n > 0, "median of empty tensor");
  std::vector<std::pair<double, std::int64_t>> v;
  v.reserve(n);
  const int rows = t.rows(), cols = t.cols();
  for (int c = 0; c < t.channels(); ++c)
    for (int col = 0; col < cols; ++col)
      for (int r = 0; r < rows; ++r)
        v.emplace_back(t.ch[c](r, col),
                       (static_cast<std::int64_t>(c) * cols + col) * rows + r);
  auto decode = [rows, cols](std::int64_t lin) {
    detail::ScanPos p;
    p.r = static_cast<int>(lin % rows);
    lin /= rows;
    p.col = static_cast<int>(lin % cols);
    p.c = static_cast<int>(lin / cols);
    return p;
  };
  double med;
  std::vector<detail::ScanPos> sel;
  if (n % 2 == 1) {
    std::nth_element(v.begin(), v.begin() + n / 2, v.end());
    med = v[n / 2].first;
    sel.push_back(decode(v[n / 2].second));
  } else {
    std::nth_element(v.begin(), v.begin() + n / 2, v.end());
    const auto hi = v[n / 2];
    std::nth_element(v.begin(), v.begin() + n / 2 - 1, v.begin() + n / 2);
    const auto lo = v[n / 2 - 1];
    med = 0.5 * (lo.first + hi.first);
    sel.push_back(decode(lo.second));
    sel.push_back(decode(hi.second));
  }
  const double w = 1.0 / static_cast<double>(sel.size());
  return g.make(Tensor::scalar(med), {a}, [a, sel, w](Graph& gg, const Tensor& go) {
    for (const auto& p : sel)
      gg.accumulate_at(a, p.c, p.r, p.col, w * go.scalar_value());
  });
}

/// Sum of the `keep` smallest entries (ascending by value, stable by scan
/// order). Gradient 1 to kept entries, 0 to trimmed ones.
inline Var trimmed_sum(Var a, std::int64_t keep) {
  Graph& g = *a.g;
  const Tensor& t = g.val(a);
  const std::int64_t n = t.size();
  require(keep >= 0 && keep <= n, "trimmed_sum: keep out of range");
  std::vector<std::pair<double, std::int64_t>> v;
  v.reserve(n);
  const int rows = t.rows(), cols = t.cols();
  for (int c = 0; c < t.channels(); ++c)
    for (int col = 0; col < cols; ++col)
      for (int r = 0; r < rows; ++r)
        v.emplace_back(t.ch[c](r, col),
                       (static_cast<std::int64_t>(c) * cols + col) * rows + r);
  std::stable_sort(v.begin(), v.end(),
                   [](const auto& x, const auto& y) { return x.first < y.first; });
  double s = 0;
  std::vector<std::int64_t> kept(keep);
  for (std::int64_t i = 0; i < keep; ++i) {
    s += v[i].first;
    kept[i] = v[i].second;
  }
  return g.make(Tensor::scalar(s), {a},
                [a, kept, rows, cols](Graph& gg, const Tensor& go) {
                  const double gs = go.scalar_value();
                  for (std::int64_t lin : kept) {
                    const int r = static_cast<int>(lin % rows);
                    lin /= rows;
                    const int col = static_cast<int>(lin % cols);
                    const int c = static_cast<int>(lin / cols);
                    gg.accumulate_at(a, c, r, col, gs);
                  }
                });
}

// ---------------------------------------------------------------------------
// Shape / structure ops
// ---------------------------------------------------------------------------

inline Var concat_ch(Var a, Var b) {
  detail::check_same_graph(a, b);
  Graph& g = *a.g;
  const Tensor& av = g.val(a);
  const Tensor& bv = g.val(b);
  require(av.rows() == bv.rows() && av.cols() == bv.cols(),
          "concat_ch: spatial shape mismatch");
  Tensor out = av;
  out.ch.insert(out.ch.end(), bv.ch.begin(), bv.ch.end());
  const int ca = av.channels();
  return g.make(std::move(out), {a, b}, [a, b, ca](Graph& gg, const Tensor& go) {
    for (int c = 0; c < go.channels(); ++c) {
      if (c < ca)
        gg.accumulate_ch(a, c, go.ch[c]);
      else
        gg.accumulate_ch(b, c - ca, go.ch[c]);
    }
  });
}

inline Var avgpool2(Var a) {
  Graph& g = *a.g;
  const Tensor& av = g.val(a);
  require(av.rows() % 2 == 0 && av.cols() % 2 == 0, "avgpool2: odd size");
  const int h = av.rows() / 2, w = av.cols() / 2;
  Tensor out = Tensor::zeros(av.channels(), h, w);
  for (int c = 0; c < av.channels(); ++c)
    for (int x = 0; x < w; ++x)
      for (int y = 0; y < h; ++y)
        out.ch[c](y, x) = 0.25 * (av.ch[c](2 * y, 2 * x) + av.ch[c](2 * y + 1, 2 * x) +
                                  av.ch[c](2 * y, 2 * x + 1) + av.ch[c](2 * y + 1, 2 * x + 1));
  return g.make(std::move(out), {a}, [a](Graph& gg, const Tensor& go) {
    const int h = go.rows(), w = go.cols();
    Tensor da = Tensor::zeros(go.channels(), 2 * h, 2 * w);
    for (int c = 0; c < go.channels(); ++c)
      for (int x = 0; x < w; ++x)
        for (int y = 0; y < h; ++y) {
          const double v = 0.25 * go.ch[c](y, x);
          da.ch[c](2 * y, 2 * x) += v;
          da.ch[c](2 * y + 1, 2 * x) += v;
          da.ch[c](2 * y, 2 * x + 1) += v;
          da.ch[c](2 * y + 1, 2 * x + 1) += v;
        }
    gg.accumulate(a, da);
  });
}

namespace detail {
// align-corners sampling position for bilinear resize; exact on affine
// functions, identity when sizes match.
struct ResizeAxis {
  std::vector<int> i0;
  std::vector<double> f;
};
inline ResizeAxis resize_axis(int src, int dst) {
  ResizeAxis ax;
  ax.i0.resize(dst);
  ax.f.resize(dst);
  const double scale = dst > 1 ? static_cast<double>(src - 1) / (dst - 1) : 0.0;
  for (int i = 0; i < dst; ++i) {
    double s = i * scale;
    int i0 = static_cast<int>(std::floor(s));
    if (i0 >= src - 1) i0 = src > 1 ? src - 2 : 0;
    double f = s - i0;
    if (src == 1) f = 0.0;
    ax.i0[i] = i0;
    ax.f[i] = f;
  }
  return ax;
}
}  // namespace detail

inline Var resize_bilinear(Var a, int rows, int cols) {
  Graph& g = *a.g;
  const Tensor& av = g.val(a);
  if (rows == av.rows() && cols == av.cols()) return a;
  const auto ay = detail::resize_axis(av.rows(), rows);
  const auto ax = detail::resize_axis(av.cols(), cols);
  const int r1 = av.rows() > 1 ? 1 : 0;
  const int c1 = av.cols() > 1 ? 1 : 0;
  Tensor out = Tensor::zeros(av.channels(), rows, cols);
  for (int c = 0; c < av.channels(); ++c)
    for (int x = 0; x < cols; ++x) {
      const int x0 = ax.i0[x];
      const double fx = ax.f[x];
      for (int y = 0; y < rows; ++y) {
        const int y0 = ay.i0[y];
        const double fy = ay.f[y];
        const Grid& s = av.ch[c];
        out.ch[c](y, x) = (1 - fy) * ((1 - fx) * s(y0, x0) + fx * s(y0, x0 + c1)) +
                          fy * ((1 - fx) * s(y0 + r1, x0) + fx * s(y0 + r1, x0 + c1));
      }
    }
  return g.make(std::move(out), {a}, [a, ay, ax, r1, c1](Graph& gg, const Tensor& go) {
    const Tensor& av2 = gg.val(a);
    Tensor da = Tensor::zeros(av2.channels(), av2.rows(), av2.cols());
    for (int c = 0; c < go.channels(); ++c)
      for (int x = 0; x < go.cols(); ++x) {
        const int x0 = ax.i0[x];
        const double fx = ax.f[x];
        for (int y = 0; y < go.rows(); ++y) {
          const int y0 = ay.i0[y];
          const double fy = ay.f[y];
          const double v = go.ch[c](y, x);
          da.ch[c](y0, x0) += (1 - fy) * (1 - fx) * v;
          da.ch[c](y0, x0 + c1) += (1 - fy) * fx * v;
          da.ch[c](y0 + r1, x0) += fy * (1 - fx) * v;
          da.ch[c](y0 + r1, x0 + c1) += fy * fx * v;
        }
      }
    gg.accumulate(a, da);
  });
}

/// 3x3 correlation with zero padding. Weights: (co*ci) planes of 3x3 with
/// plane index oc*ci + ic; bias: co planes of 1x1.
inline Var conv3x3(Var x, Var w, Var b, int ci, int co) {
  detail::check_same_graph(x, w);
  detail::check_same_graph(x, b);
  Graph& g = *x.g;
  const Tensor& xv = g.val(x);
  const Tensor& wv = g.val(w);
  const Tensor& bv = g.val(b);
  require(xv.channels() == ci, "conv3x3: input channel mismatch");
  require(wv.channels() == co * ci && wv.rows() == 3 && wv.cols() == 3,
          "conv3x3: weight shape");
  require(bv.channels() == co && bv.rows() == 1 && bv.cols() == 1, "conv3x3: bias shape");
  const int H = xv.rows(), W = xv.cols();
  Tensor out = Tensor::zeros(co, H, W);
  for (int oc = 0; oc < co; ++oc) {
    Grid& o = out.ch[oc];
    o.setConstant(bv.ch[oc](0, 0));
    for (int ic = 0; ic < ci; ++ic) {
      const Grid& k = wv.ch[oc * ci + ic];
      const Grid& in = xv.ch[ic];
      for (int ky = -1; ky <= 1; ++ky)
        for (int kx = -1; kx <= 1; ++kx) {
          const double kw = k(ky + 1, kx + 1);
          if (kw == 0.0) continue;
          const int y0o = std::max(0, -ky), x0o = std::max(0, -kx);
          const int bh = H - std::abs(ky), bw = W - std::abs(kx);
          o.block(y0o, x0o, bh, bw) += kw * in.block(y0o + ky, x0o + kx, bh, bw);
        }
    }
  }
  return g.make(std::move(out), {x, w, b}, [x, w, b, ci, co](Graph& gg, const Tensor& go) {
    const Tensor& xv2 = gg.val(x);
    const Tensor& wv2 = gg.val(w);
    const int H = xv2.rows(), W = xv2.cols();
    if (gg.needs_grad(x)) {
      Tensor dx = Tensor::zeros(ci, H, W);
      for (int oc = 0; oc < co; ++oc)
        for (int ic = 0; ic < ci; ++ic) {
          const Grid& k = wv2.ch[oc * ci + ic];
          Grid& d = dx.ch[ic];
          for (int ky = -1; ky <= 1; ++ky)
            for (int kx = -1; kx <= 1; ++kx) {
              const double kw = k(ky + 1, kx + 1);
              if (kw == 0.0) continue;
              const int y0o = std::max(0, -ky), x0o = std::max(0, -kx);
              const int bh = H - std::abs(ky), bw = W - std::abs(kx);
              d.block(y0o + ky, x0o + kx, bh, bw) += kw * go.ch[oc].block(y0o, x0o, bh, bw);
            }
        }
      gg.accumulate(x, dx);
    }
    if (gg.needs_grad(w)) {
      Tensor dw = Tensor::zeros(co * ci, 3, 3);
      for (int oc = 0; oc < co; ++oc)
        for (int ic = 0; ic < ci; ++ic) {
          Grid& dk = dw.ch[oc * ci + ic];
          for (int ky = -1; ky <= 1; ++ky)
            for (int kx = -1; kx <= 1; ++kx) {
              const int y0o = std::max(0, -ky), x0o = std::max(0, -kx);
              const int bh = H - std::abs(ky), bw = W - std::abs(kx);
              dk(ky + 1, kx + 1) =
                  (xv2.ch[ic].block(y0o + ky, x0o + kx, bh, bw) *
                   go.ch[oc].block(y0o, x0o, bh, bw))
                      .sum();
            }
        }
      gg.accumulate(w, dw);
    }
    if (gg.needs_grad(b)) {
      Tensor db = Tensor::zeros(co, 1, 1);
      for (int oc = 0; oc < co; ++oc) db.ch[oc](0, 0) = go.ch[oc].sum();
      gg.accumulate(b, db);
    }
  });
}

// ---------------------------------------------------------------------------
// Sampling and filtering
// ---------------------------------------------------------------------------

/// Bilinear sample of src at continuous coords (u = column, v = row), one
/// coord pair per output pixel, shared across channels. Out-of-bounds
/// coordinates produce 0 with no gradient; the caller derives the validity
/// mask from the coords. Differentiable w.r.t. src and coords.
inline Var gather_bilinear(Var src, Var u, Var v) {
  detail::check_same_graph(src, u);
  detail::check_same_graph(src, v);
  Graph& g = *src.g;
  const Tensor& sv = g.val(src);
  const Tensor& uv = g.val(u);
  const Tensor& vv = g.val(v);
  require(uv.channels() == 1 && vv.channels() == 1, "gather: coords must be 1ch");
  require(uv.rows() == vv.rows() && uv.cols() == vv.cols(), "gather: coord shapes");
  const int Hs = sv.rows(), Ws = sv.cols();
  const int H = uv.rows(), W = uv.cols();
  Tensor out = Tensor::zeros(sv.channels(), H, W);
  for (int x = 0; x < W; ++x)
    for (int y = 0; y < H; ++y) {
      double uu = uv.ch[0](y, x), vvv = vv.ch[0](y, x);
      if (!(uu >= -kCoordEps && uu <= Ws - 1.0 + kCoordEps && vvv >= -kCoordEps &&
            vvv <= Hs - 1.0 + kCoordEps))
        continue;
      uu = std::clamp(uu, 0.0, Ws - 1.0);
      vvv = std::clamp(vvv, 0.0, Hs - 1.0);
      int x0 = static_cast<int>(std::floor(uu));
      int y0 = static_cast<int>(std::floor(vvv));
      if (x0 >= Ws - 1) x0 = Ws - 2;
      if (y0 >= Hs - 1) y0 = Hs - 2;
      if (Ws == 1) x0 = 0;
      if (Hs == 1) y0 = 0;
      const double fx = Ws == 1 ? 0.0 : uu - x0;
      const double fy = Hs == 1 ? 0.0 : vvv - y0;
      const int x1 = Ws == 1 ? 0 : x0 + 1, y1 = Hs == 1 ? 0 : y0 + 1;
      for (int c = 0; c < sv.channels(); ++c) {
        const Grid& s = sv.ch[c];
        out.ch[c](y, x) = (1 - fy) * ((1 - fx) * s(y0, x0) + fx * s(y0, x1)) +
                          fy * ((1 - fx) * s(y1, x0) + fx * s(y1, x1));
      }
    }
  return g.make(std::move(out), {src, u, v}, [src, u, v](Graph& gg, const Tensor& go) {
    const Tensor& sv2 = gg.val(src);
    const Tensor& uv2 = gg.val(u);
    const Tensor& vv2 = gg.val(v);
    const int Hs = sv2.rows(), Ws = sv2.cols();
    const int H = uv2.rows(), W = uv2.cols();
    Tensor dsrc, du, dv;
    const bool gs = gg.needs_grad(src);
    const bool gc = gg.needs_grad(u) || gg.needs_grad(v);
    if (gs) dsrc = Tensor::zeros(sv2.channels(), Hs, Ws);
    if (gc) {
      du = Tensor::zeros(1, H, W);
      dv = Tensor::zeros(1, H, W);
    }
    for (int x = 0; x < W; ++x)
      for (int y = 0; y < H; ++y) {
        double uu = uv2.ch[0](y, x), vvv = vv2.ch[0](y, x);
        if (!(uu >= -kCoordEps && uu <= Ws - 1.0 + kCoordEps && vvv >= -kCoordEps &&
              vvv <= Hs - 1.0 + kCoordEps))
          continue;
        uu = std::clamp(uu, 0.0, Ws - 1.0);
        vvv = std::clamp(vvv, 0.0, Hs - 1.0);
        int x0 = static_cast<int>(std::floor(uu));
        int y0 = static_cast<int>(std::floor(vvv));
        if (x0 >= Ws - 1) x0 = Ws - 2;
        if (y0 >= Hs - 1) y0 = Hs - 2;
        if (Ws == 1) x0 = 0;
        if (Hs == 1) y0 = 0;
        const double fx = Ws == 1 ? 0.0 : uu - x0;
        const double fy = Hs == 1 ? 0.0 : vvv - y0;
        const int x1 = Ws == 1 ? 0 : x0 + 1, y1 = Hs == 1 ? 0 : y0 + 1;
        for (int c = 0; c < sv2.channels(); ++c) {
          const double gv = go.ch[c](y, x);
          if (gv == 0.0) continue;
          const Grid& s = sv2.ch[c];
          if (gs) {
            dsrc.ch[c](y0, x0) += gv * (1 - fy) * (1 - fx);
            dsrc.ch[c](y0, x1) += gv * (1 - fy) * fx;
            dsrc.ch[c](y1, x0) += gv * fy * (1 - fx);
            dsrc.ch[c](y1, x1) += gv * fy * fx;
          }
          if (gc) {
            du.ch[0](y, x) += gv * ((1 - fy) * (s(y0, x1) - s(y0, x0)) +
                                    fy * (s(y1, x1) - s(y1, x0)));
            dv.ch[0](y, x) += gv * ((1 - fx) * (s(y1, x0) - s(y0, x0)) +
                                    fx * (s(y1, x1) - s(y0, x1)));
          }
        }
      }
    if (gs) gg.accumulate(src, dsrc);
    if (gc) {
      gg.accumulate(u, du);
      gg.accumulate(v, dv);
    }
  });
}

namespace detail {
inline int reflect101(int i, int n) {
  if (n == 1) return 0;
  if (i < 0) return -i;
  if (i >= n) return 2 * n - 2 - i;
  return i;
}
}  // namespace detail

/// 3x3 box mean with reflect-101 padding (SSIM pooling).
inline Var box3x3_reflect(Var a) {
  Graph& g = *a.g;
  const Tensor& av = g.val(a);
  const int H = av.rows(), W = av.cols();
  Tensor out = Tensor::zeros(av.channels(), H, W);
  for (int c = 0; c < av.channels(); ++c) {
    const Grid& s = av.ch[c];
    Grid& o = out.ch[c];
    for (int x = 0; x < W; ++x)
      for (int y = 0; y < H; ++y) {
        double acc = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            acc += s(detail::reflect101(y + dy, H), detail::reflect101(x + dx, W));
        o(y, x) = acc / 9.0;
      }
  }
  return g.make(std::move(out), {a}, [a](Graph& gg, const Tensor& go) {
    const int H = go.rows(), W = go.cols();
    Tensor da = Tensor::zeros(go.channels(), H, W);
    for (int c = 0; c < go.channels(); ++c)
      for (int x = 0; x < W; ++x)
        for (int y = 0; y < H; ++y) {
          const double gv = go.ch[c](y, x) / 9.0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx)
              da.ch[c](detail::reflect101(y + dy, H), detail::reflect101(x + dx, W)) += gv;
        }
    gg.accumulate(a, da);
  });
}

/// Forward difference along x; last column is zero (dropped pair).
inline Var diff_x(Var a) {
  Graph& g = *a.g;
  const Tensor& av = g.val(a);
  const int H = av.rows(), W = av.cols();
  Tensor out = Tensor::zeros(av.channels(), H, W);
  for (int c = 0; c < av.channels(); ++c)
    if (W > 1)
      out.ch[c].block(0, 0, H, W - 1) =
          av.ch[c].block(0, 1, H, W - 1) - av.ch[c].block(0, 0, H, W - 1);
  return g.make(std::move(out), {a}, [a](Graph& gg, const Tensor& go) {
    const int H = go.rows(), W = go.cols();
    Tensor da = Tensor::zeros(go.channels(), H, W);
    if (W > 1)
      for (int c = 0; c < go.channels(); ++c) {
        da.ch[c].block(0, 1, H, W - 1) += go.ch[c].block(0, 0, H, W - 1);
        da.ch[c].block(0, 0, H, W - 1) -= go.ch[c].block(0, 0, H, W - 1);
      }
    gg.accumulate(a, da);
  });
}

/// Forward difference along y; last row is zero.
inline Var diff_y(Var a) {
  Graph& g = *a.g;
  const Tensor& av = g.val(a);
  const int H = av.rows(), W = av.cols();
  Tensor out = Tensor::zeros(av.channels(), H, W);
  for (int c = 0; c < av.channels(); ++c)
    if (H > 1)
      out.ch[c].block(0, 0, H - 1, W) =
          av.ch[c].block(1, 0, H - 1, W) - av.ch[c].block(0, 0, H - 1, W);
  return g.make(std::move(out), {a}, [a](Graph& gg, const Tensor& go) {
    const int H = go.rows(), W = go.cols();
    Tensor da = Tensor::zeros(go.channels(), H, W);
    if (H > 1)
      for (int c = 0; c < go.channels(); ++c) {
        da.ch[c].block(1, 0, H - 1, W) += go.ch[c].block(0, 0, H - 1, W);
        da.ch[c].block(0, 0, H - 1, W) -= go.ch[c].block(0, 0, H - 1, W);
      }
    gg.accumulate(a, da);
  });
}

/// Mean over channels, collapsing to a single-channel map.
inline Var channel_mean(Var a) {
  Graph& g = *a.g;
  const Tensor& av = g.val(a);
  if (av.channels() == 1) return a;
  Tensor out = Tensor::zeros(1, av.rows(), av.cols());
  for (const Grid& p : av.ch) out.ch[0] += p;
  out.ch[0] /= av.channels();
  return g.make(std::move(out), {a}, [a](Graph& gg, const Tensor& go) {
    const Tensor& av2 = gg.val(a);
    const Grid d = go.ch[0] / av2.channels();
    for (int c = 0; c < av2.channels(); ++c) gg.accumulate_ch(a, c, d);
  });
}

/// Mean of x over a boolean mask (mask frozen, no gradient through it).
/// Caller must ensure the mask is non-empty.
inline Var masked_mean(Var x, const Mask& m) {
  Graph& g = *x.g;
  const std::int64_t n = mask_count(m);
  require(n > 0, "masked_mean: empty mask");
  Var mg = g.constant(mask_to_grid(m));
  const Tensor& xv = g.val(x);
  Var masked = x;
  if (xv.channels() == 1) {
    masked = x * mg;
  } else {
    // broadcast single-channel mask over channels
    Tensor mm;
    mm.ch.assign(xv.channels(), mask_to_grid(m));
    masked = x * g.constant(std::move(mm));
  }
  const double denom = static_cast<double>(n) * xv.channels();
  return vsum(masked) / denom;
}

}  // namespace mdt
