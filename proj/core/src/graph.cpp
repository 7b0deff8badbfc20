#include "cln/graph.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "cln/numcore.hpp"

namespace cln {
namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const MatR>;
using MMap = Eigen::Map<MatR>;

std::size_t rows_of(const Shape& s) { return s.size() <= 1 ? 1 : s[0]; }
std::size_t cols_of(const Shape& s) { return s.empty() ? 1 : s.back(); }

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace

Var Graph::constant(Shape shape, std::vector<double> values) {
  require(shape_numel(shape) == values.size(), "graph: constant shape mismatch");
  Node n;
  n.shape = std::move(shape);
  n.owned.assign(values.begin(), values.end());
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Graph::param(const Tensor& t) {
  if (!t.requires_grad()) return view(t);
  Node n;
  n.shape = t.shape();
  n.external = &t;
  n.sink = &t;
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Graph::view(const Tensor& t) {
  Node n;
  n.shape = t.shape();
  n.external = &t;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

const double* Graph::data(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.external ? n.external->values().data() : n.owned.data();
}

std::span<const double> Graph::value(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.external) return n.external->values();
  return n.owned;
}

double Graph::item(Var v) const {
  auto vals = value(v);
  require(vals.size() == 1, "graph: item() on non-scalar");
  return vals[0];
}

double* Graph::grad_buf(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return nullptr;
  if (n.grad.empty()) n.grad.assign(shape_numel(n.shape), 0.0);
  return n.grad.data();
}

Var Graph::push(Shape shape, RealBuffer values, std::initializer_list<Var> parents,
                BackwardFn fn) {
  return push(std::move(shape), std::move(values),
              std::span<const Var>(parents.begin(), parents.size()), std::move(fn));
}

Var Graph::push(Shape shape, RealBuffer values, std::span<const Var> parents,
                BackwardFn fn) {
  Node n;
  n.shape = std::move(shape);
  n.owned = std::move(values);
  for (Var p : parents) n.needs_grad = n.needs_grad || nodes_.at(p.id).needs_grad;
  if (n.needs_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

void Graph::backward(Var root) {
  require(shape_numel(nodes_.at(root.id).shape) == 1, "graph: backward root must be scalar");
  for (Node& n : nodes_) n.grad.clear();
  if (!nodes_[root.id].needs_grad) return;
  grad_buf(root.id)[0] = 1.0;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, i);
    if (n.sink) {
      auto g = n.sink->grad_accumulator();
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[j];
    }
  }
}

Var Graph::matmul(Var a, Var b) {
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  require(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0], "matmul: shape mismatch");
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  RealBuffer out(m * n);
  MMap(out.data(), m, n).noalias() = CMap(data(a.id), m, k) * CMap(data(b.id), k, n);
  return push({m, n}, std::move(out), {a, b}, [a, b, m, k, n](Graph& g, std::size_t self) {
    CMap gy(g.nodes_[self].grad.data(), m, n);
    if (double* ga = g.grad_buf(a.id))
      MMap(ga, m, k).noalias() += gy * CMap(g.data(b.id), k, n).transpose();
    if (double* gb = g.grad_buf(b.id))
      MMap(gb, k, n).noalias() += CMap(g.data(a.id), m, k).transpose() * gy;
  });
}

Var Graph::linear(Var x, Var w, Var b) {
  const Shape& sx = shape(x);
  const Shape& sw = shape(w);
  require(sx.size() == 2 && sw.size() == 2 && sx[1] == sw[0], "linear: shape mismatch");
  const std::size_t m = sx[0], k = sx[1], n = sw[1];
  require(shape_numel(shape(b)) == n, "linear: bias length");
  RealBuffer out(m * n);
  MMap y(out.data(), m, n);
  y.noalias() = CMap(data(x.id), m, k) * CMap(data(w.id), k, n);
  y.rowwise() += CMap(data(b.id), 1, n).row(0);
  return push({m, n}, std::move(out), {x, w, b}, [x, w, b, m, k, n](Graph& g, std::size_t self) {
    CMap gy(g.nodes_[self].grad.data(), m, n);
    if (double* gx = g.grad_buf(x.id))
      MMap(gx, m, k).noalias() += gy * CMap(g.data(w.id), k, n).transpose();
    if (double* gw = g.grad_buf(w.id))
      MMap(gw, k, n).noalias() += CMap(g.data(x.id), m, k).transpose() * gy;
    if (double* gb = g.grad_buf(b.id)) MMap(gb, 1, n) += gy.colwise().sum();
  });
}

Var Graph::add(Var a, Var b) {
  const std::size_t n = shape_numel(shape(a));
  require(n == shape_numel(shape(b)), "add: element count mismatch");
  RealBuffer out(n);
  const double* pa = data(a.id);
  const double* pb = data(b.id);
  for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i];
  return push(shape(a), std::move(out), {a, b}, [a, b, n](Graph& g, std::size_t self) {
    const double* gy = g.nodes_[self].grad.data();
    for (Var p : {a, b})
      if (double* gp = g.grad_buf(p.id))
        for (std::size_t i = 0; i < n; ++i) gp[i] += gy[i];
  });
}

Var Graph::scale(Var x, double s) {
  const std::size_t n = shape_numel(shape(x));
  RealBuffer out(n);
  const double* px = data(x.id);
  for (std::size_t i = 0; i < n; ++i) out[i] = px[i] * s;
  return push(shape(x), std::move(out), {x}, [x, n, s](Graph& g, std::size_t self) {
    const double* gy = g.nodes_[self].grad.data();
    if (double* gx = g.grad_buf(x.id))
      for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * s;
  });
}

Var Graph::gelu(Var x) {
  const std::size_t n = shape_numel(shape(x));
  RealBuffer out(n);
  const double* px = data(x.id);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = 0.5 * px[i] * (1.0 + std::erf(px[i] * std::numbers::sqrt2 / 2.0));
  return push(shape(x), std::move(out), {x}, [x, n](Graph& g, std::size_t self) {
    const double* gy = g.nodes_[self].grad.data();
    const double* px = g.data(x.id);
    double* gx = g.grad_buf(x.id);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < n; ++i) {
      const double v = px[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      gx[i] += gy[i] * (cdf + v * pdf);
    }
  });
}

Var Graph::layer_norm_rows(Var x, double eps) {
  const Shape& s = shape(x);
  const std::size_t m = rows_of(s), d = cols_of(s);
  require(d >= 1, "layer_norm_rows: empty rows");
  RealBuffer out(m * d);
  RealBuffer inv_std(m);
  const double* px = data(x.id);
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = px + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double denom = std::sqrt(var + eps);
    inv_std[r] = denom > 0.0 ? 1.0 / denom : 0.0;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (row[j] - mean) * inv_std[r];
  }
  return push(s, std::move(out), {x},
              [x, m, d, inv_std = std::move(inv_std)](Graph& g, std::size_t self) {
                const Node& me = g.nodes_[self];
                const double* gy = me.grad.data();
                const double* xh = me.owned.data();
                double* gx = g.grad_buf(x.id);
                const double inv_d = 1.0 / static_cast<double>(d);
                for (std::size_t r = 0; r < m; ++r) {
                  double mg = 0.0, mgx = 0.0;
                  for (std::size_t j = 0; j < d; ++j) {
                    mg += gy[r * d + j];
                    mgx += gy[r * d + j] * xh[r * d + j];
                  }
                  mg *= inv_d;
                  mgx *= inv_d;
                  for (std::size_t j = 0; j < d; ++j)
                    gx[r * d + j] += inv_std[r] * (gy[r * d + j] - mg - xh[r * d + j] * mgx);
                }
              });
}

Var Graph::affine_rows(Var xhat, std::span<const Var> gammas, std::span<const Var> betas,
                       std::size_t rows_per_group) {
  const Shape& s = shape(xhat);
  const std::size_t m = rows_of(s), d = cols_of(s);
  require(!gammas.empty() && gammas.size() == betas.size(), "affine_rows: gamma/beta count");
  require(rows_per_group >= 1, "affine_rows: rows_per_group");
  const std::size_t groups = gammas.size();
  require(groups == 1 || groups * rows_per_group == m, "affine_rows: group count mismatch");
  for (std::size_t i = 0; i < groups; ++i)
    require(shape_numel(shape(gammas[i])) == d && shape_numel(shape(betas[i])) == d,
            "affine_rows: parameter length");
  RealBuffer out(m * d);
  const double* px = data(xhat.id);
  for (std::size_t r = 0; r < m; ++r) {
    const std::size_t gi = groups == 1 ? 0 : r / rows_per_group;
    const double* gam = data(gammas[gi].id);
    const double* bet = data(betas[gi].id);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = px[r * d + j] * gam[j] + bet[j];
  }
  std::vector<Var> parents{xhat};
  parents.insert(parents.end(), gammas.begin(), gammas.end());
  parents.insert(parents.end(), betas.begin(), betas.end());
  std::vector<Var> gs(gammas.begin(), gammas.end());
  std::vector<Var> bs(betas.begin(), betas.end());
  return push(s, std::move(out), std::span<const Var>(parents),
              [xhat, gs = std::move(gs), bs = std::move(bs), m, d, rows_per_group](
                  Graph& g, std::size_t self) {
                const double* gy = g.nodes_[self].grad.data();
                const double* px = g.data(xhat.id);
                double* gx = g.grad_buf(xhat.id);
                for (std::size_t r = 0; r < m; ++r) {
                  const std::size_t gi = gs.size() == 1 ? 0 : r / rows_per_group;
                  const double* gam = g.data(gs[gi].id);
                  double* ggam = g.grad_buf(gs[gi].id);
                  double* gbet = g.grad_buf(bs[gi].id);
                  for (std::size_t j = 0; j < d; ++j) {
                    const double gv = gy[r * d + j];
                    if (gx) gx[r * d + j] += gv * gam[j];
                    if (ggam) ggam[j] += gv * px[r * d + j];
                    if (gbet) gbet[j] += gv;
                  }
                }
              });
}

Var Graph::attention(Var qkv, std::size_t batch, std::size_t tokens, std::size_t heads) {
  const Shape& s = shape(qkv);
  require(s.size() == 2 && s[0] == batch * tokens && s[1] % 3 == 0, "attention: qkv shape");
  const std::size_t d = s[1] / 3;
  require(heads >= 1 && d % heads == 0, "attention: heads must divide width");
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t ld = 3 * d;
  RealBuffer out(batch * tokens * d, 0.0);
  RealBuffer probs(batch * heads * tokens * tokens);
  const double* px = data(qkv.id);
  using Stride = Eigen::OuterStride<>;
  using CStrided = Eigen::Map<const MatR, 0, Stride>;
  using MStrided = Eigen::Map<MatR, 0, Stride>;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* base = px + b * tokens * ld;
    for (std::size_t h = 0; h < heads; ++h) {
      CStrided q(base + h * dh, tokens, dh, Stride(ld));
      CStrided k(base + d + h * dh, tokens, dh, Stride(ld));
      CStrided v(base + 2 * d + h * dh, tokens, dh, Stride(ld));
      MMap p(probs.data() + (b * heads + h) * tokens * tokens, tokens, tokens);
      p.noalias() = (q * k.transpose()) * sc;
      for (std::size_t r = 0; r < tokens; ++r) {
        const double mx = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - mx).exp();
        p.row(r) /= p.row(r).sum();
      }
      MStrided o(out.data() + b * tokens * d + h * dh, tokens, dh, Stride(d));
      o.noalias() = p * v;
    }
  }
  return push({batch * tokens, d}, std::move(out), {qkv},
              [qkv, batch, tokens, heads, d, dh, sc, ld, probs = std::move(probs)](
                  Graph& g, std::size_t self) {
                const double* gout = g.nodes_[self].grad.data();
                const double* px = g.data(qkv.id);
                double* gx = g.grad_buf(qkv.id);
                MatR gp(tokens, tokens), gs(tokens, tokens);
                for (std::size_t b = 0; b < batch; ++b) {
                  const double* base = px + b * tokens * ld;
                  double* gbase = gx + b * tokens * ld;
                  for (std::size_t h = 0; h < heads; ++h) {
                    CStrided q(base + h * dh, tokens, dh, Stride(ld));
                    CStrided k(base + d + h * dh, tokens, dh, Stride(ld));
                    CStrided v(base + 2 * d + h * dh, tokens, dh, Stride(ld));
                    MStrided gq(gbase + h * dh, tokens, dh, Stride(ld));
                    MStrided gk(gbase + d + h * dh, tokens, dh, Stride(ld));
                    MStrided gv(gbase + 2 * d + h * dh, tokens, dh, Stride(ld));
                    CMap p(probs.data() + (b * heads + h) * tokens * tokens, tokens, tokens);
                    CStrided go(gout + b * tokens * d + h * dh, tokens, dh, Stride(d));
                    gv.noalias() += p.transpose() * go;
                    gp.noalias() = go * v.transpose();
                    for (std::size_t r = 0; r < tokens; ++r) {
                      const double dotp = p.row(r).dot(gp.row(r));
                      gs.row(r) = p.row(r).array() * (gp.row(r).array() - dotp);
                    }
                    gs *= sc;
                    gq.noalias() += gs * k;
                    gk.noalias() += gs.transpose() * q;
                  }
                }
              });
}

Var Graph::gather_rows(Var x, std::vector<std::size_t> rows) {
  const Shape& s = shape(x);
  const std::size_t m = rows_of(s), d = cols_of(s);
  RealBuffer out(rows.size() * d);
  const double* px = data(x.id);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < m, "gather_rows: row out of range");
    std::copy_n(px + rows[i] * d, d, out.data() + i * d);
  }
  const std::size_t r = rows.size();
  return push({r, d}, std::move(out), {x}, [x, d, rows = std::move(rows)](Graph& g, std::size_t self) {
    const double* gy = g.nodes_[self].grad.data();
    double* gx = g.grad_buf(x.id);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) gx[rows[i] * d + j] += gy[i * d + j];
  });
}

Var Graph::mul_row_broadcast(Var x, Var v) {
  const Shape& s = shape(x);
  const std::size_t m = rows_of(s), d = cols_of(s);
  require(shape_numel(shape(v)) == d, "mul_row_broadcast: length mismatch");
  RealBuffer out(m * d);
  const double* px = data(x.id);
  const double* pv = data(v.id);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = px[r * d + j] * pv[j];
  return push(s, std::move(out), {x, v}, [x, v, m, d](Graph& g, std::size_t self) {
    const double* gy = g.nodes_[self].grad.data();
    const double* px = g.data(x.id);
    const double* pv = g.data(v.id);
    double* gx = g.grad_buf(x.id);
    double* gv = g.grad_buf(v.id);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t j = 0; j < d; ++j) {
        if (gx) gx[r * d + j] += gy[r * d + j] * pv[j];
        if (gv) gv[j] += gy[r * d + j] * px[r * d + j];
      }
  });
}

Var Graph::cosine_rows(Var x, Var key) {
  const Shape& s = shape(x);
  const std::size_t m = rows_of(s), d = cols_of(s);
  require(shape_numel(shape(key)) == d, "cosine_rows: length mismatch");
  const double* px = data(x.id);
  const double* pk = data(key.id);
  double kn = 0.0;
  for (std::size_t j = 0; j < d; ++j) kn += pk[j] * pk[j];
  kn = std::sqrt(kn);
  RealBuffer xn(m), out(m);
  for (std::size_t r = 0; r < m; ++r) {
    double dot = 0.0, nn = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dot += px[r * d + j] * pk[j];
      nn += px[r * d + j] * px[r * d + j];
    }
    xn[r] = std::sqrt(nn);
    if (xn[r] < kNormFloor || kn < kNormFloor) throw std::invalid_argument("degenerate vector");
    out[r] = dot / (xn[r] * kn);
  }
  RealBuffer cos_copy = out;
  return push({m}, std::move(out), {x, key},
              [x, key, m, d, kn, xn = std::move(xn), cs = std::move(cos_copy)](Graph& g,
                                                                              std::size_t self) {
                const double* gy = g.nodes_[self].grad.data();
                const double* px = g.data(x.id);
                const double* pk = g.data(key.id);
                double* gx = g.grad_buf(x.id);
                double* gk = g.grad_buf(key.id);
                for (std::size_t r = 0; r < m; ++r) {
                  const double inv = 1.0 / (xn[r] * kn);
                  for (std::size_t j = 0; j < d; ++j) {
                    const double xv = px[r * d + j];
                    if (gx) gx[r * d + j] += gy[r] * (pk[j] * inv - cs[r] * xv / (xn[r] * xn[r]));
                    if (gk) gk[j] += gy[r] * (xv * inv - cs[r] * pk[j] / (kn * kn));
                  }
                }
              });
}

Var Graph::sum(Var x) {
  const std::size_t n = shape_numel(shape(x));
  const double* px = data(x.id);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += px[i];
  return push({1}, {acc}, {x}, [x, n](Graph& g, std::size_t self) {
    const double gy = g.nodes_[self].grad[0];
    double* gx = g.grad_buf(x.id);
    for (std::size_t i = 0; i < n; ++i) gx[i] += gy;
  });
}

Var Graph::mean(Var x) {
  const std::size_t n = shape_numel(shape(x));
  require(n > 0, "mean: empty");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var Graph::softmax_cross_entropy(Var logits, std::span<const std::size_t> labels,
                                 const std::vector<bool>* mask) {
  const Shape& s = shape(logits);
  const std::size_t m = rows_of(s), k = cols_of(s);
  require(labels.size() == m && m > 0, "softmax_cross_entropy: label count");
  const double* pl = data(logits.id);
  RealBuffer grads(m * k);
  double total = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    auto res = cln::softmax_cross_entropy(std::span<const double>(pl + r * k, k), labels[r], mask);
    total += res.loss;
    std::copy(res.grad.begin(), res.grad.end(), grads.begin() + r * k);
  }
  const double inv_m = 1.0 / static_cast<double>(m);
  return push({1}, {total * inv_m}, {logits},
              [logits, inv_m, grads = std::move(grads)](Graph& g, std::size_t self) {
                const double gy = g.nodes_[self].grad[0] * inv_m;
                double* gl = g.grad_buf(logits.id);
                for (std::size_t i = 0; i < grads.size(); ++i) gl[i] += gy * grads[i];
              });
}

Var Graph::concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: no parts");
  const std::size_t m = rows_of(shape(parts[0]));
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (Var p : parts) {
    const Shape& s = shape(p);
    require(rows_of(s) == m, "concat_cols: row mismatch");
    widths.push_back(cols_of(s));
    total += widths.back();
  }
  RealBuffer out(m * total);
  std::size_t off = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const double* pp = data(parts[i].id);
    for (std::size_t r = 0; r < m; ++r)
      std::copy_n(pp + r * widths[i], widths[i], out.data() + r * total + off);
    off += widths[i];
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return push({m, total}, std::move(out), parts,
              [ps, widths = std::move(widths), m, total](Graph& g, std::size_t self) {
                const double* gy = g.nodes_[self].grad.data();
                std::size_t off = 0;
                for (std::size_t i = 0; i < ps.size(); ++i) {
                  if (double* gp = g.grad_buf(ps[i].id))
                    for (std::size_t r = 0; r < m; ++r)
                      for (std::size_t j = 0; j < widths[i]; ++j)
                        gp[r * widths[i] + j] += gy[r * total + off + j];
                  off += widths[i];
                }
              });
}

Var Graph::assemble_tokens(Var patches, Var cls, Var pos, std::size_t batch) {
  const Shape& sp = shape(patches);
  require(sp.size() == 2 && batch > 0 && sp[0] % batch == 0, "assemble_tokens: patch shape");
  const std::size_t d = sp[1], p = sp[0] / batch, n = p + 1;
  require(shape_numel(shape(cls)) == d && shape_numel(shape(pos)) == n * d,
          "assemble_tokens: embedding shape");
  const double* pp = data(patches.id);
  const double* pc = data(cls.id);
  const double* ppos = data(pos.id);
  RealBuffer out(batch * n * d);
  for (std::size_t b = 0; b < batch; ++b) {
    double* row0 = out.data() + b * n * d;
    for (std::size_t j = 0; j < d; ++j) row0[j] = pc[j] + ppos[j];
    for (std::size_t t = 0; t < p; ++t)
      for (std::size_t j = 0; j < d; ++j)
        row0[(t + 1) * d + j] = pp[(b * p + t) * d + j] + ppos[(t + 1) * d + j];
  }
  return push({batch * n, d}, std::move(out), {patches, cls, pos},
              [patches, cls, pos, batch, p, n, d](Graph& g, std::size_t self) {
                const double* gy = g.nodes_[self].grad.data();
                double* gp = g.grad_buf(patches.id);
                double* gc = g.grad_buf(cls.id);
                double* gpos = g.grad_buf(pos.id);
                for (std::size_t b = 0; b < batch; ++b) {
                  const double* row0 = gy + b * n * d;
                  for (std::size_t j = 0; j < d; ++j) {
                    if (gc) gc[j] += row0[j];
                    if (gpos) gpos[j] += row0[j];
                  }
                  for (std::size_t t = 0; t < p; ++t)
                    for (std::size_t j = 0; j < d; ++j) {
                      const double v = row0[(t + 1) * d + j];
                      if (gp) gp[(b * p + t) * d + j] += v;
                      if (gpos) gpos[(t + 1) * d + j] += v;
                    }
                }
              });
}

}  // namespace cln
