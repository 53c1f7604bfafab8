#include "sigma/graph.hpp"

#include <algorithm>
#include <cmath>

#include "sigma/errors.hpp"

namespace sigma {

namespace {

constexpr double kGeluK = 0.7978845608028653558798921198687;  // sqrt(2/pi)
constexpr double kGeluC = 0.044715;
constexpr double kLnEps = 1e-5;

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

void require_matrix(const Tensor& t, const char* who) {
  if (t.rank() > 2) throw DimensionError(std::string(who) + ": needs rank <= 2, got " + t.shape_str());
}

Tensor as_matrix(Tensor t) {
  if (t.rank() == 2) return t;
  if (t.rank() == 1) return t.reshaped({1, t.size()});
  if (t.rank() == 0) return t.reshaped({1, 1});
  throw DimensionError("graph values must be rank <= 2, got " + t.shape_str());
}

}  // namespace

int Graph::push(Tensor value, bool needs_grad, std::function<void(Graph&)> back) {
  Node node;
  node.value = std::move(value);
  node.needs_grad = needs_grad;
  if (needs_grad) node.grad_buf = Tensor::zeros(node.value.shape());
  node.back = std::move(back);
  nodes_.push_back(std::move(node));
  return static_cast<int>(nodes_.size()) - 1;
}

void Graph::accum(int idx, const Tensor& g) {
  Node& node = nodes_[static_cast<std::size_t>(idx)];
  if (!node.needs_grad) return;
  double* dst = node.grad_buf.data().data();
  const double* src = g.data().data();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
}

void Graph::accum_at(int idx, std::size_t flat_index, double g) {
  Node& node = nodes_[static_cast<std::size_t>(idx)];
  if (!node.needs_grad) return;
  node.grad_buf.data()[flat_index] += g;
}

Var Graph::input(Tensor value) {
  return Var{push(as_matrix(std::move(value)), false, nullptr)};
}

Var Graph::scalar(double value) { return Var{push(Tensor::scalar(value), false, nullptr)}; }

Var Graph::param(ParamStore& store, const std::string& name) {
  auto it = param_nodes_.find(name);
  if (it != param_nodes_.end()) return Var{it->second};
  bool trainable = store.is_trainable(name);
  int idx = push(as_matrix(store.get(name)), trainable, nullptr);
  param_nodes_[name] = idx;
  node_param_names_[idx] = name;
  return Var{idx};
}

Var Graph::affine(Var x, Var w, Var b) {
  const Tensor& xv = val(x.idx);
  const Tensor& wv = val(w.idx);
  const Tensor& bv = val(b.idx);
  std::size_t m = xv.rows(), k = xv.cols(), n = wv.cols();
  if (wv.rows() != k || bv.size() != n) {
    throw DimensionError("affine: x" + xv.shape_str() + " W" + wv.shape_str() + " b" +
                         bv.shape_str());
  }
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out(i, j) = bv[j];
    for (std::size_t l = 0; l < k; ++l) {
      double xi = xv(i, l);
      if (xi == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out(i, j) += xi * wv(l, j);
    }
  }
  bool ng = wants(x.idx) || wants(w.idx) || wants(b.idx);
  int xi = x.idx, wi = w.idx, bi = b.idx;
  int idx = push(std::move(out), ng, nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [xi, wi, bi, idx, m, k, n](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    const Tensor& xv2 = g.val(xi);
    const Tensor& wv2 = g.val(wi);
    if (g.wants(xi)) {
      Tensor dx({m, k});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double d = dy(i, j);
          if (d == 0.0) continue;
          for (std::size_t l = 0; l < k; ++l) dx(i, l) += d * wv2(l, j);
        }
      g.accum(xi, dx);
    }
    if (g.wants(wi)) {
      Tensor dw({k, n});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
          double xvi = xv2(i, l);
          if (xvi == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) dw(l, j) += xvi * dy(i, j);
        }
      g.accum(wi, dw);
    }
    if (g.wants(bi)) {
      Tensor db(g.val(bi).shape());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) db[j] += dy(i, j);
      g.accum(bi, db);
    }
  };
  return Var{idx};
}

Var Graph::matmul(Var a, Var b) {
  const Tensor& av = val(a.idx);
  const Tensor& bv = val(b.idx);
  std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) throw DimensionError("matmul: " + av.shape_str() + " * " + bv.shape_str());
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t l = 0; l < k; ++l) {
      double avi = av(i, l);
      if (avi == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out(i, j) += avi * bv(l, j);
    }
  bool ng = wants(a.idx) || wants(b.idx);
  int ai = a.idx, bi = b.idx;
  int idx = push(std::move(out), ng, nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [ai, bi, idx, m, k, n](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    const Tensor& av2 = g.val(ai);
    const Tensor& bv2 = g.val(bi);
    if (g.wants(ai)) {
      Tensor da({m, k});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double d = dy(i, j);
          if (d == 0.0) continue;
          for (std::size_t l = 0; l < k; ++l) da(i, l) += d * bv2(l, j);
        }
      g.accum(ai, da);
    }
    if (g.wants(bi)) {
      Tensor db({k, n});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
          double avi = av2(i, l);
          if (avi == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) db(l, j) += avi * dy(i, j);
        }
      g.accum(bi, db);
    }
  };
  return Var{idx};
}

Var Graph::matmul_nt(Var a, Var b) {
  const Tensor& av = val(a.idx);
  const Tensor& bv = val(b.idx);
  std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  if (bv.cols() != k) throw DimensionError("matmul_nt: " + av.shape_str() + " * " + bv.shape_str() + "^T");
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t l = 0; l < k; ++l) s += av(i, l) * bv(j, l);
      out(i, j) = s;
    }
  bool ng = wants(a.idx) || wants(b.idx);
  int ai = a.idx, bi = b.idx;
  int idx = push(std::move(out), ng, nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [ai, bi, idx, m, k, n](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    const Tensor& av2 = g.val(ai);
    const Tensor& bv2 = g.val(bi);
    if (g.wants(ai)) {
      Tensor da({m, k});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double d = dy(i, j);
          if (d == 0.0) continue;
          for (std::size_t l = 0; l < k; ++l) da(i, l) += d * bv2(j, l);
        }
      g.accum(ai, da);
    }
    if (g.wants(bi)) {
      Tensor db({n, k});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double d = dy(i, j);
          if (d == 0.0) continue;
          for (std::size_t l = 0; l < k; ++l) db(j, l) += d * av2(i, l);
        }
      g.accum(bi, db);
    }
  };
  return Var{idx};
}

Var Graph::add(Var a, Var b) {
  const Tensor& av = val(a.idx);
  const Tensor& bv = val(b.idx);
  if (!av.same_shape(bv)) throw DimensionError("add: " + av.shape_str() + " vs " + bv.shape_str());
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  bool ng = wants(a.idx) || wants(b.idx);
  int ai = a.idx, bi = b.idx;
  int idx = push(std::move(out), ng, nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [ai, bi, idx](Graph& g) {
    g.accum(ai, g.gbuf(idx));
    g.accum(bi, g.gbuf(idx));
  };
  return Var{idx};
}

Var Graph::sub(Var a, Var b) {
  const Tensor& av = val(a.idx);
  const Tensor& bv = val(b.idx);
  if (!av.same_shape(bv)) throw DimensionError("sub: " + av.shape_str() + " vs " + bv.shape_str());
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  bool ng = wants(a.idx) || wants(b.idx);
  int ai = a.idx, bi = b.idx;
  int idx = push(std::move(out), ng, nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [ai, bi, idx](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    g.accum(ai, dy);
    if (g.wants(bi)) {
      Tensor db(dy.shape());
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] = -dy[i];
      g.accum(bi, db);
    }
  };
  return Var{idx};
}

Var Graph::mul(Var a, Var b) {
  const Tensor& av = val(a.idx);
  const Tensor& bv = val(b.idx);
  if (!av.same_shape(bv)) throw DimensionError("mul: " + av.shape_str() + " vs " + bv.shape_str());
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  bool ng = wants(a.idx) || wants(b.idx);
  int ai = a.idx, bi = b.idx;
  int idx = push(std::move(out), ng, nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [ai, bi, idx](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    const Tensor& av2 = g.val(ai);
    const Tensor& bv2 = g.val(bi);
    if (g.wants(ai)) {
      Tensor da(dy.shape());
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] = dy[i] * bv2[i];
      g.accum(ai, da);
    }
    if (g.wants(bi)) {
      Tensor db(dy.shape());
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] = dy[i] * av2[i];
      g.accum(bi, db);
    }
  };
  return Var{idx};
}

Var Graph::add_row(Var x, Var row) {
  const Tensor& xv = val(x.idx);
  const Tensor& rv = val(row.idx);
  std::size_t m = xv.rows(), n = xv.cols();
  if (rv.size() != n) throw DimensionError("add_row: " + xv.shape_str() + " + " + rv.shape_str());
  Tensor out = xv;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) += rv[j];
  bool ng = wants(x.idx) || wants(row.idx);
  int xi = x.idx, ri = row.idx;
  int idx = push(std::move(out), ng, nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [xi, ri, idx, m, n](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    g.accum(xi, dy);
    if (g.wants(ri)) {
      Tensor dr(g.val(ri).shape());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dr[j] += dy(i, j);
      g.accum(ri, dr);
    }
  };
  return Var{idx};
}

Var Graph::mul_row(Var x, Var row) {
  const Tensor& xv = val(x.idx);
  const Tensor& rv = val(row.idx);
  std::size_t m = xv.rows(), n = xv.cols();
  if (rv.size() != n) throw DimensionError("mul_row: " + xv.shape_str() + " * " + rv.shape_str());
  Tensor out = xv;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) *= rv[j];
  bool ng = wants(x.idx) || wants(row.idx);
  int xi = x.idx, ri = row.idx;
  int idx = push(std::move(out), ng, nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [xi, ri, idx, m, n](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    const Tensor& xv2 = g.val(xi);
    const Tensor& rv2 = g.val(ri);
    if (g.wants(xi)) {
      Tensor dx({m, n});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dx(i, j) = dy(i, j) * rv2[j];
      g.accum(xi, dx);
    }
    if (g.wants(ri)) {
      Tensor dr(rv2.shape());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dr[j] += dy(i, j) * xv2(i, j);
      g.accum(ri, dr);
    }
  };
  return Var{idx};
}

Var Graph::scale(Var x, double c) {
  Tensor out = val(x.idx);
  for (double& v : out.data()) v *= c;
  int xi = x.idx;
  int idx = push(std::move(out), wants(x.idx), nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [xi, idx, c](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    Tensor dx(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * c;
    g.accum(xi, dx);
  };
  return Var{idx};
}

Var Graph::add_const(Var x, double c) {
  Tensor out = val(x.idx);
  for (double& v : out.data()) v += c;
  int xi = x.idx;
  int idx = push(std::move(out), wants(x.idx), nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [xi, idx](Graph& g) { g.accum(xi, g.gbuf(idx)); };
  return Var{idx};
}

Var Graph::scale_by(Var x, Var s) {
  const Tensor& sv = val(s.idx);
  if (sv.size() != 1) throw DimensionError("scale_by: scale must be 1x1, got " + sv.shape_str());
  double sval = sv[0];
  Tensor out = val(x.idx);
  for (double& v : out.data()) v *= sval;
  bool ng = wants(x.idx) || wants(s.idx);
  int xi = x.idx, si = s.idx;
  int idx = push(std::move(out), ng, nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [xi, si, idx](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    const Tensor& xv2 = g.val(xi);
    double sval2 = g.val(si)[0];
    if (g.wants(xi)) {
      Tensor dx(dy.shape());
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * sval2;
      g.accum(xi, dx);
    }
    if (g.wants(si)) {
      double ds = 0.0;
      for (std::size_t i = 0; i < dy.size(); ++i) ds += dy[i] * xv2[i];
      g.accum_at(si, 0, ds);
    }
  };
  return Var{idx};
}

Var Graph::exp_elem(Var x) {
  Tensor out = val(x.idx);
  for (double& v : out.data()) v = std::exp(v);
  int xi = x.idx;
  int idx = push(std::move(out), wants(x.idx), nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [xi, idx](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    const Tensor& yv = g.val(idx);
    Tensor dx(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * yv[i];
    g.accum(xi, dx);
  };
  return Var{idx};
}

Var Graph::sqrt_elem(Var x) {
  Tensor out = val(x.idx);
  for (double& v : out.data()) v = std::sqrt(v);
  int xi = x.idx;
  int idx = push(std::move(out), wants(x.idx), nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [xi, idx](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    const Tensor& yv = g.val(idx);
    Tensor dx(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) {
      dx[i] = dy[i] * 0.5 / std::max(yv[i], 1e-150);
    }
    g.accum(xi, dx);
  };
  return Var{idx};
}

Var Graph::sigmoid(Var x) {
  Tensor out = val(x.idx);
  for (double& v : out.data()) v = sigmoid_scalar(v);
  int xi = x.idx;
  int idx = push(std::move(out), wants(x.idx), nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [xi, idx](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    const Tensor& yv = g.val(idx);
    Tensor dx(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * yv[i] * (1.0 - yv[i]);
    g.accum(xi, dx);
  };
  return Var{idx};
}

Var Graph::gelu(Var x) {
  // Fixed tanh approximation: 0.5 x (1 + tanh(k (x + c x^3))).
  const Tensor& xv = val(x.idx);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    double v = xv[i];
    double u = kGeluK * (v + kGeluC * v * v * v);
    out[i] = 0.5 * v * (1.0 + std::tanh(u));
  }
  int xi = x.idx;
  int idx = push(std::move(out), wants(x.idx), nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [xi, idx](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    const Tensor& xv2 = g.val(xi);
    Tensor dx(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) {
      double v = xv2[i];
      double u = kGeluK * (v + kGeluC * v * v * v);
      double t = std::tanh(u);
      double du = kGeluK * (1.0 + 3.0 * kGeluC * v * v);
      dx[i] = dy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
    g.accum(xi, dx);
  };
  return Var{idx};
}

Var Graph::relu(Var x) {
  Tensor out = val(x.idx);
  for (double& v : out.data()) v = std::max(v, 0.0);
  int xi = x.idx;
  int idx = push(std::move(out), wants(x.idx), nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [xi, idx](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    const Tensor& xv2 = g.val(xi);
    Tensor dx(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = xv2[i] > 0.0 ? dy[i] : 0.0;
    g.accum(xi, dx);
  };
  return Var{idx};
}

Var Graph::softmax_rows(Var x) {
  const Tensor& xv = val(x.idx);
  require_matrix(xv, "softmax_rows");
  std::size_t m = xv.rows(), n = xv.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mx = xv(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double e = std::exp(xv(i, j) - mx);
      out(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < n; ++j) out(i, j) /= sum;
  }
  int xi = x.idx;
  int idx = push(std::move(out), wants(x.idx), nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [xi, idx, m, n](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    const Tensor& s = g.val(idx);
    Tensor dx({m, n});
    for (std::size_t i = 0; i < m; ++i) {
      double inner = 0.0;
      for (std::size_t j = 0; j < n; ++j) inner += dy(i, j) * s(i, j);
      for (std::size_t j = 0; j < n; ++j) dx(i, j) = s(i, j) * (dy(i, j) - inner);
    }
    g.accum(xi, dx);
  };
  return Var{idx};
}

Var Graph::layer_norm(Var x, Var gain, Var bias) {
  const Tensor& xv = val(x.idx);
  const Tensor& gv = val(gain.idx);
  const Tensor& bv = val(bias.idx);
  std::size_t m = xv.rows(), n = xv.cols();
  if (gv.size() != n || bv.size() != n) {
    throw DimensionError("layer_norm: row length " + std::to_string(n) + " vs gain " +
                         gv.shape_str() + " bias " + bv.shape_str());
  }
  Tensor out({m, n});
  Tensor xhat({m, n});
  Tensor inv_std({m, 1});
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xv(i, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double d = xv(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    double is = 1.0 / std::sqrt(var + kLnEps);
    inv_std(i, 0) = is;
    for (std::size_t j = 0; j < n; ++j) {
      double h = (xv(i, j) - mean) * is;
      xhat(i, j) = h;
      out(i, j) = gv[j] * h + bv[j];
    }
  }
  bool ng = wants(x.idx) || wants(gain.idx) || wants(bias.idx);
  int xi = x.idx, gi = gain.idx, bi = bias.idx;
  int idx = push(std::move(out), ng, nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [xi, gi, bi, idx, m, n, xhat, inv_std](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    const Tensor& gv2 = g.val(gi);
    if (g.wants(xi)) {
      Tensor dx({m, n});
      for (std::size_t i = 0; i < m; ++i) {
        double mean_gdy = 0.0, mean_gdyh = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          double gd = gv2[j] * dy(i, j);
          mean_gdy += gd;
          mean_gdyh += gd * xhat(i, j);
        }
        mean_gdy /= static_cast<double>(n);
        mean_gdyh /= static_cast<double>(n);
        for (std::size_t j = 0; j < n; ++j) {
          double gd = gv2[j] * dy(i, j);
          dx(i, j) = (gd - mean_gdy - xhat(i, j) * mean_gdyh) * inv_std(i, 0);
        }
      }
      g.accum(xi, dx);
    }
    if (g.wants(gi)) {
      Tensor dg(g.val(gi).shape());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dg[j] += dy(i, j) * xhat(i, j);
      g.accum(gi, dg);
    }
    if (g.wants(bi)) {
      Tensor db(g.val(bi).shape());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) db[j] += dy(i, j);
      g.accum(bi, db);
    }
  };
  return Var{idx};
}

Var Graph::concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw ContractError("concat_rows: empty list");
  std::size_t n = val(xs[0].idx).cols();
  std::size_t m = 0;
  bool ng = false;
  for (Var v : xs) {
    const Tensor& t = val(v.idx);
    if (t.cols() != n) throw DimensionError("concat_rows: column mismatch " + t.shape_str());
    m += t.rows();
    ng = ng || wants(v.idx);
  }
  Tensor out({m, n});
  std::size_t r = 0;
  for (Var v : xs) {
    const Tensor& t = val(v.idx);
    std::copy(t.data().begin(), t.data().end(), out.data().begin() + static_cast<long>(r * n));
    r += t.rows();
  }
  std::vector<int> parents;
  for (Var v : xs) parents.push_back(v.idx);
  int idx = push(std::move(out), ng, nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [parents, idx, n](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    std::size_t r2 = 0;
    for (int p : parents) {
      const Tensor& t = g.val(p);
      if (g.wants(p)) {
        Tensor dp(t.shape());
        std::copy(dy.data().begin() + static_cast<long>(r2 * n),
                  dy.data().begin() + static_cast<long>((r2 + t.rows()) * n), dp.data().begin());
        g.accum(p, dp);
      }
      r2 += t.rows();
    }
  };
  return Var{idx};
}

Var Graph::concat_cols(const std::vector<Var>& xs) {
  if (xs.empty()) throw ContractError("concat_cols: empty list");
  std::size_t m = val(xs[0].idx).rows();
  std::size_t n = 0;
  bool ng = false;
  for (Var v : xs) {
    const Tensor& t = val(v.idx);
    if (t.rows() != m) throw DimensionError("concat_cols: row mismatch " + t.shape_str());
    n += t.cols();
    ng = ng || wants(v.idx);
  }
  Tensor out({m, n});
  std::size_t c = 0;
  for (Var v : xs) {
    const Tensor& t = val(v.idx);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < t.cols(); ++j) out(i, c + j) = t(i, j);
    c += t.cols();
  }
  std::vector<int> parents;
  for (Var v : xs) parents.push_back(v.idx);
  int idx = push(std::move(out), ng, nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [parents, idx, m](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    std::size_t c2 = 0;
    for (int p : parents) {
      const Tensor& t = g.val(p);
      if (g.wants(p)) {
        Tensor dp(t.shape());
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < t.cols(); ++j) dp(i, j) = dy(i, c2 + j);
        g.accum(p, dp);
      }
      c2 += t.cols();
    }
  };
  return Var{idx};
}

Var Graph::slice_rows(Var x, std::size_t r0, std::size_t r1) {
  const Tensor& xv = val(x.idx);
  std::size_t n = xv.cols();
  if (r1 > xv.rows() || r0 >= r1) throw DimensionError("slice_rows: bad range");
  Tensor out({r1 - r0, n});
  std::copy(xv.data().begin() + static_cast<long>(r0 * n),
            xv.data().begin() + static_cast<long>(r1 * n), out.data().begin());
  int xi = x.idx;
  int idx = push(std::move(out), wants(x.idx), nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [xi, idx, r0, n](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    for (std::size_t i = 0; i < dy.rows(); ++i)
      for (std::size_t j = 0; j < n; ++j) g.accum_at(xi, (r0 + i) * n + j, dy(i, j));
  };
  return Var{idx};
}

Var Graph::slice_cols(Var x, std::size_t c0, std::size_t c1) {
  const Tensor& xv = val(x.idx);
  std::size_t m = xv.rows(), n = xv.cols();
  if (c1 > n || c0 >= c1) throw DimensionError("slice_cols: bad range");
  Tensor out({m, c1 - c0});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = c0; j < c1; ++j) out(i, j - c0) = xv(i, j);
  int xi = x.idx;
  int idx = push(std::move(out), wants(x.idx), nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [xi, idx, c0, n](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    for (std::size_t i = 0; i < dy.rows(); ++i)
      for (std::size_t j = 0; j < dy.cols(); ++j) g.accum_at(xi, i * n + c0 + j, dy(i, j));
  };
  return Var{idx};
}

Var Graph::reshape(Var x, std::size_t r, std::size_t c) {
  const Tensor& xv = val(x.idx);
  if (r * c != xv.size()) throw DimensionError("reshape: size mismatch");
  Tensor out = xv.reshaped({r, c});
  int xi = x.idx;
  int idx = push(std::move(out), wants(x.idx), nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [xi, idx](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    Tensor dx = dy.reshaped(g.val(xi).shape());
    g.accum(xi, dx);
  };
  return Var{idx};
}

Var Graph::mean_rows(Var x) {
  const Tensor& xv = val(x.idx);
  std::size_t m = xv.rows(), n = xv.cols();
  Tensor out({1, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += xv(i, j);
  for (std::size_t j = 0; j < n; ++j) out[j] /= static_cast<double>(m);
  int xi = x.idx;
  int idx = push(std::move(out), wants(x.idx), nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [xi, idx, m, n](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    Tensor dx({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) dx(i, j) = dy[j] / static_cast<double>(m);
    g.accum(xi, dx);
  };
  return Var{idx};
}

Var Graph::sum_all(Var x) {
  const Tensor& xv = val(x.idx);
  double s = 0.0;
  for (double v : xv.data()) s += v;
  int xi = x.idx;
  int idx = push(Tensor::scalar(s), wants(x.idx), nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [xi, idx](Graph& g) {
    double dy = g.gbuf(idx)[0];
    Tensor dx(g.val(xi).shape());
    for (double& v : dx.data()) v = dy;
    g.accum(xi, dx);
  };
  return Var{idx};
}

Var Graph::mean_all(Var x) { return scale(sum_all(x), 1.0 / static_cast<double>(val(x.idx).size())); }

Var Graph::dot(Var a, Var b) {
  const Tensor& av = val(a.idx);
  const Tensor& bv = val(b.idx);
  if (av.size() != bv.size()) throw DimensionError("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  bool ng = wants(a.idx) || wants(b.idx);
  int ai = a.idx, bi = b.idx;
  int idx = push(Tensor::scalar(s), ng, nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [ai, bi, idx](Graph& g) {
    double dy = g.gbuf(idx)[0];
    const Tensor& av2 = g.val(ai);
    const Tensor& bv2 = g.val(bi);
    if (g.wants(ai)) {
      Tensor da(av2.shape());
      for (std::size_t i = 0; i < da.size(); ++i) da[i] = dy * bv2[i];
      g.accum(ai, da);
    }
    if (g.wants(bi)) {
      Tensor db(bv2.shape());
      for (std::size_t i = 0; i < db.size(); ++i) db[i] = dy * av2[i];
      g.accum(bi, db);
    }
  };
  return Var{idx};
}

Var Graph::mse(Var a, Var b) {
  const Tensor& av = val(a.idx);
  const Tensor& bv = val(b.idx);
  if (av.size() != bv.size()) {
    throw DimensionError("mse: " + av.shape_str() + " vs " + bv.shape_str());
  }
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    double d = av[i] - bv[i];
    s += d * d;
  }
  s /= static_cast<double>(av.size());
  bool ng = wants(a.idx) || wants(b.idx);
  int ai = a.idx, bi = b.idx;
  int idx = push(Tensor::scalar(s), ng, nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [ai, bi, idx](Graph& g) {
    double dy = g.gbuf(idx)[0];
    const Tensor& av2 = g.val(ai);
    const Tensor& bv2 = g.val(bi);
    double c = 2.0 * dy / static_cast<double>(av2.size());
    if (g.wants(ai)) {
      Tensor da(av2.shape());
      for (std::size_t i = 0; i < da.size(); ++i) da[i] = c * (av2[i] - bv2[i]);
      g.accum(ai, da);
    }
    if (g.wants(bi)) {
      Tensor db(bv2.shape());
      for (std::size_t i = 0; i < db.size(); ++i) db[i] = c * (bv2[i] - av2[i]);
      g.accum(bi, db);
    }
  };
  return Var{idx};
}

Var Graph::cosine(Var a, Var b, double degenerate) {
  const Tensor& av = val(a.idx);
  const Tensor& bv = val(b.idx);
  if (av.size() != bv.size()) throw DimensionError("cosine: size mismatch");
  double dot_ab = 0.0, na2 = 0.0, nb2 = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    dot_ab += av[i] * bv[i];
    na2 += av[i] * av[i];
    nb2 += bv[i] * bv[i];
  }
  if (na2 == 0.0 || nb2 == 0.0) {
    // Convention for zero vectors; constant, no gradient.
    return Var{push(Tensor::scalar(degenerate), false, nullptr)};
  }
  double na = std::sqrt(na2), nb = std::sqrt(nb2);
  double cos_ab = dot_ab / (na * nb);
  bool ng = wants(a.idx) || wants(b.idx);
  int ai = a.idx, bi = b.idx;
  int idx = push(Tensor::scalar(cos_ab), ng, nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [ai, bi, idx, na, nb, cos_ab](Graph& g) {
    double dy = g.gbuf(idx)[0];
    const Tensor& av2 = g.val(ai);
    const Tensor& bv2 = g.val(bi);
    if (g.wants(ai)) {
      Tensor da(av2.shape());
      for (std::size_t i = 0; i < da.size(); ++i) {
        da[i] = dy * (bv2[i] / (na * nb) - cos_ab * av2[i] / (na * na));
      }
      g.accum(ai, da);
    }
    if (g.wants(bi)) {
      Tensor db(bv2.shape());
      for (std::size_t i = 0; i < db.size(); ++i) {
        db[i] = dy * (av2[i] / (na * nb) - cos_ab * bv2[i] / (nb * nb));
      }
      g.accum(bi, db);
    }
  };
  return Var{idx};
}

Var Graph::logsumexp_rows(Var x) {
  const Tensor& xv = val(x.idx);
  std::size_t m = xv.rows(), n = xv.cols();
  Tensor out({m, 1});
  for (std::size_t i = 0; i < m; ++i) {
    double mx = xv(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(xv(i, j) - mx);
    out(i, 0) = mx + std::log(s);
  }
  int xi = x.idx;
  int idx = push(std::move(out), wants(x.idx), nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [xi, idx, m, n](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    const Tensor& xv2 = g.val(xi);
    const Tensor& yv = g.val(idx);
    Tensor dx({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) dx(i, j) = dy(i, 0) * std::exp(xv2(i, j) - yv(i, 0));
    g.accum(xi, dx);
  };
  return Var{idx};
}

Var Graph::diag(Var x) {
  const Tensor& xv = val(x.idx);
  std::size_t m = xv.rows();
  if (xv.cols() != m) throw DimensionError("diag: square matrix required, got " + xv.shape_str());
  Tensor out({m, 1});
  for (std::size_t i = 0; i < m; ++i) out(i, 0) = xv(i, i);
  int xi = x.idx;
  int idx = push(std::move(out), wants(x.idx), nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [xi, idx, m](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    for (std::size_t i = 0; i < m; ++i) g.accum_at(xi, i * m + i, dy(i, 0));
  };
  return Var{idx};
}

Var Graph::dropout(Var x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  const Tensor& xv = val(x.idx);
  double keep = 1.0 - rate;
  Tensor mask(xv.shape());
  for (double& v : mask.data()) v = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * mask[i];
  int xi = x.idx;
  int idx = push(std::move(out), wants(x.idx), nullptr);
  nodes_[static_cast<std::size_t>(idx)].back = [xi, idx, mask](Graph& g) {
    const Tensor& dy = g.gbuf(idx);
    Tensor dx(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * mask[i];
    g.accum(xi, dx);
  };
  return Var{idx};
}

void Graph::backward(Var loss) {
  const Tensor& lv = val(loss.idx);
  if (lv.size() != 1) {
    throw ContractError("gradient evaluation requires a scalar loss, got " + lv.shape_str());
  }
  if (!std::isfinite(lv[0])) throw ContractError("loss is not finite");
  if (ran_backward_) throw ContractError("backward already ran on this graph");
  ran_backward_ = true;
  Node& ln = nodes_[static_cast<std::size_t>(loss.idx)];
  if (!ln.needs_grad) return;  // loss does not depend on any trainable parameter
  ln.grad_buf[0] = 1.0;
  for (int i = loss.idx; i >= 0; --i) {
    Node& node = nodes_[static_cast<std::size_t>(i)];
    if (node.needs_grad && node.back) node.back(*this);
  }
}

const Tensor& Graph::value(Var v) const { return nodes_[static_cast<std::size_t>(v.idx)].value; }

Tensor Graph::grad(Var v) const {
  const Node& node = nodes_[static_cast<std::size_t>(v.idx)];
  if (!node.needs_grad) return Tensor::zeros(node.value.shape());
  return node.grad_buf;
}

std::map<std::string, Tensor> Graph::param_grads() const {
  std::map<std::string, Tensor> out;
  for (const auto& [idx, name] : node_param_names_) {
    out.emplace(name, grad(Var{idx}));
  }
  return out;
}

Var multihead_attention(Graph& g, Var q_in, Var kv_in, Var wq, Var wk, Var wv, Var wo,
                        std::size_t heads) {
  std::size_t d = g.value(q_in).cols();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  std::size_t dh = d / heads;
  Var q = g.matmul(q_in, wq);
  Var k = g.matmul(kv_in, wk);
  Var v = g.matmul(kv_in, wv);
  std::vector<Var> head_outs;
  head_outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = g.slice_cols(q, h * dh, (h + 1) * dh);
    Var kh = g.slice_cols(k, h * dh, (h + 1) * dh);
    Var vh = g.slice_cols(v, h * dh, (h + 1) * dh);
    Var scores = g.scale(g.matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
    Var attn = g.softmax_rows(scores);
    head_outs.push_back(g.matmul(attn, vh));
  }
  return g.matmul(g.concat_cols(head_outs), wo);
}

std::map<std::string, Tensor> finite_diff_gradient(
    const std::function<double(ParamStore&)>& loss_fn, ParamStore& params, double h) {
  std::map<std::string, Tensor> out;
  for (const std::string& name : params.trainable_names()) {
    Tensor& p = params.get(name);
    Tensor grad(p.shape());
    for (std::size_t i = 0; i < p.size(); ++i) {
      double saved = p[i];
      p[i] = saved + h;
      double f_plus = loss_fn(params);
      p[i] = saved - h;
      double f_minus = loss_fn(params);
      p[i] = saved;
      grad[i] = (f_plus - f_minus) / (2.0 * h);
    }
    out.emplace(name, std::move(grad));
  }
  return out;
}

double max_rel_gradient_error(const std::map<std::string, Tensor>& analytic,
                              const std::map<std::string, Tensor>& numeric) {
  // Entries below 1e-5 compare against that floor instead of their own
  // magnitude; central differences carry ~1e-10 of roundoff noise, which
  // would otherwise dominate the ratio for negligible gradients.
  double worst = 0.0;
  for (const auto& [name, fd] : numeric) {
    auto it = analytic.find(name);
    if (it == analytic.end()) throw ContractError("missing analytic gradient for " + name);
    const Tensor& an = it->second;
    for (std::size_t i = 0; i < fd.size(); ++i) {
      double denom = std::max({std::fabs(an[i]), std::fabs(fd[i]), 1e-5});
      worst = std::max(worst, std::fabs(an[i] - fd[i]) / denom);
    }
  }
  return worst;
}

}  // namespace sigma
