#include "uvlm/graph.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace uvlm::nn {

namespace {

bool any_requires(const std::vector<Var>& ps) {
  for (const auto& p : ps)
    if (p->requires_grad) return true;
  return false;
}

Var make(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  n->requires_grad = any_requires(n->parents);
  if (n->requires_grad) n->backward_fn = std::move(fn);
  return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a->value.shape_str() +
                                " vs " + b->value.shape_str());
}

}  // namespace

Var constant(Tensor v) { return leaf(std::move(v), false); }

Var leaf(Tensor v, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  return n;
}

void backward(const Var& loss) {
  if (loss->value.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
  // Iterative DFS topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.get(), 0}};
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  loss->ensure_grad().data[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a->value;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return make(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a->value;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
  return make(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a->value;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return make(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * a->value[i];
    }
  });
}

Var scale(const Var& a, double c) {
  Tensor out = a->value;
  for (auto& v : out.data) v *= c;
  return make(std::move(out), {a}, [a, c](Node& n) {
    auto& g = a->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += c * n.grad[i];
  });
}

Var sum_all(const Var& a) {
  double s = 0.0;
  for (double v : a->value.data) s += v;
  return make(Tensor::scalar(s), {a}, [a](Node& n) {
    auto& g = a->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[0];
  });
}

Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a->value.numel())); }

Var leaky_relu(const Var& a, double slope) {
  Tensor out = a->value;
  for (auto& v : out.data) v = v > 0.0 ? v : slope * v;
  return make(std::move(out), {a}, [a, slope](Node& n) {
    auto& g = a->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      g[i] += n.grad[i] * (a->value[i] > 0.0 ? 1.0 : slope);
  });
}

Var sigmoid(const Var& a) {
  Tensor out = a->value;
  for (auto& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
  return make(std::move(out), {a}, [a](Node& n) {
    auto& g = a->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      double s = n.value[i];
      g[i] += n.grad[i] * s * (1.0 - s);
    }
  });
}

Var reshape(const Var& a, std::vector<int> shape) {
  if (Tensor::count(shape) != a->value.numel())
    throw std::invalid_argument("reshape: element count mismatch");
  Tensor out(shape, a->value.data);
  return make(std::move(out), {a}, [a](Node& n) {
    auto& g = a->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
  });
}

// ---------------------------------------------------------------- 2-D algebra

Var matmul(const Var& a, const Var& b) {
  if (a->value.ndim() != 2 || b->value.ndim() != 2 || a->value.dim(1) != b->value.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + a->value.shape_str() + " x " +
                                b->value.shape_str());
  const int m = a->value.dim(0), k = a->value.dim(1), n2 = b->value.dim(1);
  Tensor out({m, n2});
  const double* A = a->value.data.data();
  const double* B = b->value.data.data();
  double* C = out.data.data();
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B + p * n2;
      double* crow = C + i * n2;
      for (int j = 0; j < n2; ++j) crow[j] += av * brow[j];
    }
  return make(std::move(out), {a, b}, [a, b, m, k, n2](Node& n) {
    const double* G = n.grad.data.data();
    if (a->requires_grad) {
      auto& ga = a->ensure_grad();
      const double* B = b->value.data.data();
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          double s = 0.0;
          const double* grow = G + i * n2;
          const double* brow = B + p * n2;
          for (int j = 0; j < n2; ++j) s += grow[j] * brow[j];
          ga[i * k + p] += s;
        }
    }
    if (b->requires_grad) {
      auto& gb = b->ensure_grad();
      const double* A = a->value.data.data();
      for (int i = 0; i < m; ++i) {
        const double* grow = G + i * n2;
        for (int p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          if (av == 0.0) continue;
          double* gbrow = gb.data.data() + p * n2;
          for (int j = 0; j < n2; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
}

Var transpose2d(const Var& a) {
  const int r = a->value.dim(0), c = a->value.dim(1);
  Tensor out({c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[j * r + i] = a->value[i * c + j];
  return make(std::move(out), {a}, [a, r, c](Node& n) {
    auto& g = a->ensure_grad();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) g[i * c + j] += n.grad[j * r + i];
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  Var y = matmul(x, w);
  const int rows = y->value.dim(0), cols = y->value.dim(1);
  if (b->value.numel() != cols) throw std::invalid_argument("linear: bias size mismatch");
  Tensor out = y->value;
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out[i * cols + j] += b->value[j];
  return make(std::move(out), {y, b}, [y, b, rows, cols](Node& n) {
    if (y->requires_grad) {
      auto& g = y->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) g[j] += n.grad[i * cols + j];
    }
  });
}

Var slice_cols(const Var& x, int c0, int c1) {
  const int r = x->value.dim(0), c = x->value.dim(1), w = c1 - c0;
  Tensor out({r, w});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < w; ++j) out[i * w + j] = x->value[i * c + c0 + j];
  return make(std::move(out), {x}, [x, r, c, c0, w](Node& n) {
    auto& g = x->ensure_grad();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j) g[i * c + c0 + j] += n.grad[i * w + j];
  });
}

Var concat_cols(const std::vector<Var>& xs) {
  const int r = xs[0]->value.dim(0);
  int total = 0;
  for (const auto& x : xs) total += x->value.dim(1);
  Tensor out({r, total});
  int off = 0;
  for (const auto& x : xs) {
    const int w = x->value.dim(1);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j) out[i * total + off + j] = x->value[i * w + j];
    off += w;
  }
  return make(std::move(out), {xs}, [xs, r, total](Node& n) {
    int off = 0;
    for (const auto& x : xs) {
      const int w = x->value.dim(1);
      if (x->requires_grad) {
        auto& g = x->ensure_grad();
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < w; ++j) g[i * w + j] += n.grad[i * total + off + j];
      }
      off += w;
    }
  });
}

Var slice_rows(const Var& x, int r0, int r1) {
  const int c = x->value.dim(1), h = r1 - r0;
  Tensor out({h, c});
  std::copy_n(x->value.data.data() + static_cast<std::int64_t>(r0) * c,
              static_cast<std::int64_t>(h) * c, out.data.data());
  return make(std::move(out), {x}, [x, r0, h, c](Node& n) {
    auto& g = x->ensure_grad();
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * c; ++i)
      g[static_cast<std::int64_t>(r0) * c + i] += n.grad[i];
  });
}

Var concat_rows(const std::vector<Var>& xs) {
  const int c = xs[0]->value.dim(1);
  int total = 0;
  for (const auto& x : xs) total += x->value.dim(0);
  Tensor out({total, c});
  std::int64_t off = 0;
  for (const auto& x : xs) {
    std::copy(x->value.data.begin(), x->value.data.end(), out.data.begin() + off);
    off += x->value.numel();
  }
  return make(std::move(out), {xs}, [xs](Node& n) {
    std::int64_t off = 0;
    for (const auto& x : xs) {
      if (x->requires_grad) {
        auto& g = x->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[off + i];
      }
      off += x->value.numel();
    }
  });
}

Var pad_rows(const Var& x, int rows) {
  const int r = x->value.dim(0), c = x->value.dim(1);
  if (rows < r) throw std::invalid_argument("pad_rows: target smaller than input");
  Tensor out({rows, c});
  std::copy(x->value.data.begin(), x->value.data.end(), out.data.begin());
  return make(std::move(out), {x}, [x, r, c](Node& n) {
    auto& g = x->ensure_grad();
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(r) * c; ++i) g[i] += n.grad[i];
  });
}

Var add_to_rows(const Var& x, const Var& delta, int r0) {
  const int c = x->value.dim(1), dr = delta->value.dim(0);
  if (delta->value.dim(1) != c || r0 + dr > x->value.dim(0))
    throw std::invalid_argument("add_to_rows: block out of range");
  Tensor out = x->value;
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(dr) * c; ++i)
    out[static_cast<std::int64_t>(r0) * c + i] += delta->value[i];
  return make(std::move(out), {x, delta}, [x, delta, r0, dr, c](Node& n) {
    if (x->requires_grad) {
      auto& g = x->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
    if (delta->requires_grad) {
      auto& g = delta->ensure_grad();
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(dr) * c; ++i)
        g[i] += n.grad[static_cast<std::int64_t>(r0) * c + i];
    }
  });
}

// ---------------------------------------------------------------- softmax / norm

Var softmax_rows_masked(const Var& scores, const Tensor& additive_mask) {
  const int r = scores->value.dim(0), c = scores->value.dim(1);
  const bool masked = additive_mask.numel() > 0;
  if (masked && !(additive_mask.shape == scores->value.shape))
    throw std::invalid_argument("softmax mask shape mismatch");
  Tensor out({r, c});
  for (int i = 0; i < r; ++i) {
    double mx = -1e300;
    for (int j = 0; j < c; ++j) {
      double v = scores->value[i * c + j] + (masked ? additive_mask[i * c + j] : 0.0);
      mx = std::max(mx, v);
    }
    double z = 0.0;
    for (int j = 0; j < c; ++j) {
      double v = scores->value[i * c + j] + (masked ? additive_mask[i * c + j] : 0.0);
      double e = std::exp(v - mx);
      out[i * c + j] = e;
      z += e;
    }
    for (int j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  return make(std::move(out), {scores}, [scores, r, c](Node& n) {
    auto& g = scores->ensure_grad();
    for (int i = 0; i < r; ++i) {
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += n.grad[i * c + j] * n.value[i * c + j];
      for (int j = 0; j < c; ++j)
        g[i * c + j] += n.value[i * c + j] * (n.grad[i * c + j] - dot);
    }
  });
}

Var softmax_rows(const Var& scores) { return softmax_rows_masked(scores, Tensor{}); }

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const int r = x->value.dim(0), d = x->value.dim(1);
  if (gamma->value.numel() != d || beta->value.numel() != d)
    throw std::invalid_argument("layer_norm: affine size mismatch");
  Tensor out({r, d});
  Tensor xhat({r, d});
  std::vector<double> inv_std(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += x->value[i * d + j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double c = x->value[i * d + j] - mean;
      var += c * c;
    }
    var /= d;
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < d; ++j) {
      double h = (x->value[i * d + j] - mean) * is;
      xhat[i * d + j] = h;
      out[i * d + j] = gamma->value[j] * h + beta->value[j];
    }
  }
  auto xh = std::make_shared<Tensor>(std::move(xhat));
  auto is = std::make_shared<std::vector<double>>(std::move(inv_std));
  return make(std::move(out), {x, gamma, beta}, [x, gamma, beta, xh, is, r, d](Node& n) {
    if (gamma->requires_grad) {
      auto& g = gamma->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < d; ++j) g[j] += n.grad[i * d + j] * (*xh)[i * d + j];
    }
    if (beta->requires_grad) {
      auto& g = beta->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < d; ++j) g[j] += n.grad[i * d + j];
    }
    if (x->requires_grad) {
      auto& g = x->ensure_grad();
      for (int i = 0; i < r; ++i) {
        double sum_dy = 0.0, sum_dyh = 0.0;
        for (int j = 0; j < d; ++j) {
          double dy = n.grad[i * d + j] * gamma->value[j];
          sum_dy += dy;
          sum_dyh += dy * (*xh)[i * d + j];
        }
        for (int j = 0; j < d; ++j) {
          double dy = n.grad[i * d + j] * gamma->value[j];
          g[i * d + j] += (*is)[static_cast<std::size_t>(i)] *
                          (dy - sum_dy / d - (*xh)[i * d + j] * sum_dyh / d);
        }
      }
    }
  });
}

// ---------------------------------------------------------------- volumetric

Var conv3d(const Var& x, const Var& w, const Var& b, int stride) {
  const int ci = x->value.dim(0), D = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  const int co = w->value.dim(0);
  if (w->value.dim(1) != ci) throw std::invalid_argument("conv3d: channel mismatch");
  const int OD = (D + 2 - 3) / stride + 1, OH = (H + 2 - 3) / stride + 1,
            OW = (W + 2 - 3) / stride + 1;
  Tensor out({co, OD, OH, OW});
  const auto& X = x->value.data;
  const auto& Wt = w->value.data;
  auto in_idx = [ci, D, H, W](int c, int z, int y, int xx) {
    return ((static_cast<std::int64_t>(c) * D + z) * H + y) * W + xx;
  };
  // Row kernels: for each tap, the inner loop runs over a full output row so
  // the compiler can vectorize it; the valid ow window for tap offset
  // xoff = kx-1 is 0 <= ow*stride + xoff <= W-1.
  auto ow_window = [stride, W, OW](int xoff, int& lo, int& hi) {
    lo = xoff < 0 ? (-xoff + stride - 1) / stride : 0;
    hi = std::min(OW - 1, (W - 1 - xoff) / stride);
  };
  for (int oc = 0; oc < co; ++oc) {
    const double bias = b->value[oc];
    for (int od = 0; od < OD; ++od) {
      const int z0 = od * stride - 1;
      for (int oh = 0; oh < OH; ++oh) {
        const int y0 = oh * stride - 1;
        double* orow = out.data.data() + ((static_cast<std::int64_t>(oc) * OD + od) * OH + oh) * OW;
        std::fill(orow, orow + OW, bias);
        for (int ic = 0; ic < ci; ++ic) {
          const double* wk = Wt.data() + ((static_cast<std::int64_t>(oc) * ci + ic) * 27);
          for (int kz = 0; kz < 3; ++kz) {
            const int z = z0 + kz;
            if (z < 0 || z >= D) continue;
            for (int ky = 0; ky < 3; ++ky) {
              const int y = y0 + ky;
              if (y < 0 || y >= H) continue;
              const double* xr = X.data() + in_idx(ic, z, y, 0);
              for (int kx = 0; kx < 3; ++kx) {
                const double wv = wk[(kz * 3 + ky) * 3 + kx];
                const int xoff = kx - 1;
                int lo, hi;
                ow_window(xoff, lo, hi);
                if (stride == 1) {
                  const double* xs = xr + xoff;
                  for (int ow = lo; ow <= hi; ++ow) orow[ow] += wv * xs[ow];
                } else {
                  for (int ow = lo; ow <= hi; ++ow) orow[ow] += wv * xr[ow * stride + xoff];
                }
              }
            }
          }
        }
      }
    }
  }
  return make(std::move(out), {x, w, b}, [x, w, b, ci, co, D, H, W, OD, OH, OW, stride](Node& n) {
    const auto& G = n.grad.data;
    auto in_idx = [ci, D, H, W](int c, int z, int y, int xx) {
      return ((static_cast<std::int64_t>(c) * D + z) * H + y) * W + xx;
    };
    auto ow_window = [stride, W, OW](int xoff, int& lo, int& hi) {
      lo = xoff < 0 ? (-xoff + stride - 1) / stride : 0;
      hi = std::min(OW - 1, (W - 1 - xoff) / stride);
    };
    if (b->requires_grad) {
      auto& gb = b->ensure_grad();
      for (int oc = 0; oc < co; ++oc) {
        double s = 0.0;
        const double* gr = G.data() + static_cast<std::int64_t>(oc) * OD * OH * OW;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(OD) * OH * OW; ++i) s += gr[i];
        gb[oc] += s;
      }
    }
    const bool need_x = x->requires_grad, need_w = w->requires_grad;
    if (!need_x && !need_w) return;
    if (need_x) x->ensure_grad();
    if (need_w) w->ensure_grad();
    for (int oc = 0; oc < co; ++oc)
      for (int od = 0; od < OD; ++od) {
        const int z0 = od * stride - 1;
        for (int oh = 0; oh < OH; ++oh) {
          const int y0 = oh * stride - 1;
          const double* grow =
              G.data() + ((static_cast<std::int64_t>(oc) * OD + od) * OH + oh) * OW;
          for (int ic = 0; ic < ci; ++ic) {
            const std::int64_t wbase = (static_cast<std::int64_t>(oc) * ci + ic) * 27;
            for (int kz = 0; kz < 3; ++kz) {
              const int z = z0 + kz;
              if (z < 0 || z >= D) continue;
              for (int ky = 0; ky < 3; ++ky) {
                const int y = y0 + ky;
                if (y < 0 || y >= H) continue;
                const std::int64_t ri = in_idx(ic, z, y, 0);
                for (int kx = 0; kx < 3; ++kx) {
                  const int xoff = kx - 1;
                  int lo, hi;
                  ow_window(xoff, lo, hi);
                  const std::int64_t wi = wbase + (kz * 3 + ky) * 3 + kx;
                  if (need_x) {
                    const double wv = w->value[wi];
                    double* xg = x->grad.data.data() + ri;
                    if (stride == 1) {
                      double* xs = xg + xoff;
                      for (int ow = lo; ow <= hi; ++ow) xs[ow] += wv * grow[ow];
                    } else {
                      for (int ow = lo; ow <= hi; ++ow) xg[ow * stride + xoff] += wv * grow[ow];
                    }
                  }
                  if (need_w) {
                    const double* xr = x->value.data.data() + ri;
                    double s = 0.0;
                    if (stride == 1) {
                      const double* xs = xr + xoff;
                      for (int ow = lo; ow <= hi; ++ow) s += xs[ow] * grow[ow];
                    } else {
                      for (int ow = lo; ow <= hi; ++ow) s += xr[ow * stride + xoff] * grow[ow];
                    }
                    w->grad[wi] += s;
                  }
                }
              }
            }
          }
        }
      }
  });
}

Var conv1x1x1(const Var& x, const Var& w, const Var& b) {
  const int ci = x->value.dim(0), D = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  const int co = w->value.dim(0);
  const std::int64_t S = static_cast<std::int64_t>(D) * H * W;
  Tensor out({co, D, H, W});
  for (int oc = 0; oc < co; ++oc) {
    double* orow = out.data.data() + oc * S;
    std::fill(orow, orow + S, b->value[oc]);
    for (int ic = 0; ic < ci; ++ic) {
      const double wv = w->value[oc * ci + ic];
      const double* xr = x->value.data.data() + ic * S;
      for (std::int64_t i = 0; i < S; ++i) orow[i] += wv * xr[i];
    }
  }
  return make(std::move(out), {x, w, b}, [x, w, b, ci, co, S](Node& n) {
    if (b->requires_grad) {
      auto& gb = b->ensure_grad();
      for (int oc = 0; oc < co; ++oc) {
        double s = 0.0;
        const double* gr = n.grad.data.data() + oc * S;
        for (std::int64_t i = 0; i < S; ++i) s += gr[i];
        gb[oc] += s;
      }
    }
    if (w->requires_grad) {
      auto& gw = w->ensure_grad();
      for (int oc = 0; oc < co; ++oc)
        for (int ic = 0; ic < ci; ++ic) {
          double s = 0.0;
          const double* gr = n.grad.data.data() + oc * S;
          const double* xr = x->value.data.data() + ic * S;
          for (std::int64_t i = 0; i < S; ++i) s += gr[i] * xr[i];
          gw[oc * ci + ic] += s;
        }
    }
    if (x->requires_grad) {
      auto& gx = x->ensure_grad();
      for (int ic = 0; ic < ci; ++ic) {
        double* gr = gx.data.data() + ic * S;
        for (int oc = 0; oc < co; ++oc) {
          const double wv = w->value[oc * ci + ic];
          const double* go = n.grad.data.data() + oc * S;
          for (std::int64_t i = 0; i < S; ++i) gr[i] += wv * go[i];
        }
      }
    }
  });
}

Var conv_transpose3d_k2s2(const Var& x, const Var& w) {
  // w shape [Cin, Cout, 2, 2, 2]; kernel == stride so output cells are disjoint.
  const int ci = x->value.dim(0), D = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  const int co = w->value.dim(1);
  const int OD = 2 * D, OH = 2 * H, OW = 2 * W;
  Tensor out({co, OD, OH, OW});
  for (int oc = 0; oc < co; ++oc)
    for (int z = 0; z < D; ++z)
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx)
          for (int kz = 0; kz < 2; ++kz)
            for (int ky = 0; ky < 2; ++ky)
              for (int kx = 0; kx < 2; ++kx) {
                double acc = 0.0;
                for (int ic = 0; ic < ci; ++ic)
                  acc += x->value[((static_cast<std::int64_t>(ic) * D + z) * H + y) * W + xx] *
                         w->value[(((static_cast<std::int64_t>(ic) * co + oc) * 2 + kz) * 2 + ky) * 2 + kx];
                out[((static_cast<std::int64_t>(oc) * OD + 2 * z + kz) * OH + 2 * y + ky) * OW +
                    2 * xx + kx] = acc;
              }
  return make(std::move(out), {x, w}, [x, w, ci, co, D, H, W, OD, OH, OW](Node& n) {
    const bool need_x = x->requires_grad, need_w = w->requires_grad;
    if (need_x) x->ensure_grad();
    if (need_w) w->ensure_grad();
    for (int oc = 0; oc < co; ++oc)
      for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
          for (int xx = 0; xx < W; ++xx)
            for (int kz = 0; kz < 2; ++kz)
              for (int ky = 0; ky < 2; ++ky)
                for (int kx = 0; kx < 2; ++kx) {
                  const double go =
                      n.grad[((static_cast<std::int64_t>(oc) * OD + 2 * z + kz) * OH + 2 * y + ky) *
                                 OW +
                             2 * xx + kx];
                  if (go == 0.0) continue;
                  for (int ic = 0; ic < ci; ++ic) {
                    const std::int64_t xi =
                        ((static_cast<std::int64_t>(ic) * D + z) * H + y) * W + xx;
                    const std::int64_t wi =
                        (((static_cast<std::int64_t>(ic) * co + oc) * 2 + kz) * 2 + ky) * 2 + kx;
                    if (need_x) x->grad[xi] += go * w->value[wi];
                    if (need_w) w->grad[wi] += go * x->value[xi];
                  }
                }
  });
}

Var standardize3d(const Var& x) {
  const int c = x->value.dim(0);
  return instance_norm3d(x, constant(Tensor::full({c}, 1.0)), constant(Tensor::zeros({c})));
}

Var instance_norm3d(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const int C = x->value.dim(0);
  const std::int64_t S = x->value.numel() / C;
  Tensor out(x->value.shape);
  std::vector<double> means(static_cast<std::size_t>(C)), inv_stds(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    const double* xp = x->value.data.data() + c * S;
    double mean = 0.0;
    for (std::int64_t i = 0; i < S; ++i) mean += xp[i];
    mean /= static_cast<double>(S);
    double var = 0.0;
    for (std::int64_t i = 0; i < S; ++i) {
      double d = xp[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(S);
    const double is = 1.0 / std::sqrt(var + eps);
    means[static_cast<std::size_t>(c)] = mean;
    inv_stds[static_cast<std::size_t>(c)] = is;
    double* op = out.data.data() + c * S;
    for (std::int64_t i = 0; i < S; ++i)
      op[i] = gamma->value[c] * (xp[i] - mean) * is + beta->value[c];
  }
  auto mu = std::make_shared<std::vector<double>>(std::move(means));
  auto is = std::make_shared<std::vector<double>>(std::move(inv_stds));
  return make(std::move(out), {x, gamma, beta}, [x, gamma, beta, mu, is, C, S](Node& n) {
    for (int c = 0; c < C; ++c) {
      const double* xp = x->value.data.data() + c * S;
      const double* gp = n.grad.data.data() + c * S;
      const double m = (*mu)[static_cast<std::size_t>(c)];
      const double s = (*is)[static_cast<std::size_t>(c)];
      if (gamma->requires_grad || beta->requires_grad) {
        double sg = 0.0, sb = 0.0;
        for (std::int64_t i = 0; i < S; ++i) {
          sg += gp[i] * (xp[i] - m) * s;
          sb += gp[i];
        }
        if (gamma->requires_grad) gamma->ensure_grad()[c] += sg;
        if (beta->requires_grad) beta->ensure_grad()[c] += sb;
      }
      if (x->requires_grad) {
        auto& gx = x->ensure_grad();
        double sum_dy = 0.0, sum_dyh = 0.0;
        for (std::int64_t i = 0; i < S; ++i) {
          sum_dy += gp[i];
          sum_dyh += gp[i] * (xp[i] - m) * s;
        }
        const double g = gamma->value[c];
        const double Sd = static_cast<double>(S);
        double* gxp = gx.data.data() + c * S;
        for (std::int64_t i = 0; i < S; ++i) {
          const double xh = (xp[i] - m) * s;
          gxp[i] += g * s * (gp[i] - sum_dy / Sd - xh * sum_dyh / Sd);
        }
      }
    }
  });
}

Var concat_channels(const Var& a, const Var& b) {
  if (a->value.shape.size() != 4 || b->value.shape.size() != 4)
    throw std::invalid_argument("concat_channels: need 4-D tensors");
  for (int i = 1; i < 4; ++i)
    if (a->value.dim(i) != b->value.dim(i))
      throw std::invalid_argument("concat_channels: spatial mismatch");
  const int ca = a->value.dim(0), cb = b->value.dim(0);
  Tensor out({ca + cb, a->value.dim(1), a->value.dim(2), a->value.dim(3)});
  std::copy(a->value.data.begin(), a->value.data.end(), out.data.begin());
  std::copy(b->value.data.begin(), b->value.data.end(), out.data.begin() + a->value.numel());
  return make(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      const std::int64_t off = a->value.numel();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[off + i];
    }
  });
}

namespace {
// torch-style adaptive bins: [floor(o*I/O), ceil((o+1)*I/O))
inline int bin_lo(int o, int I, int O) { return (o * I) / O; }
inline int bin_hi(int o, int I, int O) { return ((o + 1) * I + O - 1) / O; }
}  // namespace

namespace {

// Index permutation for a grid mirror; shared by forward and backward.
inline std::int64_t flip_index(std::int64_t i, int D, int H, int W, bool fd, bool fh, bool fw) {
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  const std::int64_t c = i / (D * plane);
  std::int64_t r = i % (D * plane);
  int z = static_cast<int>(r / plane);
  r %= plane;
  int y = static_cast<int>(r / W);
  int xx = static_cast<int>(r % W);
  if (fd) z = D - 1 - z;
  if (fh) y = H - 1 - y;
  if (fw) xx = W - 1 - xx;
  return ((c * D + z) * static_cast<std::int64_t>(H) + y) * W + xx;
}

}  // namespace

Var flip3d(const Var& x, bool fd, bool fh, bool fw) {
  if (x->value.shape.size() != 4) throw std::invalid_argument("flip3d: expects [C,D,H,W]");
  if (!fd && !fh && !fw) return x;
  const int D = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  Tensor out(x->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[flip_index(i, D, H, W, fd, fh, fw)] = x->value[i];
  return make(std::move(out), {x}, [x, D, H, W, fd, fh, fw](Node& n) {
    auto& g = x->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i)
      g[i] += n.grad[flip_index(i, D, H, W, fd, fh, fw)];
  });
}

Var adaptive_avg_pool3d(const Var& x, int od, int oh, int ow) {
  const int C = x->value.dim(0), D = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  Tensor out({C, od, oh, ow});
  for (int c = 0; c < C; ++c)
    for (int z = 0; z < od; ++z)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          const int z0 = bin_lo(z, D, od), z1 = bin_hi(z, D, od);
          const int y0 = bin_lo(y, H, oh), y1 = bin_hi(y, H, oh);
          const int x0 = bin_lo(xx, W, ow), x1 = bin_hi(xx, W, ow);
          double s = 0.0;
          for (int iz = z0; iz < z1; ++iz)
            for (int iy = y0; iy < y1; ++iy)
              for (int ix = x0; ix < x1; ++ix)
                s += x->value[((static_cast<std::int64_t>(c) * D + iz) * H + iy) * W + ix];
          out[((static_cast<std::int64_t>(c) * od + z) * oh + y) * ow + xx] =
              s / ((z1 - z0) * (y1 - y0) * (x1 - x0));
        }
  return make(std::move(out), {x}, [x, C, D, H, W, od, oh, ow](Node& n) {
    auto& g = x->ensure_grad();
    for (int c = 0; c < C; ++c)
      for (int z = 0; z < od; ++z)
        for (int y = 0; y < oh; ++y)
          for (int xx = 0; xx < ow; ++xx) {
            const int z0 = bin_lo(z, D, od), z1 = bin_hi(z, D, od);
            const int y0 = bin_lo(y, H, oh), y1 = bin_hi(y, H, oh);
            const int x0 = bin_lo(xx, W, ow), x1 = bin_hi(xx, W, ow);
            const double go =
                n.grad[((static_cast<std::int64_t>(c) * od + z) * oh + y) * ow + xx] /
                ((z1 - z0) * (y1 - y0) * (x1 - x0));
            for (int iz = z0; iz < z1; ++iz)
              for (int iy = y0; iy < y1; ++iy)
                for (int ix = x0; ix < x1; ++ix)
                  g[((static_cast<std::int64_t>(c) * D + iz) * H + iy) * W + ix] += go;
          }
  });
}

Var tokens_from_grid(const Var& x) {
  const int C = x->value.dim(0);
  const std::int64_t P = x->value.numel() / C;
  Tensor out({static_cast<int>(P), C});
  for (int c = 0; c < C; ++c)
    for (std::int64_t p = 0; p < P; ++p) out[p * C + c] = x->value[c * P + p];
  return make(std::move(out), {x}, [x, C, P](Node& n) {
    auto& g = x->ensure_grad();
    for (int c = 0; c < C; ++c)
      for (std::int64_t p = 0; p < P; ++p) g[c * P + p] += n.grad[p * C + c];
  });
}

// ---------------------------------------------------------------- embeddings / losses

Var embedding_rows(const Var& table, const std::vector<int>& ids) {
  const int V = table->value.dim(0), D = table->value.dim(1);
  const int T = static_cast<int>(ids.size());
  Tensor out({T, D});
  for (int t = 0; t < T; ++t) {
    if (ids[static_cast<std::size_t>(t)] < 0 || ids[static_cast<std::size_t>(t)] >= V)
      throw std::out_of_range("embedding_rows: id out of range");
    std::copy_n(table->value.data.data() + static_cast<std::int64_t>(ids[static_cast<std::size_t>(t)]) * D,
                D, out.data.data() + static_cast<std::int64_t>(t) * D);
  }
  return make(std::move(out), {table}, [table, ids, D, T](Node& n) {
    auto& g = table->ensure_grad();
    for (int t = 0; t < T; ++t)
      for (int j = 0; j < D; ++j)
        g[static_cast<std::int64_t>(ids[static_cast<std::size_t>(t)]) * D + j] +=
            n.grad[static_cast<std::int64_t>(t) * D + j];
  });
}

Var cross_entropy_rows(const Var& logits, const std::vector<int>& targets, int ignore_id) {
  const int T = logits->value.dim(0), V = logits->value.dim(1);
  if (static_cast<int>(targets.size()) != T)
    throw std::invalid_argument("cross_entropy_rows: target count mismatch");
  auto probs = std::make_shared<Tensor>(Tensor({T, V}));
  double total = 0.0;
  int counted = 0;
  for (int t = 0; t < T; ++t) {
    double mx = -1e300;
    for (int j = 0; j < V; ++j) mx = std::max(mx, logits->value[t * V + j]);
    double z = 0.0;
    for (int j = 0; j < V; ++j) {
      double e = std::exp(logits->value[t * V + j] - mx);
      (*probs)[t * V + j] = e;
      z += e;
    }
    for (int j = 0; j < V; ++j) (*probs)[t * V + j] /= z;
    const int tgt = targets[static_cast<std::size_t>(t)];
    if (tgt == ignore_id) continue;
    if (tgt < 0 || tgt >= V) throw std::out_of_range("cross_entropy_rows: target out of range");
    total += -std::log(std::max((*probs)[t * V + tgt], 1e-300));
    ++counted;
  }
  if (counted == 0) counted = 1;
  return make(Tensor::scalar(total / counted), {logits},
              [logits, probs, targets, ignore_id, T, V, counted](Node& n) {
                auto& g = logits->ensure_grad();
                const double go = n.grad[0] / counted;
                for (int t = 0; t < T; ++t) {
                  const int tgt = targets[static_cast<std::size_t>(t)];
                  if (tgt == ignore_id) continue;
                  for (int j = 0; j < V; ++j) {
                    double d = (*probs)[t * V + j] - (j == tgt ? 1.0 : 0.0);
                    g[t * V + j] += go * d;
                  }
                }
              });
}

namespace {

// Channel softmax over a [C, D*H*W] view; shared by the two voxel losses.
Tensor channel_softmax(const Tensor& logits) {
  const int C = logits.dim(0);
  const std::int64_t S = logits.numel() / C;
  Tensor p(logits.shape);
  for (std::int64_t v = 0; v < S; ++v) {
    double mx = -1e300;
    for (int c = 0; c < C; ++c) mx = std::max(mx, logits[c * S + v]);
    double z = 0.0;
    for (int c = 0; c < C; ++c) {
      double e = std::exp(logits[c * S + v] - mx);
      p[c * S + v] = e;
      z += e;
    }
    for (int c = 0; c < C; ++c) p[c * S + v] /= z;
  }
  return p;
}

void check_labels(const Tensor& logits, const std::vector<std::uint8_t>& labels) {
  const int C = logits.dim(0);
  const std::int64_t S = logits.numel() / C;
  if (static_cast<std::int64_t>(labels.size()) != S)
    throw std::invalid_argument("voxel loss: label count mismatch");
  for (auto l : labels)
    if (l >= C) throw std::out_of_range("voxel loss: label >= class count");
}

}  // namespace

Var softmax_ce_voxels(const Var& logits, const std::vector<std::uint8_t>& labels,
                      const std::vector<double>& class_weights) {
  check_labels(logits->value, labels);
  const int C = logits->value.dim(0);
  const std::int64_t S = logits->value.numel() / C;
  if (!class_weights.empty() && static_cast<int>(class_weights.size()) != C)
    throw std::invalid_argument("softmax_ce_voxels: class weight count != C");
  auto w = std::make_shared<std::vector<double>>(
      class_weights.empty() ? std::vector<double>(static_cast<std::size_t>(C), 1.0)
                            : class_weights);
  auto p = std::make_shared<Tensor>(channel_softmax(logits->value));
  double total = 0.0, wsum = 0.0;
  for (std::int64_t v = 0; v < S; ++v) {
    const double wv = (*w)[labels[static_cast<std::size_t>(v)]];
    wsum += wv;
    total += -wv * std::log(std::max((*p)[labels[static_cast<std::size_t>(v)] * S + v], 1e-300));
  }
  auto norm = std::make_shared<double>(wsum > 0.0 ? wsum : 1.0);
  return make(Tensor::scalar(total / *norm), {logits},
              [logits, p, w, norm, labels, C, S](Node& n) {
                auto& g = logits->ensure_grad();
                const double go = n.grad[0] / *norm;
                for (std::int64_t v = 0; v < S; ++v) {
                  const int tgt = labels[static_cast<std::size_t>(v)];
                  const double wv = (*w)[static_cast<std::size_t>(tgt)];
                  for (int c = 0; c < C; ++c)
                    g[c * S + v] += go * wv * ((*p)[c * S + v] - (c == tgt ? 1.0 : 0.0));
                }
              });
}

Var soft_dice_loss(const Var& logits, const std::vector<std::uint8_t>& labels, double eps) {
  check_labels(logits->value, labels);
  const int C = logits->value.dim(0);
  const std::int64_t S = logits->value.numel() / C;
  auto p = std::make_shared<Tensor>(channel_softmax(logits->value));
  // Per-class sums: overlap = sum p_c * g_c, pred = sum p_c, gt = |g_c|.
  auto overlap = std::make_shared<std::vector<double>>(static_cast<std::size_t>(C), 0.0);
  auto pred = std::make_shared<std::vector<double>>(static_cast<std::size_t>(C), 0.0);
  auto gt = std::make_shared<std::vector<double>>(static_cast<std::size_t>(C), 0.0);
  for (std::int64_t v = 0; v < S; ++v) {
    const int l = labels[static_cast<std::size_t>(v)];
    (*gt)[static_cast<std::size_t>(l)] += 1.0;
    (*overlap)[static_cast<std::size_t>(l)] += (*p)[l * S + v];
  }
  for (int c = 0; c < C; ++c) {
    const double* pc = p->data.data() + c * S;
    double s = 0.0;
    for (std::int64_t v = 0; v < S; ++v) s += pc[v];
    (*pred)[static_cast<std::size_t>(c)] = s;
  }
  // Average only over classes present in the ground truth. Absent classes are
  // already handled by the cross-entropy term; including their (empty) dice
  // terms dilutes the gradient on small structures by 1/C and stalls training
  // in an all-background plateau.
  auto active = std::make_shared<std::vector<int>>();
  for (int c = 0; c < C; ++c)
    if ((*gt)[static_cast<std::size_t>(c)] > 0.0) active->push_back(c);
  const double na = static_cast<double>(active->size());
  double dice_sum = 0.0;
  for (int c : *active)
    dice_sum += (2.0 * (*overlap)[static_cast<std::size_t>(c)] + eps) /
                ((*pred)[static_cast<std::size_t>(c)] + (*gt)[static_cast<std::size_t>(c)] + eps);
  const double loss = 1.0 - dice_sum / na;
  return make(Tensor::scalar(loss), {logits},
              [logits, p, overlap, pred, gt, labels, active, na, C, S, eps](Node& n) {
    auto& g = logits->ensure_grad();
    const double go = n.grad[0];
    // dL/dp_{c,v} = -(1/na) [ 2*g_{c,v}/denom_c - (2*overlap_c+eps)/denom_c^2 ]
    // for active classes, 0 otherwise.
    std::vector<double> denom(static_cast<std::size_t>(C), 0.0),
        numer(static_cast<std::size_t>(C), 0.0);
    std::vector<char> is_active(static_cast<std::size_t>(C), 0);
    for (int c : *active) {
      is_active[static_cast<std::size_t>(c)] = 1;
      denom[static_cast<std::size_t>(c)] =
          (*pred)[static_cast<std::size_t>(c)] + (*gt)[static_cast<std::size_t>(c)] + eps;
      numer[static_cast<std::size_t>(c)] = 2.0 * (*overlap)[static_cast<std::size_t>(c)] + eps;
    }
    for (std::int64_t v = 0; v < S; ++v) {
      const int l = labels[static_cast<std::size_t>(v)];
      // dL/dp for this voxel, all classes; then through softmax jacobian.
      double dot = 0.0;
      std::vector<double> dlp(static_cast<std::size_t>(C), 0.0);
      for (int c = 0; c < C; ++c) {
        if (is_active[static_cast<std::size_t>(c)]) {
          const double gcv = (c == l) ? 1.0 : 0.0;
          const double d = denom[static_cast<std::size_t>(c)];
          dlp[static_cast<std::size_t>(c)] =
              -(1.0 / na) * (2.0 * gcv / d - numer[static_cast<std::size_t>(c)] / (d * d));
        }
        dot += dlp[static_cast<std::size_t>(c)] * (*p)[c * S + v];
      }
      for (int c = 0; c < C; ++c)
        g[c * S + v] += go * (*p)[c * S + v] * (dlp[static_cast<std::size_t>(c)] - dot);
    }
  });
}

Var bce_weighted(const Var& probs, const std::vector<std::uint8_t>& y,
                 const std::vector<double>& weights, double clamp) {
  const std::int64_t n = probs->value.numel();
  if (static_cast<std::int64_t>(y.size()) != n)
    throw std::invalid_argument("bce_weighted: length mismatch");
  if (!weights.empty() && static_cast<std::int64_t>(weights.size()) != n)
    throw std::invalid_argument("bce_weighted: weight length mismatch");
  auto clamped = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
  double total = 0.0, wsum = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double wv = weights.empty() ? 1.0 : weights[static_cast<std::size_t>(i)];
    double p = std::min(std::max(probs->value[i], clamp), 1.0 - clamp);
    (*clamped)[static_cast<std::size_t>(i)] = p;
    total += wv * (y[static_cast<std::size_t>(i)] ? -std::log(p) : -std::log(1.0 - p));
    wsum += wv;
  }
  if (wsum <= 0.0) throw std::invalid_argument("bce_weighted: non-positive total weight");
  return make(Tensor::scalar(total / wsum), {probs},
              [probs, clamped, y, weights, n, wsum, clamp](Node& n_) {
                auto& g = probs->ensure_grad();
                const double go = n_.grad[0] / wsum;
                for (std::int64_t i = 0; i < n; ++i) {
                  const double raw = probs->value[i];
                  if (raw <= clamp || raw >= 1.0 - clamp) continue;  // clamped: zero slope
                  const double wv = weights.empty() ? 1.0 : weights[static_cast<std::size_t>(i)];
                  const double p = (*clamped)[static_cast<std::size_t>(i)];
                  g[i] += go * wv * (y[static_cast<std::size_t>(i)] ? -1.0 / p : 1.0 / (1.0 - p));
                }
              });
}

Var bce_mean(const Var& probs, const std::vector<std::uint8_t>& y, double clamp) {
  return bce_weighted(probs, y, {}, clamp);
}

}  // namespace uvlm::nn
