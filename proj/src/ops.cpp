#include "dtx/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dtx/kernels.hpp"

namespace dtx {

using detail::Node;

namespace {

const kernels::KernelTable& K() { return kernels::active(); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

void require_2d(const Tensor& x, const char* op) {
  if (x.ndim() != 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(x.shape()));
}

Shape drop_last(const Shape& s) {
  if (s.size() <= 1) return {1};
  return Shape(s.begin(), s.end() - 1);
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

// Row-wise stable softmax of `in` into `out`; masked entries (allowed == 0) get 0.
void softmax_rows(const double* in, double* out, std::size_t rows, std::size_t cols,
                  const std::uint8_t* allowed) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in + r * cols;
    double* y = out + r * cols;
    const std::uint8_t* ok = allowed ? allowed + r * cols : nullptr;
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c)
      if (!ok || ok[c]) m = std::max(m, x[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = (!ok || ok[c]) ? std::exp(x[c] - m) : 0.0;
      z += y[c];
    }
    const double inv = 1.0 / z;
    for (std::size_t c = 0; c < cols; ++c) y[c] *= inv;
  }
}

void softmax_backward(const double* y, const double* g, double* dx, std::size_t rows,
                      std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* yr = y + r * cols;
    const double* gr = g + r * cols;
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += gr[c] * yr[c];
    for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] += yr[c] * (gr[c] - s);
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  K().add(a.data().data(), b.data().data(), out.data(), out.size());
  return Tensor::make(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t i = 0; i < 2; ++i) {
      Node& p = parent(self, i);
      if (p.requires_grad) K().axpy(1.0, self.grad.data(), p.ensure_grad().data(), self.grad.size());
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return Tensor::make(a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) K().axpy(1.0, self.grad.data(), pa.ensure_grad().data(), self.grad.size());
    if (pb.requires_grad) K().axpy(-1.0, self.grad.data(), pb.ensure_grad().data(), self.grad.size());
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  K().mul(a.data().data(), b.data().data(), out.data(), out.size());
  return Tensor::make(a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    const std::size_t n = self.grad.size();
    if (pa.requires_grad) {
      auto& ga = pa.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& gb = pb.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) gb[i] += self.grad[i] * pa.value[i];
    }
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t cols = x.cols();
  if (bias.numel() != cols)
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " +
                         shape_str(x.shape()));
  std::vector<double> out(x.data().begin(), x.data().end());
  const std::size_t rows = x.rows();
  for (std::size_t r = 0; r < rows; ++r)
    K().add(out.data() + r * cols, bias.data().data(), out.data() + r * cols, cols);
  return Tensor::make(x.shape(), std::move(out), {x, bias}, [rows, cols](Node& self) {
    Node& px = parent(self, 0);
    Node& pb = parent(self, 1);
    if (px.requires_grad) K().axpy(1.0, self.grad.data(), px.ensure_grad().data(), self.grad.size());
    if (pb.requires_grad) {
      auto& gb = pb.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) K().axpy(1.0, self.grad.data() + r * cols, gb.data(), cols);
    }
  });
}

Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v *= c;
  return Tensor::make(x.shape(), std::move(out), {x}, [c](Node& self) {
    Node& px = parent(self, 0);
    if (px.requires_grad) K().axpy(c, self.grad.data(), px.ensure_grad().data(), self.grad.size());
  });
}

Tensor exp(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x.data()[i]);
  return Tensor::make(x.shape(), std::move(out), {x}, [](Node& self) {
    Node& px = parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

Tensor log(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.data()[i];
    if (!(v > 0.0))
      throw DomainError("log: non-positive input " + std::to_string(v) + " at index " +
                        std::to_string(i));
    out[i] = std::log(v);
  }
  return Tensor::make(x.shape(), std::move(out), {x}, [](Node& self) {
    Node& px = parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / px.value[i];
  });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, x.data()[i]);
  return Tensor::make(x.shape(), std::move(out), {x}, [](Node& self) {
    Node& px = parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (px.value[i] > 0.0) g[i] += self.grad[i];
  });
}

Tensor logaddexp(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "logaddexp");
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.data()[i];
    const double y = b.data()[i];
    const double m = std::max(x, y);
    out[i] = (m == kNegInf) ? kNegInf : m + std::log(std::exp(x - m) + std::exp(y - m));
  }
  return Tensor::make(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      Node& p = parent(self, k);
      if (!p.requires_grad) continue;
      auto& g = p.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (self.value[i] != kNegInf && p.value[i] != kNegInf)
          g[i] += self.grad[i] * std::exp(p.value[i] - self.value[i]);
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  std::vector<double> out(m * n);
  K().gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data(), false);
  return Tensor::make({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad)
      K().gemm_nt(m, n, k, self.grad.data(), pb.value.data(), pa.ensure_grad().data(), true);
    if (pb.requires_grad)
      K().gemm_tn(k, m, n, pa.value.data(), self.grad.data(), pb.ensure_grad().data(), true);
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul_nt");
  require_2d(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k)
    throw DimensionError("matmul_nt: inner dimensions differ, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()) + "^T");
  std::vector<double> out(m * n);
  K().gemm_nt(m, k, n, a.data().data(), b.data().data(), out.data(), false);
  return Tensor::make({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad)
      K().gemm_nn(m, n, k, self.grad.data(), pb.value.data(), pa.ensure_grad().data(), true);
    if (pb.requires_grad)
      K().gemm_tn(n, m, k, self.grad.data(), pa.value.data(), pb.ensure_grad().data(), true);
  });
}

Tensor transpose(const Tensor& x) {
  require_2d(x, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x.data()[i * c + j];
  return Tensor::make({c, r}, std::move(out), {x}, [r, c](Node& self) {
    Node& px = parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

Tensor softmax(const Tensor& x) {
  const std::size_t rows = x.rows(), cols = x.cols();
  std::vector<double> out(x.numel());
  softmax_rows(x.data().data(), out.data(), rows, cols, nullptr);
  return Tensor::make(x.shape(), std::move(out), {x}, [rows, cols](Node& self) {
    Node& px = parent(self, 0);
    if (px.requires_grad)
      softmax_backward(self.value.data(), self.grad.data(), px.ensure_grad().data(), rows, cols);
  });
}

Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> allowed) {
  const std::size_t rows = x.rows(), cols = x.cols();
  if (allowed.size() != x.numel())
    throw DimensionError("masked_softmax: mask has " + std::to_string(allowed.size()) +
                         " entries for input " + shape_str(x.shape()));
  for (std::size_t r = 0; r < rows; ++r) {
    bool any = false;
    for (std::size_t c = 0; c < cols && !any; ++c) any = allowed[r * cols + c] != 0;
    if (!any) throw ContractError("masked_softmax: row " + std::to_string(r) + " is fully masked");
  }
  std::vector<double> out(x.numel());
  softmax_rows(x.data().data(), out.data(), rows, cols, allowed.data());
  return Tensor::make(x.shape(), std::move(out), {x}, [rows, cols](Node& self) {
    Node& px = parent(self, 0);
    if (px.requires_grad)
      softmax_backward(self.value.data(), self.grad.data(), px.ensure_grad().data(), rows, cols);
  });
}

Tensor log_softmax(const Tensor& x) {
  const std::size_t rows = x.rows(), cols = x.cols();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * cols;
    const double m = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(xr[c] - m);
    const double lse = m + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xr[c] - lse;
  }
  return Tensor::make(x.shape(), std::move(out), {x}, [rows, cols](Node& self) {
    Node& px = parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gr = self.grad.data() + r * cols;
      const double* yr = self.value.data() + r * cols;
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) s += gr[c];
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += gr[c] - std::exp(yr[c]) * s;
    }
  });
}

Tensor log_sum_exp(const Tensor& x) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  const std::size_t rows = x.rows(), cols = x.cols();
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * cols;
    const double m = *std::max_element(xr, xr + cols);
    if (m == kNegInf) {
      out[r] = kNegInf;
      continue;
    }
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(xr[c] - m);
    out[r] = m + std::log(z);
  }
  return Tensor::make(drop_last(x.shape()), std::move(out), {x}, [rows, cols](Node& self) {
    Node& px = parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      if (self.value[r] == kNegInf) continue;
      for (std::size_t c = 0; c < cols; ++c)
        g[r * cols + c] += self.grad[r] * std::exp(px.value[r * cols + c] - self.value[r]);
    }
  });
}

Tensor sum_last(const Tensor& x) {
  const std::size_t rows = x.rows(), cols = x.cols();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r] += x.data()[r * cols + c];
  return Tensor::make(drop_last(x.shape()), std::move(out), {x}, [rows, cols](Node& self) {
    Node& px = parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.ensure_grad();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += self.grad[r];
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::make({1}, {s}, {x}, [](Node& self) {
    Node& px = parent(self, 0);
    if (!px.requires_grad) return;
    const double g0 = self.grad[0];
    for (double& g : px.ensure_grad()) g += g0;
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return Tensor::make(std::move(shape), std::move(out), {x}, [](Node& self) {
    Node& px = parent(self, 0);
    if (px.requires_grad) K().axpy(1.0, self.grad.data(), px.ensure_grad().data(), self.grad.size());
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_2d(x, "slice_rows");
  if (begin >= end || end > x.dim(0))
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") outside " + shape_str(x.shape()));
  const std::size_t cols = x.cols();
  std::vector<double> out(x.data().begin() + begin * cols, x.data().begin() + end * cols);
  return Tensor::make({end - begin, cols}, std::move(out), {x}, [begin, cols](Node& self) {
    Node& px = parent(self, 0);
    if (px.requires_grad)
      K().axpy(1.0, self.grad.data(), px.ensure_grad().data() + begin * cols, self.grad.size());
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_2d(x, "slice_cols");
  if (begin >= end || end > x.dim(1))
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") outside " + shape_str(x.shape()));
  const std::size_t rows = x.dim(0), cols = x.dim(1), w = end - begin;
  std::vector<double> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.data().data() + r * cols + begin, w, out.data() + r * w);
  return Tensor::make({rows, w}, std::move(out), {x}, [rows, cols, begin, w](Node& self) {
    Node& px = parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.ensure_grad();
    for (std::size_t r = 0; r < rows; ++r)
      K().axpy(1.0, self.grad.data() + r * w, g.data() + r * cols + begin, w);
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_rows");
    if (p.cols() != cols)
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts[0].shape()) +
                           " vs " + shape_str(p.shape()));
    rows += p.rows();
  }
  std::vector<double> out;
  out.reserve(rows * cols);
  for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return Tensor::make({rows, cols}, std::move(out), parts, [](Node& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      const std::size_t n = p->value.size();
      if (p->requires_grad) K().axpy(1.0, self.grad.data() + offset, p->ensure_grad().data(), n);
      offset += n;
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts[0].dim(0);
  std::size_t cols = 0;
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_cols");
    if (p.dim(0) != rows)
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    widths.push_back(p.dim(1));
    cols += p.dim(1);
  }
  std::vector<double> out(rows * cols);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const double* src = parts[k].data().data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(src + r * widths[k], widths[k], out.data() + r * cols + offset);
    offset += widths[k];
  }
  return Tensor::make({rows, cols}, std::move(out), parts,
                      [rows, cols, widths = std::move(widths)](Node& self) {
                        std::size_t offset = 0;
                        for (std::size_t k = 0; k < widths.size(); ++k) {
                          Node& p = *self.parents[k];
                          if (p.requires_grad) {
                            auto& g = p.ensure_grad();
                            for (std::size_t r = 0; r < rows; ++r)
                              K().axpy(1.0, self.grad.data() + r * cols + offset,
                                       g.data() + r * widths[k], widths[k]);
                          }
                          offset += widths[k];
                        }
                      });
}

Tensor gather(const Tensor& x, std::span<const std::int64_t> index, double fill) {
  if (index.empty()) throw DimensionError("gather: empty index");
  const auto n = static_cast<std::int64_t>(x.numel());
  std::vector<double> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n)
      throw DimensionError("gather: index " + std::to_string(index[i]) + " outside " +
                           shape_str(x.shape()));
    out[i] = index[i] < 0 ? fill : x.data()[static_cast<std::size_t>(index[i])];
  }
  std::vector<std::int64_t> idx(index.begin(), index.end());
  return Tensor::make({index.size()}, std::move(out), {x}, [idx = std::move(idx)](Node& self) {
    Node& px = parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i)
      if (idx[i] >= 0) g[static_cast<std::size_t>(idx[i])] += self.grad[i];
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_2d(table, "embedding");
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw InputError("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<int> rows(ids.begin(), ids.end());
  return Tensor::make({ids.size(), d}, std::move(out), {table}, [rows = std::move(rows), d](Node& self) {
    Node& pt = parent(self, 0);
    if (!pt.requires_grad) return;
    auto& g = pt.ensure_grad();
    for (std::size_t i = 0; i < rows.size(); ++i)
      K().axpy(1.0, self.grad.data() + i * d, g.data() + static_cast<std::size_t>(rows[i]) * d, d);
  });
}

Tensor scale_rows(const Tensor& x, const Tensor& w) {
  require_2d(x, "scale_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (w.numel() != rows)
    throw DimensionError("scale_rows: weights " + shape_str(w.shape()) + " for " + shape_str(x.shape()));
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x.data()[r * cols + c] * w.data()[r];
  return Tensor::make(x.shape(), std::move(out), {x, w}, [rows, cols](Node& self) {
    Node& px = parent(self, 0);
    Node& pw = parent(self, 1);
    if (px.requires_grad) {
      auto& g = px.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        K().axpy(pw.value[r], self.grad.data() + r * cols, g.data() + r * cols, cols);
    }
    if (pw.requires_grad) {
      auto& g = pw.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        g[r] += K().dot(self.grad.data() + r * cols, px.value.data() + r * cols, cols);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t rows = x.rows(), cols = x.cols();
  if (gain.numel() != cols || bias.numel() != cols)
    throw DimensionError("layer_norm: gain/bias do not match " + shape_str(x.shape()));
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (xr[c] - mu) * inv_std[r];
      xhat[r * cols + c] = h;
      out[r * cols + c] = h * gain.data()[c] + bias.data()[c];
    }
  }
  return Tensor::make(x.shape(), std::move(out), {x, gain, bias},
                      [rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                        Node& px = parent(self, 0);
                        Node& pg = parent(self, 1);
                        Node& pb = parent(self, 2);
                        const double* g = self.grad.data();
                        if (pg.requires_grad) {
                          auto& gg = pg.ensure_grad();
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < cols; ++c)
                              gg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                        if (pb.requires_grad) {
                          auto& gb = pb.ensure_grad();
                          for (std::size_t r = 0; r < rows; ++r)
                            K().axpy(1.0, g + r * cols, gb.data(), cols);
                        }
                        if (!px.requires_grad) return;
                        auto& gx = px.ensure_grad();
                        const double n = static_cast<double>(cols);
                        for (std::size_t r = 0; r < rows; ++r) {
                          double m1 = 0.0, m2 = 0.0;
                          for (std::size_t c = 0; c < cols; ++c) {
                            const double d = g[r * cols + c] * pg.value[c];
                            m1 += d;
                            m2 += d * xhat[r * cols + c];
                          }
                          m1 /= n;
                          m2 /= n;
                          for (std::size_t c = 0; c < cols; ++c) {
                            const double d = g[r * cols + c] * pg.value[c];
                            gx[r * cols + c] += inv_std[r] * (d - m1 - xhat[r * cols + c] * m2);
                          }
                        }
                      });
}

Tensor dropout(const Tensor& x, double rate, bool train, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must be in [0, 1)");
  if (!train || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.numel());
  for (double& m : mask) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    m = u >= rate ? keep_scale : 0.0;
  }
  std::vector<double> out(x.numel());
  K().mul(x.data().data(), mask.data(), out.data(), out.size());
  return Tensor::make(x.shape(), std::move(out), {x}, [mask = std::move(mask)](Node& self) {
    Node& px = parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

}  // namespace dtx
