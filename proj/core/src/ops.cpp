#include "fsad/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

namespace fsad::ag {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

void require_rank(const Var& a, int rank, const char* op) {
  if (a.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(a.shape()));
  }
}

Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), 0.0); }

// Elementwise unary op with derivative computed from (input, output).
template <typename F, typename D>
Var unary(const Var& a, F f, D df) {
  Tensor out = zeros_like(a.value());
  const Tensor& in = a.value();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return make_node(std::move(out), {a}, [df](const Node& self) {
    Node& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    Tensor g = zeros_like(pa.value);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * df(pa.value[i], self.value[i]);
    accumulate(pa, g);
  });
}

void im2col(const double* img, int channels, int height, int width, int k, int pad, int out_h, int out_w,
            double* cols) {
  const int plane = out_h * out_w;
  for (int c = 0; c < channels; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        double* row = cols + static_cast<std::ptrdiff_t>(((c * k + ki) * k + kj) * plane);
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy + ki - pad;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox + kj - pad;
            row[oy * out_w + ox] = (iy >= 0 && iy < height && ix >= 0 && ix < width)
                                       ? img[(c * height + iy) * width + ix]
                                       : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, int channels, int height, int width, int k, int pad, int out_h, int out_w,
            double* img) {
  const int plane = out_h * out_w;
  for (int c = 0; c < channels; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const double* row = cols + static_cast<std::ptrdiff_t>(((c * k + ki) * k + kj) * plane);
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy + ki - pad;
          if (iy < 0 || iy >= height) continue;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox + kj - pad;
            if (ix >= 0 && ix < width) img[(c * height + iy) * width + ix] += row[oy * out_w + ox];
          }
        }
      }
    }
  }
}

constexpr double kNormEps = 1e-16;

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_node(std::move(out), {a, b}, [](const Node& self) {
    accumulate(*self.parents[0], self.grad);
    accumulate(*self.parents[1], self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_node(std::move(out), {a, b}, [](const Node& self) {
    accumulate(*self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) {
      Tensor g = self.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = -g[i];
      accumulate(*self.parents[1], g);
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_node(std::move(out), {a, b}, [](const Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      Tensor g = self.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= pb.value[i];
      accumulate(pa, g);
    }
    if (pb.requires_grad) {
      Tensor g = self.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= pa.value[i];
      accumulate(pb, g);
    }
  });
}

Var scale(const Var& a, double factor) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= factor;
  return make_node(std::move(out), {a}, [factor](const Node& self) {
    Tensor g = self.grad;
    for (double& v : g.values()) v *= factor;
    accumulate(*self.parents[0], g);
  });
}

Var sum(const Var& a) {
  double total = 0.0;
  for (double v : a.value().values()) total += v;
  return make_node(Tensor({1}, total), {a}, [](const Node& self) {
    accumulate(*self.parents[0], Tensor(self.parents[0]->value.shape(), self.grad[0]));
  });
}

Var mean(const Var& a) {
  const auto n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var sum_squares(const Var& a) {
  double total = 0.0;
  for (double v : a.value().values()) total += v * v;
  return make_node(Tensor({1}, total), {a}, [](const Node& self) {
    Node& pa = *self.parents[0];
    Tensor g = pa.value;
    for (double& v : g.values()) v *= 2.0 * self.grad[0];
    accumulate(pa, g);
  });
}

Var l2_norm(const Var& a) {
  double total = 0.0;
  for (double v : a.value().values()) total += v * v;
  const double norm = std::sqrt(total);
  return make_node(Tensor({1}, norm), {a}, [norm](const Node& self) {
    Node& pa = *self.parents[0];
    Tensor g = zeros_like(pa.value);
    if (norm > 0.0) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[0] * pa.value[i] / norm;
    }
    accumulate(pa, g);
  });
}

Var relu(const Var& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double, double y) { return y * (1.0 - y); });
}

Var clip(const Var& a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_node(std::move(out), {a}, [](const Node& self) {
    accumulate(*self.parents[0], self.grad.reshaped(self.parents[0]->value.shape()));
  });
}

Var concat(std::span<const Var> parts) {
  std::vector<Tensor> values;
  values.reserve(parts.size());
  for (const Var& p : parts) values.push_back(p.value());
  Tensor out = fsad::concat(values);
  return make_node(std::move(out), std::vector<Var>(parts.begin(), parts.end()), [](const Node& self) {
    int row = 0;
    for (const auto& p : self.parents) {
      const int rows = p->value.dim(0);
      if (p->requires_grad) accumulate(*p, self.grad.slice(row, row + rows));
      row += rows;
    }
  });
}

Var gather(const Var& a, std::span<const int> index) {
  const Tensor& in = a.value();
  const std::size_t n = in.item_size();
  Shape s = in.shape();
  s[0] = static_cast<int>(index.size());
  Tensor out(s);
  std::vector<int> idx(index.begin(), index.end());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= in.dim(0)) throw ShapeError("gather index out of range");
    std::copy_n(in.ptr() + idx[r] * n, n, out.ptr() + r * n);
  }
  return make_node(std::move(out), {a}, [idx, n](const Node& self) {
    Node& pa = *self.parents[0];
    Tensor g = zeros_like(pa.value);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t i = 0; i < n; ++i) g[idx[r] * n + i] += self.grad[r * n + i];
    }
    accumulate(pa, g);
  });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int pad) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  const int batch = x.shape()[0], channels = x.shape()[1], height = x.shape()[2], width = x.shape()[3];
  const int out_ch = weight.shape()[0], k = weight.shape()[2];
  if (weight.shape()[1] != channels || weight.shape()[3] != k) {
    throw ShapeError("conv2d: weight " + to_string(weight.shape()) + " incompatible with input " +
                     to_string(x.shape()));
  }
  if (bias.shape() != Shape{out_ch}) throw ShapeError("conv2d: bias shape " + to_string(bias.shape()));
  const int out_h = height + 2 * pad - k + 1, out_w = width + 2 * pad - k + 1;
  if (out_h <= 0 || out_w <= 0) throw ShapeError("conv2d: kernel larger than padded input");

  const int patch = channels * k * k, plane = out_h * out_w;
  Tensor out({batch, out_ch, out_h, out_w});
  Storage cols(static_cast<std::size_t>(patch) * plane);
  ConstMatMap w(weight.value().ptr(), out_ch, patch);
  Eigen::Map<const Eigen::VectorXd> b(bias.value().ptr(), out_ch);
  const std::size_t in_item = x.value().item_size(), out_item = out.item_size();
  for (int n = 0; n < batch; ++n) {
    im2col(x.value().ptr() + n * in_item, channels, height, width, k, pad, out_h, out_w, cols.data());
    MatMap o(out.ptr() + n * out_item, out_ch, plane);
    o.noalias() = w * ConstMatMap(cols.data(), patch, plane);
    o.colwise() += b;
  }

  return make_node(std::move(out), {x, weight, bias}, [=](const Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    Node& pb = *self.parents[2];
    Storage cols_buf(static_cast<std::size_t>(patch) * plane);
    Storage dcols(static_cast<std::size_t>(patch) * plane);
    ConstMatMap wm(pw.value.ptr(), out_ch, patch);
    Tensor dx = px.requires_grad ? zeros_like(px.value) : Tensor();
    Tensor dw = pw.requires_grad ? zeros_like(pw.value) : Tensor();
    Tensor db = pb.requires_grad ? zeros_like(pb.value) : Tensor();
    for (int n = 0; n < batch; ++n) {
      ConstMatMap g(self.grad.ptr() + n * out_item, out_ch, plane);
      if (pw.requires_grad) {
        im2col(px.value.ptr() + n * in_item, channels, height, width, k, pad, out_h, out_w, cols_buf.data());
        MatMap(dw.ptr(), out_ch, patch).noalias() += g * ConstMatMap(cols_buf.data(), patch, plane).transpose();
      }
      if (pb.requires_grad) Eigen::Map<Eigen::VectorXd>(db.ptr(), out_ch) += g.rowwise().sum();
      if (px.requires_grad) {
        MatMap(dcols.data(), patch, plane).noalias() = wm.transpose() * g;
        col2im(dcols.data(), channels, height, width, k, pad, out_h, out_w, dx.ptr() + n * in_item);
      }
    }
    if (px.requires_grad) accumulate(px, dx);
    if (pw.requires_grad) accumulate(pw, dw);
    if (pb.requires_grad) accumulate(pb, db);
  });
}

Var max_pool2(const Var& x) {
  require_rank(x, 4, "max_pool2");
  const int batch = x.shape()[0], channels = x.shape()[1], height = x.shape()[2], width = x.shape()[3];
  const int oh = height / 2, ow = width / 2;
  if (oh == 0 || ow == 0) throw ShapeError("max_pool2: input too small " + to_string(x.shape()));
  Tensor out({batch, channels, oh, ow});
  std::vector<std::size_t> argmax(out.size());
  const double* in = x.value().ptr();
  std::size_t o = 0;
  for (int p = 0; p < batch * channels; ++p) {
    const double* plane = in + static_cast<std::ptrdiff_t>(p) * height * width;
    for (int y = 0; y < oh; ++y) {
      for (int xx = 0; xx < ow; ++xx, ++o) {
        std::size_t best = static_cast<std::size_t>((2 * y) * width + 2 * xx);
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t idx = static_cast<std::size_t>((2 * y + dy) * width + 2 * xx + dx);
            if (plane[idx] > plane[best]) best = idx;
          }
        }
        out[o] = plane[best];
        argmax[o] = static_cast<std::size_t>(p) * height * width + best;
      }
    }
  }
  return make_node(std::move(out), {x}, [argmax = std::move(argmax)](const Node& self) {
    Node& px = *self.parents[0];
    Tensor g = zeros_like(px.value);
    for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += self.grad[i];
    accumulate(px, g);
  });
}

Var upsample2(const Var& x) {
  require_rank(x, 4, "upsample2");
  const int batch = x.shape()[0], channels = x.shape()[1], height = x.shape()[2], width = x.shape()[3];
  const int oh = 2 * height, ow = 2 * width;
  Tensor out({batch, channels, oh, ow});
  const double* in = x.value().ptr();
  for (int p = 0; p < batch * channels; ++p) {
    for (int y = 0; y < oh; ++y) {
      for (int xx = 0; xx < ow; ++xx) {
        out[(static_cast<std::size_t>(p) * oh + y) * ow + xx] =
            in[(static_cast<std::size_t>(p) * height + y / 2) * width + xx / 2];
      }
    }
  }
  return make_node(std::move(out), {x}, [=](const Node& self) {
    Node& px = *self.parents[0];
    Tensor g = zeros_like(px.value);
    for (int p = 0; p < batch * channels; ++p) {
      for (int y = 0; y < oh; ++y) {
        for (int xx = 0; xx < ow; ++xx) {
          g[(static_cast<std::size_t>(p) * height + y / 2) * width + xx / 2] +=
              self.grad[(static_cast<std::size_t>(p) * oh + y) * ow + xx];
        }
      }
    }
    accumulate(px, g);
  });
}

Var batch_norm_eval(const Var& x, const Var& gamma, const Var& beta, const NormStats& stats, double eps) {
  require_rank(x, 4, "batch_norm");
  const int batch = x.shape()[0], channels = x.shape()[1];
  const int plane = x.shape()[2] * x.shape()[3];
  std::vector<double> inv(static_cast<std::size_t>(channels));
  for (int c = 0; c < channels; ++c) inv[c] = 1.0 / std::sqrt(stats.var[c] + eps);
  std::vector<double> mu(stats.mean.storage().begin(), stats.mean.storage().end());
  Tensor out = zeros_like(x.value());
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < channels; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * plane;
      for (int i = 0; i < plane; ++i) {
        out[base + i] = gamma.value()[c] * (x.value()[base + i] - mu[c]) * inv[c] + beta.value()[c];
      }
    }
  }
  return make_node(std::move(out), {x, gamma, beta}, [=](const Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    Node& pb = *self.parents[2];
    Tensor dx = zeros_like(px.value), dg = zeros_like(pg.value), dbeta = zeros_like(pb.value);
    for (int n = 0; n < batch; ++n) {
      for (int c = 0; c < channels; ++c) {
        const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * plane;
        for (int i = 0; i < plane; ++i) {
          const double g = self.grad[base + i];
          dx[base + i] = g * pg.value[c] * inv[c];
          dg[c] += g * (px.value[base + i] - mu[c]) * inv[c];
          dbeta[c] += g;
        }
      }
    }
    accumulate(px, dx);
    accumulate(pg, dg);
    accumulate(pb, dbeta);
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, NormStats& stats, bool training, double momentum,
               double eps) {
  if (!training) return batch_norm_eval(x, gamma, beta, stats, eps);
  require_rank(x, 4, "batch_norm");
  const int batch = x.shape()[0], channels = x.shape()[1];
  const int plane = x.shape()[2] * x.shape()[3];
  const double count = static_cast<double>(batch) * plane;
  std::vector<double> mu(static_cast<std::size_t>(channels), 0.0), var(static_cast<std::size_t>(channels), 0.0);
  const Tensor& in = x.value();
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < channels; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * plane;
      for (int i = 0; i < plane; ++i) mu[c] += in[base + i];
    }
  }
  for (double& m : mu) m /= count;
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < channels; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * plane;
      for (int i = 0; i < plane; ++i) var[c] += (in[base + i] - mu[c]) * (in[base + i] - mu[c]);
    }
  }
  for (double& v : var) v /= count;
  for (int c = 0; c < channels; ++c) {
    const double unbiased = count > 1 ? var[c] * count / (count - 1) : var[c];
    stats.mean[c] = (1.0 - momentum) * stats.mean[c] + momentum * mu[c];
    stats.var[c] = (1.0 - momentum) * stats.var[c] + momentum * unbiased;
  }
  std::vector<double> inv(static_cast<std::size_t>(channels));
  for (int c = 0; c < channels; ++c) inv[c] = 1.0 / std::sqrt(var[c] + eps);
  Tensor xhat = zeros_like(in);
  Tensor out = zeros_like(in);
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < channels; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * plane;
      for (int i = 0; i < plane; ++i) {
        xhat[base + i] = (in[base + i] - mu[c]) * inv[c];
        out[base + i] = gamma.value()[c] * xhat[base + i] + beta.value()[c];
      }
    }
  }
  return make_node(std::move(out), {x, gamma, beta}, [=, xhat = std::move(xhat)](const Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    Node& pb = *self.parents[2];
    std::vector<double> sum_g(static_cast<std::size_t>(channels), 0.0), sum_gx(static_cast<std::size_t>(channels), 0.0);
    for (int n = 0; n < batch; ++n) {
      for (int c = 0; c < channels; ++c) {
        const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * plane;
        for (int i = 0; i < plane; ++i) {
          sum_g[c] += self.grad[base + i];
          sum_gx[c] += self.grad[base + i] * xhat[base + i];
        }
      }
    }
    if (pg.requires_grad) accumulate(pg, Tensor({channels}, sum_gx));
    if (pb.requires_grad) accumulate(pb, Tensor({channels}, sum_g));
    if (px.requires_grad) {
      Tensor dx = zeros_like(px.value);
      for (int n = 0; n < batch; ++n) {
        for (int c = 0; c < channels; ++c) {
          const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * plane;
          const double k = pg.value[c] * inv[c] / count;
          for (int i = 0; i < plane; ++i) {
            dx[base + i] = k * (count * self.grad[base + i] - sum_g[c] - xhat[base + i] * sum_gx[c]);
          }
        }
      }
      accumulate(px, dx);
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 2, "linear");
  const int batch = x.shape()[0], in_f = x.shape()[1], out_f = weight.shape()[0];
  if (weight.shape() != Shape{out_f, in_f} || bias.shape() != Shape{out_f}) {
    throw ShapeError("linear: weight " + to_string(weight.shape()) + " incompatible with input " +
                     to_string(x.shape()));
  }
  Tensor out({batch, out_f});
  MatMap o(out.ptr(), batch, out_f);
  o.noalias() = ConstMatMap(x.value().ptr(), batch, in_f) * ConstMatMap(weight.value().ptr(), out_f, in_f).transpose();
  o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.value().ptr(), out_f);
  return make_node(std::move(out), {x, weight, bias}, [=](const Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    Node& pb = *self.parents[2];
    ConstMatMap g(self.grad.ptr(), batch, out_f);
    if (px.requires_grad) {
      Tensor dx = zeros_like(px.value);
      MatMap(dx.ptr(), batch, in_f).noalias() = g * ConstMatMap(pw.value.ptr(), out_f, in_f);
      accumulate(px, dx);
    }
    if (pw.requires_grad) {
      Tensor dw = zeros_like(pw.value);
      MatMap(dw.ptr(), out_f, in_f).noalias() = g.transpose() * ConstMatMap(px.value.ptr(), batch, in_f);
      accumulate(pw, dw);
    }
    if (pb.requires_grad) {
      Tensor db = zeros_like(pb.value);
      Eigen::Map<Eigen::RowVectorXd>(db.ptr(), out_f) = g.colwise().sum();
      accumulate(pb, db);
    }
  });
}

Var group_mean(const Var& x, int groups) {
  const Tensor& in = x.value();
  if (groups <= 0 || in.rank() == 0 || in.dim(0) % groups != 0) {
    throw ShapeError("group_mean: " + std::to_string(groups) + " groups do not divide " + to_string(in.shape()));
  }
  const int per = in.dim(0) / groups;
  const std::size_t n = in.item_size();
  Shape s = in.shape();
  s[0] = groups;
  Tensor out(s);
  for (int g = 0; g < groups; ++g) {
    for (int r = 0; r < per; ++r) {
      const double* src = in.ptr() + (static_cast<std::size_t>(g) * per + r) * n;
      for (std::size_t i = 0; i < n; ++i) out[g * n + i] += src[i];
    }
    for (std::size_t i = 0; i < n; ++i) out[g * n + i] /= per;
  }
  return make_node(std::move(out), {x}, [groups, per, n](const Node& self) {
    Node& px = *self.parents[0];
    Tensor g = zeros_like(px.value);
    for (int grp = 0; grp < groups; ++grp) {
      for (int r = 0; r < per; ++r) {
        for (std::size_t i = 0; i < n; ++i) {
          g[(static_cast<std::size_t>(grp) * per + r) * n + i] = self.grad[grp * n + i] / per;
        }
      }
    }
    accumulate(px, g);
  });
}

Var pair_concat(const Var& protos, const Var& queries) {
  require_rank(protos, 4, "pair_concat");
  require_rank(queries, 4, "pair_concat");
  if (Shape(protos.shape().begin() + 1, protos.shape().end()) !=
      Shape(queries.shape().begin() + 1, queries.shape().end())) {
    throw ShapeError("pair_concat: feature shapes differ " + to_string(protos.shape()) + " vs " +
                     to_string(queries.shape()));
  }
  const int ways = protos.shape()[0], nq = queries.shape()[0];
  const std::size_t f = protos.value().item_size();
  Tensor out({nq * ways, 2 * protos.shape()[1], protos.shape()[2], protos.shape()[3]});
  for (int q = 0; q < nq; ++q) {
    for (int k = 0; k < ways; ++k) {
      double* dst = out.ptr() + (static_cast<std::size_t>(q) * ways + k) * 2 * f;
      std::copy_n(protos.value().ptr() + k * f, f, dst);
      std::copy_n(queries.value().ptr() + q * f, f, dst + f);
    }
  }
  return make_node(std::move(out), {protos, queries}, [ways, nq, f](const Node& self) {
    Node& pp = *self.parents[0];
    Node& pq = *self.parents[1];
    Tensor gp = zeros_like(pp.value), gq = zeros_like(pq.value);
    for (int q = 0; q < nq; ++q) {
      for (int k = 0; k < ways; ++k) {
        const double* src = self.grad.ptr() + (static_cast<std::size_t>(q) * ways + k) * 2 * f;
        for (std::size_t i = 0; i < f; ++i) {
          gp[k * f + i] += src[i];
          gq[q * f + i] += src[f + i];
        }
      }
    }
    accumulate(pp, gp);
    accumulate(pq, gq);
  });
}

namespace {

struct PairState {
  RowMat r, a, u;
  Eigen::RowVectorXd u_norm, cos;
};

// Per-position cosine scores for one (class, query) pair with intermediates.
PairState attend_pair(const RowMat& p, const RowMat& pn, const RowMat& q, const RowMat& qn,
                      const Eigen::RowVectorXd& q_norm, double beta);

// Column-normalises a (d, m) matrix; returns normalised matrix and norms.
RowMat normalize_columns(const RowMat& v, Eigen::RowVectorXd& norms) {
  norms = (v.colwise().squaredNorm().array() + kNormEps).sqrt().matrix();
  return v.array().rowwise() / norms.array();
}

// Backward of column normalisation for fixed input v.
RowMat normalize_columns_backward(const RowMat& normalized, const Eigen::RowVectorXd& norms, const RowMat& dn) {
  Eigen::RowVectorXd proj = (normalized.array() * dn.array()).colwise().sum();
  RowMat dv = dn - (normalized.array().rowwise() * proj.array()).matrix();
  return dv.array().rowwise() / norms.array();
}

// Column softmax of (m, m) scores.
RowMat column_softmax(const RowMat& z) {
  RowMat a = z;
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    const double mx = a.col(j).maxCoeff();
    a.col(j) = (a.col(j).array() - mx).exp();
    a.col(j) /= a.col(j).sum();
  }
  return a;
}

PairState attend_pair(const RowMat& p, const RowMat& pn, const RowMat& q, const RowMat& qn,
                      const Eigen::RowVectorXd& q_norm, double beta) {
  PairState s;
  s.r = pn.transpose() * qn;
  s.a = column_softmax(beta * s.r);
  s.u = p * s.a;
  s.u_norm = (s.u.colwise().squaredNorm().array() + kNormEps).sqrt().matrix();
  Eigen::RowVectorXd dots = (s.u.array() * q.array()).colwise().sum();
  s.cos = dots.array() / (s.u_norm.array() * q_norm.array());
  return s;
}

}  // namespace

Var cross_attention_logits(const Var& protos, const Var& queries, const Var& attention_scale,
                           const Var& temperature) {
  require_rank(protos, 4, "cross_attention_logits");
  require_rank(queries, 4, "cross_attention_logits");
  if (Shape(protos.shape().begin() + 1, protos.shape().end()) !=
      Shape(queries.shape().begin() + 1, queries.shape().end())) {
    throw ShapeError("cross_attention_logits: feature shapes differ");
  }
  const int ways = protos.shape()[0], nq = queries.shape()[0];
  const int d = protos.shape()[1], m = protos.shape()[2] * protos.shape()[3];

  auto load = [d, m](const Tensor& t, int index) {
    return RowMat(ConstMatMap(t.ptr() + static_cast<std::size_t>(index) * d * m, d, m));
  };

  std::vector<RowMat> p(ways), pn(ways), q(nq), qn(nq);
  std::vector<Eigen::RowVectorXd> p_norm(ways), q_norm(nq);
  for (int k = 0; k < ways; ++k) {
    p[k] = load(protos.value(), k);
    pn[k] = normalize_columns(p[k], p_norm[k]);
  }
  for (int j = 0; j < nq; ++j) {
    q[j] = load(queries.value(), j);
    qn[j] = normalize_columns(q[j], q_norm[j]);
  }
  const double beta = attention_scale.value()[0];
  const double tau = temperature.value()[0];

  Tensor out({nq, ways});
  for (int qi = 0; qi < nq; ++qi) {
    for (int k = 0; k < ways; ++k) out[qi * ways + k] = tau * attend_pair(p[k], pn[k], q[qi], qn[qi], q_norm[qi], beta).cos.mean();
  }

  return make_node(std::move(out), {protos, queries, attention_scale, temperature}, [=](const Node& self) {
    Node& pp = *self.parents[0];
    Node& pq = *self.parents[1];
    Node& pbeta = *self.parents[2];
    Node& ptau = *self.parents[3];
    std::vector<RowMat> dp(ways, RowMat::Zero(d, m)), dpn(ways, RowMat::Zero(d, m));
    std::vector<RowMat> dq(nq, RowMat::Zero(d, m)), dqn(nq, RowMat::Zero(d, m));
    double dbeta = 0.0, dtau = 0.0;
    for (int qi = 0; qi < nq; ++qi) {
      for (int k = 0; k < ways; ++k) {
        const double g = self.grad[qi * ways + k];
        if (g == 0.0) continue;
        PairState s = attend_pair(p[k], pn[k], q[qi], qn[qi], q_norm[qi], beta);
        dtau += g * s.cos.mean();
        const double ds = g * tau / m;
        // d cos / du and d cos / dq per column
        RowMat du(d, m);
        for (int j = 0; j < m; ++j) {
          const double nu = s.u_norm[j], nqv = q_norm[qi][j], c = s.cos[j];
          du.col(j) = ds * (q[qi].col(j) / (nu * nqv) - c * s.u.col(j) / (nu * nu));
          dq[qi].col(j) += ds * (s.u.col(j) / (nu * nqv) - c * q[qi].col(j) / (nqv * nqv));
        }
        dp[k].noalias() += du * s.a.transpose();
        RowMat da = p[k].transpose() * du;
        RowMat dz(m, m);
        for (int j = 0; j < m; ++j) {
          const double inner = s.a.col(j).dot(da.col(j));
          dz.col(j) = s.a.col(j).array() * (da.col(j).array() - inner);
        }
        dbeta += (dz.array() * s.r.array()).sum();
        RowMat dr = beta * dz;
        dpn[k].noalias() += qn[qi] * dr.transpose();
        dqn[qi].noalias() += pn[k] * dr;
      }
    }
    if (pp.requires_grad) {
      Tensor gp = zeros_like(pp.value);
      for (int k = 0; k < ways; ++k) {
        RowMat total = dp[k] + normalize_columns_backward(pn[k], p_norm[k], dpn[k]);
        MatMap(gp.ptr() + static_cast<std::size_t>(k) * d * m, d, m) = total;
      }
      accumulate(pp, gp);
    }
    if (pq.requires_grad) {
      Tensor gq = zeros_like(pq.value);
      for (int qi = 0; qi < nq; ++qi) {
        RowMat total = dq[qi] + normalize_columns_backward(qn[qi], q_norm[qi], dqn[qi]);
        MatMap(gq.ptr() + static_cast<std::size_t>(qi) * d * m, d, m) = total;
      }
      accumulate(pq, gq);
    }
    accumulate(pbeta, Tensor({1}, dbeta));
    accumulate(ptau, Tensor({1}, dtau));
  });
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const int batch = logits.shape()[0], ways = logits.shape()[1];
  if (static_cast<int>(labels.size()) != batch) throw ShapeError("cross_entropy: label count mismatch");
  Tensor probs = logits.value();
  double loss = 0.0;
  std::vector<int> lab(labels.begin(), labels.end());
  for (int b = 0; b < batch; ++b) {
    if (lab[b] < 0 || lab[b] >= ways) throw ShapeError("cross_entropy: label out of range");
    double* row = probs.ptr() + static_cast<std::size_t>(b) * ways;
    const double mx = *std::max_element(row, row + ways);
    double z = 0.0;
    for (int k = 0; k < ways; ++k) z += std::exp(row[k] - mx);
    loss += -(row[lab[b]] - mx - std::log(z));
    for (int k = 0; k < ways; ++k) row[k] = std::exp(row[k] - mx) / z;
  }
  return make_node(Tensor({1}, loss / batch), {logits},
                   [probs = std::move(probs), lab = std::move(lab), batch, ways](const Node& self) {
                     Tensor g = probs;
                     for (int b = 0; b < batch; ++b) g[b * ways + lab[b]] -= 1.0;
                     for (double& v : g.values()) v *= self.grad[0] / batch;
                     accumulate(*self.parents[0], g);
                   });
}

namespace {

// sign = +1: max(-kappa, z_best_other - z_t); sign = -1: max(-kappa, z_t - z_best_other).
Var signed_margin(const Var& logits, std::span<const int> labels, double kappa, double sign, const char* name) {
  require_rank(logits, 2, name);
  const int batch = logits.shape()[0], ways = logits.shape()[1];
  if (static_cast<int>(labels.size()) != batch) throw ShapeError(std::string(name) + ": label count mismatch");
  if (ways < 2) throw ShapeError(std::string(name) + ": needs at least two classes");
  std::vector<int> active_other(static_cast<std::size_t>(batch), -1);
  std::vector<int> lab(labels.begin(), labels.end());
  double total = 0.0;
  for (int b = 0; b < batch; ++b) {
    const double* row = logits.value().ptr() + static_cast<std::size_t>(b) * ways;
    int best = -1;
    for (int k = 0; k < ways; ++k) {
      if (k != lab[b] && (best < 0 || row[k] > row[best])) best = k;
    }
    const double margin = sign * (row[best] - row[lab[b]]);
    if (margin > -kappa) {
      total += margin;
      active_other[b] = best;
    } else {
      total += -kappa;
    }
  }
  return make_node(Tensor({1}, total / batch), {logits},
                   [active_other = std::move(active_other), lab = std::move(lab), batch, ways, sign](const Node& self) {
                     Tensor g({batch, ways});
                     for (int b = 0; b < batch; ++b) {
                       if (active_other[b] < 0) continue;
                       g[b * ways + active_other[b]] += sign * self.grad[0] / batch;
                       g[b * ways + lab[b]] -= sign * self.grad[0] / batch;
                     }
                     accumulate(*self.parents[0], g);
                   });
}

}  // namespace

Var margin_loss(const Var& logits, std::span<const int> labels, double kappa) {
  return signed_margin(logits, labels, kappa, 1.0, "margin_loss");
}

Var misclassification_margin_loss(const Var& logits, std::span<const int> labels, double kappa) {
  return signed_margin(logits, labels, kappa, -1.0, "misclassification_margin_loss");
}

}  // namespace fsad::ag
