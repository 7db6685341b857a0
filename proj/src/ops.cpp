#include "orthokd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "orthokd/errors.hpp"

namespace orthokd {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

bool tracks(const Variable& v) { return v.defined() && v.requires_grad(); }

template <typename... Vs>
bool any_tracks(const Vs&... vs) {
  return (tracks(vs) || ...);
}

Variable make_output(Tensor value, bool requires_grad) {
  return Variable(std::move(value), requires_grad);
}

void expect_rank(const Variable& v, std::size_t rank, const char* op, const char* what) {
  if (v.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + shape_str(v.shape()));
  }
}

void expect_same_shape(const Variable& a, const Variable& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": operand shapes differ, " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

struct ConvGeom {
  std::size_t n, c, h, w, o, k, ho, wo, stride, pad;
  std::size_t ckk() const { return c * k * k; }
  std::size_t cols() const { return n * ho * wo; }
};

void im2col(const Tensor& x, const ConvGeom& g, double* cols) {
  const std::size_t ncols = g.cols();
  const std::size_t plane = g.ho * g.wo;
  const double* xd = x.data();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        double* row = cols + ((c * g.k + ki) * g.k + kj) * ncols;
        for (std::size_t n = 0; n < g.n; ++n) {
          const double* xp = xd + (n * g.c + c) * g.h * g.w;
          double* dst = row + n * plane;
          for (std::size_t oh = 0; oh < g.ho; ++oh) {
            const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
            double* drow = dst + oh * g.wo;
            if (ih < 0 || ih >= static_cast<long>(g.h)) {
              std::fill(drow, drow + g.wo, 0.0);
              continue;
            }
            const double* xrow = xp + static_cast<std::size_t>(ih) * g.w;
            for (std::size_t ow = 0; ow < g.wo; ++ow) {
              const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
              drow[ow] = (iw < 0 || iw >= static_cast<long>(g.w)) ? 0.0
                                                                    : xrow[static_cast<std::size_t>(iw)];
            }
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvGeom& g, Tensor& dx) {
  const std::size_t ncols = g.cols();
  const std::size_t plane = g.ho * g.wo;
  double* xd = dx.data();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const double* row = cols + ((c * g.k + ki) * g.k + kj) * ncols;
        for (std::size_t n = 0; n < g.n; ++n) {
          double* xp = xd + (n * g.c + c) * g.h * g.w;
          const double* src = row + n * plane;
          for (std::size_t oh = 0; oh < g.ho; ++oh) {
            const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
            if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
            double* xrow = xp + static_cast<std::size_t>(ih) * g.w;
            const double* srow = src + oh * g.wo;
            for (std::size_t ow = 0; ow < g.wo; ++ow) {
              const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
              if (iw >= 0 && iw < static_cast<long>(g.w)) xrow[static_cast<std::size_t>(iw)] += srow[ow];
            }
          }
        }
      }
    }
  }
}

// Softmax of one row of logits scaled by 1/T; writes log-probabilities.
void log_softmax_row(const double* z, std::size_t c, double inv_t, double* logq) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < c; ++i) mx = std::max(mx, z[i] * inv_t);
  double s = 0.0;
  for (std::size_t i = 0; i < c; ++i) s += std::exp(z[i] * inv_t - mx);
  const double lse = mx + std::log(s);
  for (std::size_t i = 0; i < c; ++i) logq[i] = z[i] * inv_t - lse;
}

double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t padding) {
  if (stride == 0) throw ConfigError("conv2d: stride must be >= 1");
  if (in + 2 * padding < kernel) {
    throw ShapeError("conv2d: kernel " + std::to_string(kernel) + " exceeds padded extent " +
                     std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

Variable conv2d(Tape& tape, const Variable& input, const Variable& weight, const Variable& bias,
                Conv2dParams params) {
  expect_rank(input, 4, "conv2d", "input");
  expect_rank(weight, 4, "conv2d", "weight");
  const Shape& xs = input.shape();
  const Shape& ws = weight.shape();
  if (xs[1] != ws[1]) {
    throw ShapeError("conv2d: input channel axis (axis 1, " + std::to_string(xs[1]) +
                     ") does not match weight input-channel axis (axis 1, " +
                     std::to_string(ws[1]) + ")");
  }
  if (ws[2] != ws[3]) {
    throw ShapeError("conv2d: kernel axes 2 and 3 must be equal, got " + shape_str(ws));
  }
  if (bias.defined() && (bias.shape().size() != 1 || bias.shape()[0] != ws[0])) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) +
                     " does not match weight output-channel axis (axis 0, " +
                     std::to_string(ws[0]) + ")");
  }
  ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], 0, 0, params.stride, params.padding};
  g.ho = conv_out_extent(g.h, g.k, g.stride, g.pad);
  g.wo = conv_out_extent(g.w, g.k, g.stride, g.pad);

  auto cols = std::make_shared<std::vector<double>>(g.ckk() * g.cols());
  im2col(input.value(), g, cols->data());

  RowMat prod = CMapMat(weight.value().data(), g.o, g.ckk()) *
                CMapMat(cols->data(), g.ckk(), g.cols());
  Tensor out({g.n, g.o, g.ho, g.wo});
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t o = 0; o < g.o; ++o) {
      const double b = bias.defined() ? bias.value()[o] : 0.0;
      const double* src = prod.data() + o * g.cols() + n * plane;
      double* dst = out.data() + (n * g.o + o) * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + b;
    }
  }

  const bool rg = tape.recording() && any_tracks(input, weight, bias);
  Variable result = make_output(std::move(out), rg);
  if (!rg) return result;
  if (!tracks(weight)) cols.reset();

  tape.record(result, [g, cols, in = input.node(), w = weight.node(),
                       b = bias.defined() ? bias.node() : nullptr](const Tensor& grad) {
    const std::size_t plane = g.ho * g.wo;
    RowMat gmat(g.o, g.cols());
    for (std::size_t n = 0; n < g.n; ++n) {
      for (std::size_t o = 0; o < g.o; ++o) {
        const double* src = grad.data() + (n * g.o + o) * plane;
        std::copy(src, src + plane, gmat.data() + o * g.cols() + n * plane);
      }
    }
    if (w->requires_grad) {
      Tensor dw(w->value.shape());
      MapMat(dw.data(), g.o, g.ckk()).noalias() =
          gmat * CMapMat(cols->data(), g.ckk(), g.cols()).transpose();
      accumulate_grad(*w, dw);
    }
    if (b && b->requires_grad) {
      Tensor db(b->value.shape());
      for (std::size_t o = 0; o < g.o; ++o) db[o] = gmat.row(o).sum();
      accumulate_grad(*b, db);
    }
    if (in->requires_grad) {
      RowMat dcols = CMapMat(w->value.data(), g.o, g.ckk()).transpose() * gmat;
      Tensor dx(in->value.shape());
      col2im(dcols.data(), g, dx);
      accumulate_grad(*in, dx);
    }
  });
  return result;
}

BatchNormState::BatchNormState(std::size_t channels) {
  if (channels > 0) {
    running_mean = Tensor({channels}, 0.0);
    running_var = Tensor({channels}, 1.0);
  }
}

Variable batchnorm2d(Tape& tape, const Variable& input, const Variable& gamma,
                     const Variable& shift, BatchNormState* state, bool training) {
  expect_rank(input, 4, "batchnorm2d", "input");
  const Shape& xs = input.shape();
  const std::size_t n = xs[0], c = xs[1], plane = xs[2] * xs[3];
  if (gamma.numel() != c || shift.numel() != c) {
    throw ShapeError("batchnorm2d: gamma/shift length (" + std::to_string(gamma.numel()) + "/" +
                     std::to_string(shift.numel()) + ") must equal channel axis 1 (" +
                     std::to_string(c) + ")");
  }
  if (training && n < 2) {
    throw ShapeError("batchnorm2d: training mode needs batch size >= 2 (variance undefined)");
  }
  if (!training && (!state || state->running_mean.numel() != c)) {
    throw ShapeError("batchnorm2d: eval mode requires running statistics for " +
                     std::to_string(c) + " channels");
  }
  const double eps = state ? state->eps : 1e-5;
  const std::size_t m = n * plane;
  const double* x = input.value().data();

  std::vector<double> mean(c), inv_std(c);
  if (training) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double* p = x + (i * c + ch) * plane;
        for (std::size_t j = 0; j < plane; ++j) s += p[j];
      }
      const double mu = s / static_cast<double>(m);
      double v = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double* p = x + (i * c + ch) * plane;
        for (std::size_t j = 0; j < plane; ++j) v += (p[j] - mu) * (p[j] - mu);
      }
      const double var = v / static_cast<double>(m);
      mean[ch] = mu;
      inv_std[ch] = 1.0 / std::sqrt(var + eps);
      if (state && state->running_mean.numel() == c) {
        const double mom = state->momentum;
        const double unbiased = m > 1 ? v / static_cast<double>(m - 1) : var;
        state->running_mean[ch] = mom * state->running_mean[ch] + (1.0 - mom) * mu;
        state->running_var[ch] = mom * state->running_var[ch] + (1.0 - mom) * unbiased;
      }
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = state->running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(state->running_var[ch] + eps);
    }
  }

  auto xhat = std::make_shared<Tensor>(xs);
  Tensor out(xs);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* p = x + (i * c + ch) * plane;
      double* h = xhat->data() + (i * c + ch) * plane;
      double* o = out.data() + (i * c + ch) * plane;
      const double gm = gamma.value()[ch], bt = shift.value()[ch];
      for (std::size_t j = 0; j < plane; ++j) {
        h[j] = (p[j] - mean[ch]) * inv_std[ch];
        o[j] = gm * h[j] + bt;
      }
    }
  }

  const bool rg = tape.recording() && any_tracks(input, gamma, shift);
  Variable result = make_output(std::move(out), rg);
  if (!rg) return result;
  tape.record(result, [=, in = input.node(), gm = gamma.node(),
                       bt = shift.node()](const Tensor& grad) {
    std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* gp = grad.data() + (i * c + ch) * plane;
        const double* h = xhat->data() + (i * c + ch) * plane;
        for (std::size_t j = 0; j < plane; ++j) {
          sum_g[ch] += gp[j];
          sum_gx[ch] += gp[j] * h[j];
        }
      }
    }
    if (gm->requires_grad) accumulate_grad(*gm, Tensor({c}, sum_gx));
    if (bt->requires_grad) accumulate_grad(*bt, Tensor({c}, sum_g));
    if (in->requires_grad) {
      Tensor dx(in->value.shape());
      const double inv_m = 1.0 / static_cast<double>(m);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double* gp = grad.data() + (i * c + ch) * plane;
          const double* h = xhat->data() + (i * c + ch) * plane;
          double* d = dx.data() + (i * c + ch) * plane;
          const double k = gm->value[ch] * inv_std[ch];
          if (training) {
            const double mg = sum_g[ch] * inv_m, mgx = sum_gx[ch] * inv_m;
            for (std::size_t j = 0; j < plane; ++j) d[j] = k * (gp[j] - mg - h[j] * mgx);
          } else {
            for (std::size_t j = 0; j < plane; ++j) d[j] = k * gp[j];
          }
        }
      }
      accumulate_grad(*in, dx);
    }
  });
  return result;
}

Variable relu(Tape& tape, const Variable& x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  const bool rg = tape.recording() && tracks(x);
  Variable result = make_output(std::move(out), rg);
  if (!rg) return result;
  tape.record(result, [in = x.node()](const Tensor& grad) {
    Tensor dx(in->value.shape());
    for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] = in->value[i] > 0.0 ? grad[i] : 0.0;
    accumulate_grad(*in, dx);
  });
  return result;
}

Variable add(Tape& tape, const Variable& a, const Variable& b) {
  expect_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  const bool rg = tape.recording() && any_tracks(a, b);
  Variable result = make_output(std::move(out), rg);
  if (!rg) return result;
  tape.record(result, [na = a.node(), nb = b.node()](const Tensor& grad) {
    accumulate_grad(*na, grad);
    accumulate_grad(*nb, grad);
  });
  return result;
}

Variable mul(Tape& tape, const Variable& a, const Variable& b) {
  expect_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  const bool rg = tape.recording() && any_tracks(a, b);
  Variable result = make_output(std::move(out), rg);
  if (!rg) return result;
  tape.record(result, [na = a.node(), nb = b.node()](const Tensor& grad) {
    if (na->requires_grad) {
      Tensor d = grad;
      for (std::size_t i = 0; i < d.numel(); ++i) d[i] *= nb->value[i];
      accumulate_grad(*na, d);
    }
    if (nb->requires_grad) {
      Tensor d = grad;
      for (std::size_t i = 0; i < d.numel(); ++i) d[i] *= na->value[i];
      accumulate_grad(*nb, d);
    }
  });
  return result;
}

Variable scale(Tape& tape, const Variable& x, double c) {
  Tensor out = x.value();
  for (auto& v : out.values()) v *= c;
  const bool rg = tape.recording() && tracks(x);
  Variable result = make_output(std::move(out), rg);
  if (!rg) return result;
  tape.record(result, [in = x.node(), c](const Tensor& grad) {
    Tensor d = grad;
    for (auto& v : d.values()) v *= c;
    accumulate_grad(*in, d);
  });
  return result;
}

Variable sum(Tape& tape, const Variable& x) {
  const bool rg = tape.recording() && tracks(x);
  Variable result = make_output(Tensor::scalar(x.value().sum()), rg);
  if (!rg) return result;
  tape.record(result, [in = x.node()](const Tensor& grad) {
    accumulate_grad(*in, Tensor(in->value.shape(), grad[0]));
  });
  return result;
}

Variable abs_sum(Tape& tape, const Variable& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += std::abs(v);
  const bool rg = tape.recording() && tracks(x);
  Variable result = make_output(Tensor::scalar(s), rg);
  if (!rg) return result;
  tape.record(result, [in = x.node()](const Tensor& grad) {
    Tensor d(in->value.shape());
    for (std::size_t i = 0; i < d.numel(); ++i) d[i] = grad[0] * sign_of(in->value[i]);
    accumulate_grad(*in, d);
  });
  return result;
}

Variable shortcut(Tape& tape, const Variable& x, std::size_t stride, std::size_t out_channels) {
  expect_rank(x, 4, "shortcut", "input");
  const Shape& xs = x.shape();
  if (stride == 0) throw ConfigError("shortcut: stride must be >= 1");
  if (out_channels < xs[1]) {
    throw ShapeError("shortcut: cannot shrink channel axis 1 from " + std::to_string(xs[1]) +
                     " to " + std::to_string(out_channels));
  }
  const std::size_t n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  const std::size_t ho = (h - 1) / stride + 1, wo = (w - 1) / stride + 1;
  const std::size_t off = (out_channels - c) / 2;
  Tensor out({n, out_channels, ho, wo});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t r = 0; r < ho; ++r)
        for (std::size_t q = 0; q < wo; ++q)
          out.at(i, ch + off, r, q) = x.value().at(i, ch, r * stride, q * stride);
  const bool rg = tape.recording() && tracks(x);
  Variable result = make_output(std::move(out), rg);
  if (!rg) return result;
  tape.record(result, [=, in = x.node()](const Tensor& grad) {
    Tensor dx(in->value.shape());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t r = 0; r < ho; ++r)
          for (std::size_t q = 0; q < wo; ++q)
            dx.at(i, ch, r * stride, q * stride) = grad.at(i, ch + off, r, q);
    accumulate_grad(*in, dx);
  });
  return result;
}

Variable max_pool2x2(Tape& tape, const Variable& x) {
  expect_rank(x, 4, "max_pool2x2", "input");
  const Shape& xs = x.shape();
  const std::size_t n = xs[0], c = xs[1], ho = xs[2] / 2, wo = xs[3] / 2;
  if (ho == 0 || wo == 0) throw ShapeError("max_pool2x2: spatial extent below 2 in " + shape_str(xs));
  Tensor out({n, c, ho, wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  const Tensor& xv = x.value();
  std::size_t idx = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t r = 0; r < ho; ++r)
        for (std::size_t q = 0; q < wo; ++q, ++idx) {
          std::size_t best = ((i * c + ch) * xs[2] + 2 * r) * xs[3] + 2 * q;
          for (std::size_t dr = 0; dr < 2; ++dr)
            for (std::size_t dq = 0; dq < 2; ++dq) {
              const std::size_t k = ((i * c + ch) * xs[2] + 2 * r + dr) * xs[3] + 2 * q + dq;
              if (xv[k] > xv[best]) best = k;
            }
          (*argmax)[idx] = best;
          out[idx] = xv[best];
        }
  const bool rg = tape.recording() && tracks(x);
  Variable result = make_output(std::move(out), rg);
  if (!rg) return result;
  tape.record(result, [argmax, in = x.node()](const Tensor& grad) {
    Tensor dx(in->value.shape());
    for (std::size_t k = 0; k < argmax->size(); ++k) dx[(*argmax)[k]] += grad[k];
    accumulate_grad(*in, dx);
  });
  return result;
}

Variable global_avg_pool(Tape& tape, const Variable& x) {
  expect_rank(x, 4, "global_avg_pool", "input");
  const Shape& xs = x.shape();
  const std::size_t n = xs[0], c = xs[1], plane = xs[2] * xs[3];
  Tensor out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    const double* p = x.value().data() + i * plane;
    double s = 0.0;
    for (std::size_t j = 0; j < plane; ++j) s += p[j];
    out[i] = s / static_cast<double>(plane);
  }
  const bool rg = tape.recording() && tracks(x);
  Variable result = make_output(std::move(out), rg);
  if (!rg) return result;
  tape.record(result, [=, in = x.node()](const Tensor& grad) {
    Tensor dx(in->value.shape());
    for (std::size_t i = 0; i < n * c; ++i) {
      const double g = grad[i] / static_cast<double>(plane);
      std::fill(dx.data() + i * plane, dx.data() + (i + 1) * plane, g);
    }
    accumulate_grad(*in, dx);
  });
  return result;
}

Variable linear(Tape& tape, const Variable& x, const Variable& weight, const Variable& bias) {
  expect_rank(x, 2, "linear", "input");
  expect_rank(weight, 2, "linear", "weight");
  const std::size_t n = x.shape()[0], f = x.shape()[1], o = weight.shape()[0];
  if (weight.shape()[1] != f) {
    throw ShapeError("linear: input feature axis (axis 1, " + std::to_string(f) +
                     ") does not match weight axis 1 (" + std::to_string(weight.shape()[1]) + ")");
  }
  if (bias.defined() && bias.numel() != o) {
    throw ShapeError("linear: bias length " + std::to_string(bias.numel()) +
                     " does not match weight axis 0 (" + std::to_string(o) + ")");
  }
  Tensor out({n, o});
  MapMat(out.data(), n, o).noalias() =
      CMapMat(x.value().data(), n, f) * CMapMat(weight.value().data(), o, f).transpose();
  if (bias.defined()) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < o; ++j) out.at(i, j) += bias.value()[j];
  }
  const bool rg = tape.recording() && any_tracks(x, weight, bias);
  Variable result = make_output(std::move(out), rg);
  if (!rg) return result;
  tape.record(result, [=, in = x.node(), w = weight.node(),
                       b = bias.defined() ? bias.node() : nullptr](const Tensor& grad) {
    CMapMat g(grad.data(), n, o);
    if (in->requires_grad) {
      Tensor dx(in->value.shape());
      MapMat(dx.data(), n, f).noalias() = g * CMapMat(w->value.data(), o, f);
      accumulate_grad(*in, dx);
    }
    if (w->requires_grad) {
      Tensor dw(w->value.shape());
      MapMat(dw.data(), o, f).noalias() = g.transpose() * CMapMat(in->value.data(), n, f);
      accumulate_grad(*w, dw);
    }
    if (b && b->requires_grad) {
      Tensor db({o});
      for (std::size_t j = 0; j < o; ++j) db[j] = g.col(j).sum();
      accumulate_grad(*b, db);
    }
  });
  return result;
}

namespace {

// Shared body of soft-target cross-entropy and KL: both have gradient
// (q * sum(t) - t) / (T * N) with respect to the logits.
Variable soft_target_loss(Tape& tape, const Variable& logits, const Tensor& targets,
                          double temperature, bool subtract_entropy, const char* op) {
  expect_rank(logits, 2, op, "logits");
  if (targets.shape() != logits.shape()) {
    throw ShapeError(std::string(op) + ": target shape " + shape_str(targets.shape()) +
                     " does not match logits " + shape_str(logits.shape()));
  }
  if (!(temperature > 0.0)) throw ConfigError(std::string(op) + ": temperature must be > 0");
  const std::size_t n = logits.shape()[0], c = logits.shape()[1];
  const double inv_t = 1.0 / temperature;
  auto logq = std::make_shared<Tensor>(logits.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    log_softmax_row(logits.value().data() + i * c, c, inv_t, logq->data() + i * c);
    for (std::size_t j = 0; j < c; ++j) {
      const double t = targets.at(i, j);
      if (t == 0.0) continue;
      total -= t * logq->at(i, j);
      if (subtract_entropy) total += t * std::log(t);
    }
  }
  const bool rg = tape.recording() && tracks(logits);
  Variable result = make_output(Tensor::scalar(total / static_cast<double>(n)), rg);
  if (!rg) return result;
  tape.record(result, [=, in = logits.node()](const Tensor& grad) {
    Tensor d(in->value.shape());
    const double k = grad[0] * inv_t / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      double tsum = 0.0;
      for (std::size_t j = 0; j < c; ++j) tsum += targets.at(i, j);
      for (std::size_t j = 0; j < c; ++j)
        d.at(i, j) = k * (std::exp(logq->at(i, j)) * tsum - targets.at(i, j));
    }
    accumulate_grad(*in, d);
  });
  return result;
}

}  // namespace

Variable softmax_cross_entropy(Tape& tape, const Variable& logits, const Tensor& targets,
                               double temperature) {
  return soft_target_loss(tape, logits, targets, temperature, false, "softmax_cross_entropy");
}

Variable kl_div_with_logits(Tape& tape, const Variable& logits, const Tensor& target_probs,
                            double temperature) {
  return soft_target_loss(tape, logits, target_probs, temperature, true, "kl_div_with_logits");
}

Variable normalized_l1_distance(Tape& tape, const Variable& a, const Variable& b, double eps,
                                std::size_t* zero_norms) {
  expect_same_shape(a, b, "normalized_l1_distance");
  const std::size_t n = a.shape()[0];
  const std::size_t m = a.numel() / n;
  auto na = std::make_shared<std::vector<double>>(n);
  auto nb = std::make_shared<std::vector<double>>(n);
  std::size_t guarded = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* pa = a.value().data() + i * m;
    const double* pb = b.value().data() + i * m;
    double sa = 0.0, sb = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      sa += pa[j] * pa[j];
      sb += pb[j] * pb[j];
    }
    (*na)[i] = std::sqrt(sa);
    (*nb)[i] = std::sqrt(sb);
    if ((*na)[i] < eps) ++guarded;
    if ((*nb)[i] < eps) ++guarded;
    const double da = std::max((*na)[i], eps), db = std::max((*nb)[i], eps);
    for (std::size_t j = 0; j < m; ++j) total += std::abs(pa[j] / da - pb[j] / db);
  }
  if (zero_norms) *zero_norms = guarded;
  const bool rg = tape.recording() && any_tracks(a, b);
  Variable result = make_output(Tensor::scalar(total / static_cast<double>(n)), rg);
  if (!rg) return result;
  tape.record(result, [=, pa_node = a.node(), pb_node = b.node()](const Tensor& grad) {
    const double k = grad[0] / static_cast<double>(n);
    Tensor ga(pa_node->value.shape()), gb(pb_node->value.shape());
    std::vector<double> s(m);
    for (std::size_t i = 0; i < n; ++i) {
      const double* pa = pa_node->value.data() + i * m;
      const double* pb = pb_node->value.data() + i * m;
      const double da = std::max((*na)[i], eps), db = std::max((*nb)[i], eps);
      double ua_s = 0.0, ub_s = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        s[j] = k * sign_of(pa[j] / da - pb[j] / db);
        ua_s += (pa[j] / da) * s[j];
        ub_s += (pb[j] / db) * s[j];
      }
      // d(a/|a|)/da = (I - u u^T)/|a|; below the floor the norm is a constant.
      const bool fa = (*na)[i] >= eps, fb = (*nb)[i] >= eps;
      for (std::size_t j = 0; j < m; ++j) {
        ga[i * m + j] = (s[j] - (fa ? (pa[j] / da) * ua_s : 0.0)) / da;
        gb[i * m + j] = -(s[j] - (fb ? (pb[j] / db) * ub_s : 0.0)) / db;
      }
    }
    accumulate_grad(*pa_node, ga);
    accumulate_grad(*pb_node, gb);
  });
  return result;
}

}  // namespace orthokd
