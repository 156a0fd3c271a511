#include "sitar/tape.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace sitar::ad {

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape == b.shape, std::string(op) + ": shape mismatch " +
                                  Tensor::shape_str(a.shape) + " vs " +
                                  Tensor::shape_str(b.shape));
}

}  // namespace

Var add(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor &av = t.value(a), &bv = t.value(b);
  check_same_shape(av, bv, "add");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv.data[i];
  const int ai = a.id, bi = b.id, oi = static_cast<int>(t.node_count());
  return t.push(std::move(out), [ai, bi, oi](Tape& tp) {
    const auto& go = tp.grad(oi);
    auto &ga = tp.grad(ai), &gb = tp.grad(bi);
    for (std::size_t i = 0; i < go.size(); ++i) {
      ga[i] += go[i];
      gb[i] += go[i];
    }
  });
}

Var sub(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor &av = t.value(a), &bv = t.value(b);
  check_same_shape(av, bv, "sub");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= bv.data[i];
  const int ai = a.id, bi = b.id, oi = static_cast<int>(t.node_count());
  return t.push(std::move(out), [ai, bi, oi](Tape& tp) {
    const auto& go = tp.grad(oi);
    auto &ga = tp.grad(ai), &gb = tp.grad(bi);
    for (std::size_t i = 0; i < go.size(); ++i) {
      ga[i] += go[i];
      gb[i] -= go[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor &av = t.value(a), &bv = t.value(b);
  check_same_shape(av, bv, "mul");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= bv.data[i];
  const int ai = a.id, bi = b.id, oi = static_cast<int>(t.node_count());
  return t.push(std::move(out), [ai, bi, oi](Tape& tp) {
    const auto& go = tp.grad(oi);
    const auto &av2 = tp.value(ai).data, &bv2 = tp.value(bi).data;
    auto &ga = tp.grad(ai), &gb = tp.grad(bi);
    for (std::size_t i = 0; i < go.size(); ++i) {
      ga[i] += go[i] * bv2[i];
      gb[i] += go[i] * av2[i];
    }
  });
}

Var add_const(Var a, const Tensor& c) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  check_same_shape(av, c, "add_const");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += c.data[i];
  const int ai = a.id, oi = static_cast<int>(t.node_count());
  return t.push(std::move(out), [ai, oi](Tape& tp) {
    const auto& go = tp.grad(oi);
    auto& ga = tp.grad(ai);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
}

Var mul_const(Var a, const Tensor& c) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  check_same_shape(av, c, "mul_const");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= c.data[i];
  const int ai = a.id, oi = static_cast<int>(t.node_count());
  // The constant is copied into the closure; it has no gradient path.
  Tensor cc = c;
  return t.push(std::move(out), [ai, oi, cc = std::move(cc)](Tape& tp) {
    const auto& go = tp.grad(oi);
    auto& ga = tp.grad(ai);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * cc.data[i];
  });
}

Var affine(Var x, double a, double b) {
  Tape& t = *x.tape;
  Tensor out = t.value(x);
  for (auto& v : out.data) v = a * v + b;
  const int xi = x.id, oi = static_cast<int>(t.node_count());
  return t.push(std::move(out), [xi, oi, a](Tape& tp) {
    const auto& go = tp.grad(oi);
    auto& gx = tp.grad(xi);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += a * go[i];
  });
}

Var relu(Var x) {
  Tape& t = *x.tape;
  Tensor out = t.value(x);
  for (auto& v : out.data) v = v > 0.0 ? v : 0.0;  // subgradient at 0 is 0
  const int xi = x.id, oi = static_cast<int>(t.node_count());
  return t.push(std::move(out), [xi, oi](Tape& tp) {
    const auto& go = tp.grad(oi);
    const auto& xv = tp.value(xi).data;
    auto& gx = tp.grad(xi);
    for (std::size_t i = 0; i < go.size(); ++i)
      if (xv[i] > 0.0) gx[i] += go[i];
  });
}

Var exp_(Var x) {
  Tape& t = *x.tape;
  Tensor out = t.value(x);
  for (auto& v : out.data) v = std::exp(v);
  const int xi = x.id, oi = static_cast<int>(t.node_count());
  return t.push(std::move(out), [xi, oi](Tape& tp) {
    const auto& go = tp.grad(oi);
    const auto& ov = tp.value(oi).data;
    auto& gx = tp.grad(xi);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * ov[i];
  });
}

Var log_(Var x) {
  Tape& t = *x.tape;
  Tensor out = t.value(x);
  for (auto& v : out.data) v = std::log(v);
  const int xi = x.id, oi = static_cast<int>(t.node_count());
  return t.push(std::move(out), [xi, oi](Tape& tp) {
    const auto& go = tp.grad(oi);
    const auto& xv = tp.value(xi).data;
    auto& gx = tp.grad(xi);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] / xv[i];
  });
}

Var square(Var x) {
  Tape& t = *x.tape;
  Tensor out = t.value(x);
  for (auto& v : out.data) v = v * v;
  const int xi = x.id, oi = static_cast<int>(t.node_count());
  return t.push(std::move(out), [xi, oi](Tape& tp) {
    const auto& go = tp.grad(oi);
    const auto& xv = tp.value(xi).data;
    auto& gx = tp.grad(xi);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += 2.0 * xv[i] * go[i];
  });
}

Var tanh_(Var x) {
  Tape& t = *x.tape;
  Tensor out = t.value(x);
  for (auto& v : out.data) v = std::tanh(v);
  const int xi = x.id, oi = static_cast<int>(t.node_count());
  return t.push(std::move(out), [xi, oi](Tape& tp) {
    const auto& go = tp.grad(oi);
    const auto& ov = tp.value(oi).data;
    auto& gx = tp.grad(xi);
    for (std::size_t i = 0; i < go.size(); ++i)
      gx[i] += go[i] * (1.0 - ov[i] * ov[i]);
  });
}

Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor &av = t.value(a), &bv = t.value(b);
  require(av.ndim() == 2 && bv.ndim() == 2 && av.dim(1) == bv.dim(0),
          "matmul: incompatible shapes " + Tensor::shape_str(av.shape) + " x " +
              Tensor::shape_str(bv.shape));
  const int M = static_cast<int>(av.dim(0));
  const int K = static_cast<int>(av.dim(1));
  const int N = static_cast<int>(bv.dim(1));
  Tensor out({av.dim(0), bv.dim(1)});
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, M, N, K, 1.0,
              av.data.data(), K, bv.data.data(), N, 0.0, out.data.data(), N);
  const int ai = a.id, bi = b.id, oi = static_cast<int>(t.node_count());
  return t.push(std::move(out), [ai, bi, oi, M, K, N](Tape& tp) {
    const auto& go = tp.grad(oi);
    const auto &av2 = tp.value(ai).data, &bv2 = tp.value(bi).data;
    // dA += dC * B^T ; dB += A^T * dC
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, M, K, N, 1.0, go.data(),
                N, bv2.data(), N, 1.0, tp.grad(ai).data(), K);
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, K, N, M, 1.0, av2.data(),
                K, go.data(), N, 1.0, tp.grad(bi).data(), N);
  });
}

Var add_rowvec(Var x, Var b) {
  Tape& t = *x.tape;
  const Tensor &xv = t.value(x), &bv = t.value(b);
  require(xv.ndim() == 2 && bv.ndim() == 1 && xv.dim(1) == bv.dim(0),
          "add_rowvec: need [M,N] + [N], got " + Tensor::shape_str(xv.shape) +
              " + " + Tensor::shape_str(bv.shape));
  const std::size_t M = xv.dim(0), N = xv.dim(1);
  Tensor out = xv;
  for (std::size_t r = 0; r < M; ++r)
    for (std::size_t c = 0; c < N; ++c) out.data[r * N + c] += bv.data[c];
  const int xi = x.id, bi = b.id, oi = static_cast<int>(t.node_count());
  return t.push(std::move(out), [xi, bi, oi, M, N](Tape& tp) {
    const auto& go = tp.grad(oi);
    auto &gx = tp.grad(xi), &gb = tp.grad(bi);
    for (std::size_t r = 0; r < M; ++r)
      for (std::size_t c = 0; c < N; ++c) {
        gx[r * N + c] += go[r * N + c];
        gb[c] += go[r * N + c];
      }
  });
}

Var sum(Var x) {
  Tape& t = *x.tape;
  double s = 0.0;
  for (double v : t.value(x).data) s += v;
  const int xi = x.id, oi = static_cast<int>(t.node_count());
  return t.push(Tensor::scalar(s), [xi, oi](Tape& tp) {
    const double g = tp.grad(oi)[0];
    for (auto& v : tp.grad(xi)) v += g;
  });
}

Var mean(Var x) {
  Tape& t = *x.tape;
  const std::size_t n = t.value(x).size();
  double s = 0.0;
  for (double v : t.value(x).data) s += v;
  const int xi = x.id, oi = static_cast<int>(t.node_count());
  return t.push(Tensor::scalar(s / static_cast<double>(n)), [xi, oi, n](Tape& tp) {
    const double g = tp.grad(oi)[0] / static_cast<double>(n);
    for (auto& v : tp.grad(xi)) v += g;
  });
}

Var softmax(Var x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  require(xv.ndim() == 2, "softmax: expected 2-D tensor, got " +
                              Tensor::shape_str(xv.shape));
  const std::size_t B = xv.dim(0), C = xv.dim(1);
  Tensor out = xv;
  for (std::size_t b = 0; b < B; ++b) {
    double* row = out.data.data() + b * C;
    const double mx = *std::max_element(row, row + C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += (row[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < C; ++c) row[c] /= z;
  }
  const int xi = x.id, oi = static_cast<int>(t.node_count());
  return t.push(std::move(out), [xi, oi, B, C](Tape& tp) {
    const auto& go = tp.grad(oi);
    const auto& sv = tp.value(oi).data;
    auto& gx = tp.grad(xi);
    for (std::size_t b = 0; b < B; ++b) {
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += go[b * C + c] * sv[b * C + c];
      for (std::size_t c = 0; c < C; ++c)
        gx[b * C + c] += sv[b * C + c] * (go[b * C + c] - dot);
    }
  });
}

Var cross_entropy_logits(Var logits, const std::vector<int>& labels) {
  Tape& t = *logits.tape;
  const Tensor& zv = t.value(logits);
  require(zv.ndim() == 2, "cross_entropy_logits: expected [B,C] logits");
  const std::size_t B = zv.dim(0), C = zv.dim(1);
  require(labels.size() == B, "cross_entropy_logits: label count mismatch");
  for (int y : labels)
    require(y >= 0 && static_cast<std::size_t>(y) < C,
            "cross_entropy_logits: label out of range");
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = zv.data.data() + b * C;
    const double mx = *std::max_element(row, row + C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    loss += std::log(z) + mx - row[labels[b]];
  }
  loss /= static_cast<double>(B);
  const int zi = logits.id, oi = static_cast<int>(t.node_count());
  std::vector<int> ls = labels;
  return t.push(Tensor::scalar(loss), [zi, oi, B, C, ls = std::move(ls)](Tape& tp) {
    const double g = tp.grad(oi)[0] / static_cast<double>(B);
    const auto& zv2 = tp.value(zi).data;
    auto& gz = tp.grad(zi);
    for (std::size_t b = 0; b < B; ++b) {
      const double* row = zv2.data() + b * C;
      const double mx = *std::max_element(row, row + C);
      double z = 0.0;
      for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
      for (std::size_t c = 0; c < C; ++c) {
        double p = std::exp(row[c] - mx) / z;
        gz[b * C + c] += g * (p - (static_cast<std::size_t>(ls[b]) == c ? 1.0 : 0.0));
      }
    }
  });
}

Var reshape(Var x, std::vector<std::size_t> shape) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  require(Tensor::count(shape) == xv.size(),
          "reshape: element count mismatch " + Tensor::shape_str(xv.shape) +
              " -> " + Tensor::shape_str(shape));
  Tensor out(std::move(shape), xv.data);
  const int xi = x.id, oi = static_cast<int>(t.node_count());
  return t.push(std::move(out), [xi, oi](Tape& tp) {
    const auto& go = tp.grad(oi);
    auto& gx = tp.grad(xi);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
  });
}

Var concat(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor &av = t.value(a), &bv = t.value(b);
  require(av.ndim() == 2 && bv.ndim() == 2 && av.dim(0) == bv.dim(0),
          "concat: need 2-D tensors with equal leading extent");
  const std::size_t M = av.dim(0), Na = av.dim(1), Nb = bv.dim(1);
  Tensor out({M, Na + Nb});
  for (std::size_t r = 0; r < M; ++r) {
    std::copy_n(av.data.data() + r * Na, Na, out.data.data() + r * (Na + Nb));
    std::copy_n(bv.data.data() + r * Nb, Nb, out.data.data() + r * (Na + Nb) + Na);
  }
  const int ai = a.id, bi = b.id, oi = static_cast<int>(t.node_count());
  return t.push(std::move(out), [ai, bi, oi, M, Na, Nb](Tape& tp) {
    const auto& go = tp.grad(oi);
    auto &ga = tp.grad(ai), &gb = tp.grad(bi);
    for (std::size_t r = 0; r < M; ++r) {
      for (std::size_t c = 0; c < Na; ++c) ga[r * Na + c] += go[r * (Na + Nb) + c];
      for (std::size_t c = 0; c < Nb; ++c)
        gb[r * Nb + c] += go[r * (Na + Nb) + Na + c];
    }
  });
}

Tensor fd_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                   double step) {
  Tensor g(x.shape);
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe.data[i] = x.data[i] + step;
    const double fp = f(probe);
    probe.data[i] = x.data[i] - step;
    const double fm = f(probe);
    probe.data[i] = x.data[i];
    require(std::isfinite(fp) && std::isfinite(fm),
            "fd_gradient: non-finite function value");
    g.data[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

}  // namespace sitar::ad
