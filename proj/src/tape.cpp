#include "recguard/tape.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace recguard {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

namespace {
void check(bool ok, const char* msg) {
  if (!ok) throw std::invalid_argument(msg);
}
}  // namespace

int Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

int Tape::leaf(Tensor v, bool requires_grad) {
  Node n;
  n.value = std::move(v);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

Tensor& Tape::grad_buf(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.grad_live) {
    n.grad = Tensor::zeros(n.value.shape());
    n.grad_live = true;
  }
  return n.grad;
}

const Tensor& Tape::grad(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  static const Tensor empty;
  return n.grad_live ? n.grad : empty;
}

void Tape::accum(int id, const Tensor& g) {
  if (!nodes_[static_cast<std::size_t>(id)].requires_grad) return;
  grad_buf(id).add_(g);
}

void Tape::accum_scaled(int id, const Tensor& g, float s) {
  if (!nodes_[static_cast<std::size_t>(id)].requires_grad) return;
  Tensor& dst = grad_buf(id);
  for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += g[i] * s;
}

void Tape::backward(int loss) {
  check(nodes_[static_cast<std::size_t>(loss)].value.numel() == 1, "backward: loss must be scalar");
  grad_buf(loss)[0] = 1.0f;
  for (int i = loss; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.back && n.requires_grad && n.grad_live) n.back(*this);
  }
}

// ---- elementwise ----

int Tape::add(int a, int b) {
  check(value(a).same_shape(value(b)), "add: shape mismatch");
  Node n;
  n.value = value(a);
  n.value.add_(value(b));
  n.requires_grad = requires_grad(a) || requires_grad(b);
  int id = static_cast<int>(nodes_.size());
  n.back = [a, b, id](Tape& t) {
    t.accum(a, t.grad(id));
    t.accum(b, t.grad(id));
  };
  return push(std::move(n));
}

int Tape::sub(int a, int b) {
  check(value(a).same_shape(value(b)), "sub: shape mismatch");
  Node n;
  n.value = value(a);
  for (std::size_t i = 0; i < n.value.numel(); ++i) n.value[i] -= value(b)[i];
  n.requires_grad = requires_grad(a) || requires_grad(b);
  int id = static_cast<int>(nodes_.size());
  n.back = [a, b, id](Tape& t) {
    t.accum(a, t.grad(id));
    t.accum_scaled(b, t.grad(id), -1.0f);
  };
  return push(std::move(n));
}

int Tape::neg(int a) { return scale(a, -1.0f); }

int Tape::mul(int a, int b) {
  check(value(a).same_shape(value(b)), "mul: shape mismatch");
  Node n;
  n.value = value(a);
  for (std::size_t i = 0; i < n.value.numel(); ++i) n.value[i] *= value(b)[i];
  n.requires_grad = requires_grad(a) || requires_grad(b);
  int id = static_cast<int>(nodes_.size());
  n.back = [a, b, id](Tape& t) {
    const Tensor& g = t.grad(id);
    if (t.requires_grad(a)) {
      Tensor& da = t.grad_buf(a);
      const Tensor& vb = t.value(b);
      for (std::size_t i = 0; i < da.numel(); ++i) da[i] += g[i] * vb[i];
    }
    if (t.requires_grad(b)) {
      Tensor& db = t.grad_buf(b);
      const Tensor& va = t.value(a);
      for (std::size_t i = 0; i < db.numel(); ++i) db[i] += g[i] * va[i];
    }
  };
  return push(std::move(n));
}

int Tape::scale(int a, float s) {
  Node n;
  n.value = value(a);
  n.value.scale_(s);
  n.requires_grad = requires_grad(a);
  int id = static_cast<int>(nodes_.size());
  n.back = [a, s, id](Tape& t) { t.accum_scaled(a, t.grad(id), s); };
  return push(std::move(n));
}

int Tape::relu(int a) {
  Node n;
  n.value = value(a);
  for (auto& v : n.value.raw()) v = v > 0.0f ? v : 0.0f;
  n.requires_grad = requires_grad(a);
  int id = static_cast<int>(nodes_.size());
  n.back = [a, id](Tape& t) {
    if (!t.requires_grad(a)) return;
    const Tensor& g = t.grad(id);
    const Tensor& x = t.value(a);
    Tensor& da = t.grad_buf(a);
    for (std::size_t i = 0; i < da.numel(); ++i)
      if (x[i] > 0.0f) da[i] += g[i];
  };
  return push(std::move(n));
}

int Tape::sigmoid(int a) {
  Node n;
  n.value = value(a);
  for (auto& v : n.value.raw()) {
    v = v >= 0.0f ? 1.0f / (1.0f + std::exp(-v)) : std::exp(v) / (1.0f + std::exp(v));
  }
  n.requires_grad = requires_grad(a);
  int id = static_cast<int>(nodes_.size());
  n.back = [a, id](Tape& t) {
    if (!t.requires_grad(a)) return;
    const Tensor& g = t.grad(id);
    const Tensor& y = t.value(id);
    Tensor& da = t.grad_buf(a);
    for (std::size_t i = 0; i < da.numel(); ++i) da[i] += g[i] * y[i] * (1.0f - y[i]);
  };
  return push(std::move(n));
}

int Tape::softplus(int a) {
  Node n;
  n.value = value(a);
  for (auto& v : n.value.raw()) {
    // log(1+e^x), stable both tails
    v = v > 0.0f ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  }
  n.requires_grad = requires_grad(a);
  int id = static_cast<int>(nodes_.size());
  n.back = [a, id](Tape& t) {
    if (!t.requires_grad(a)) return;
    const Tensor& g = t.grad(id);
    const Tensor& x = t.value(a);
    Tensor& da = t.grad_buf(a);
    for (std::size_t i = 0; i < da.numel(); ++i) {
      float s = x[i] >= 0.0f ? 1.0f / (1.0f + std::exp(-x[i]))
                             : std::exp(x[i]) / (1.0f + std::exp(x[i]));
      da[i] += g[i] * s;
    }
  };
  return push(std::move(n));
}

int Tape::clamp01(int a) {
  Node n;
  n.value = value(a);
  for (auto& v : n.value.raw()) v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
  n.requires_grad = requires_grad(a);
  int id = static_cast<int>(nodes_.size());
  n.back = [a, id](Tape& t) {
    if (!t.requires_grad(a)) return;
    const Tensor& g = t.grad(id);
    const Tensor& x = t.value(a);
    Tensor& da = t.grad_buf(a);
    for (std::size_t i = 0; i < da.numel(); ++i)
      if (x[i] > 0.0f && x[i] < 1.0f) da[i] += g[i];
  };
  return push(std::move(n));
}

// ---- matrix / vector ----

int Tape::matmul(int a, int b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  check(va.rank() == 2 && vb.rank() == 2 && va.dim(1) == vb.dim(0), "matmul: shape mismatch");
  int N = va.dim(0), K = va.dim(1), M = vb.dim(1);
  Node n;
  n.value = Tensor({N, M});
  {
    CMapMat A(va.data(), N, K), B(vb.data(), K, M);
    MapMat Y(n.value.data(), N, M);
    Y.noalias() = A * B;
  }
  n.requires_grad = requires_grad(a) || requires_grad(b);
  int id = static_cast<int>(nodes_.size());
  n.back = [a, b, id, N, K, M](Tape& t) {
    CMapMat G(t.grad(id).data(), N, M);
    if (t.requires_grad(a)) {
      CMapMat B(t.value(b).data(), K, M);
      MapMat dA(t.grad_buf(a).data(), N, K);
      dA.noalias() += G * B.transpose();
    }
    if (t.requires_grad(b)) {
      CMapMat A(t.value(a).data(), N, K);
      MapMat dB(t.grad_buf(b).data(), K, M);
      dB.noalias() += A.transpose() * G;
    }
  };
  return push(std::move(n));
}

int Tape::transpose(int a) {
  const Tensor& va = value(a);
  check(va.rank() == 2, "transpose: rank-2 only");
  int N = va.dim(0), M = va.dim(1);
  Node n;
  n.value = Tensor({M, N});
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < M; ++j) n.value.at(j, i) = va.at(i, j);
  n.requires_grad = requires_grad(a);
  int id = static_cast<int>(nodes_.size());
  n.back = [a, id, N, M](Tape& t) {
    if (!t.requires_grad(a)) return;
    const Tensor& g = t.grad(id);
    Tensor& da = t.grad_buf(a);
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < M; ++j) da.at(i, j) += g.at(j, i);
  };
  return push(std::move(n));
}

int Tape::dense(int x, int w, int b) {
  const Tensor& vx = value(x);
  const Tensor& vw = value(w);
  check(vx.rank() == 1 && vw.rank() == 2 && vw.dim(1) == vx.dim(0), "dense: shape mismatch");
  int M = vw.dim(0), N = vw.dim(1);
  if (b >= 0) check(value(b).rank() == 1 && value(b).dim(0) == M, "dense: bias shape");
  Node n;
  n.value = Tensor({M});
  {
    CMapMat W(vw.data(), M, N);
    Eigen::Map<const Eigen::VectorXf> X(vx.data(), N);
    Eigen::Map<Eigen::VectorXf> Y(n.value.data(), M);
    Y.noalias() = W * X;
    if (b >= 0)
      for (int i = 0; i < M; ++i) n.value[static_cast<std::size_t>(i)] += value(b)[static_cast<std::size_t>(i)];
  }
  n.requires_grad = requires_grad(x) || requires_grad(w) || (b >= 0 && requires_grad(b));
  int id = static_cast<int>(nodes_.size());
  n.back = [x, w, b, id, M, N](Tape& t) {
    Eigen::Map<const Eigen::VectorXf> G(t.grad(id).data(), M);
    if (t.requires_grad(x)) {
      CMapMat W(t.value(w).data(), M, N);
      Eigen::Map<Eigen::VectorXf> dX(t.grad_buf(x).data(), N);
      dX.noalias() += W.transpose() * G;
    }
    if (t.requires_grad(w)) {
      Eigen::Map<const Eigen::VectorXf> X(t.value(x).data(), N);
      MapMat dW(t.grad_buf(w).data(), M, N);
      dW.noalias() += G * X.transpose();
    }
    if (b >= 0) t.accum(b, t.grad(id));
  };
  return push(std::move(n));
}

int Tape::add_rowwise(int x, int b) {
  const Tensor& vx = value(x);
  const Tensor& vb = value(b);
  check(vx.rank() == 2 && vb.rank() == 1 && vb.dim(0) == vx.dim(1), "add_rowwise: shape");
  int N = vx.dim(0), M = vx.dim(1);
  Node n;
  n.value = vx;
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < M; ++j) n.value.at(i, j) += vb[static_cast<std::size_t>(j)];
  n.requires_grad = requires_grad(x) || requires_grad(b);
  int id = static_cast<int>(nodes_.size());
  n.back = [x, b, id, N, M](Tape& t) {
    const Tensor& g = t.grad(id);
    t.accum(x, g);
    if (t.requires_grad(b)) {
      Tensor& db = t.grad_buf(b);
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < M; ++j) db[static_cast<std::size_t>(j)] += g.at(i, j);
    }
  };
  return push(std::move(n));
}

int Tape::dot(int a, int b) {
  check(value(a).same_shape(value(b)), "dot: shape mismatch");
  Node n;
  n.value = Tensor({1});
  double s = 0.0;
  for (std::size_t i = 0; i < value(a).numel(); ++i)
    s += static_cast<double>(value(a)[i]) * value(b)[i];
  n.value[0] = static_cast<float>(s);
  n.requires_grad = requires_grad(a) || requires_grad(b);
  int id = static_cast<int>(nodes_.size());
  n.back = [a, b, id](Tape& t) {
    float g = t.grad(id)[0];
    t.accum_scaled(a, t.value(b), g);
    t.accum_scaled(b, t.value(a), g);
  };
  return push(std::move(n));
}

int Tape::sum(int a) {
  Node n;
  n.value = Tensor({1});
  n.value[0] = static_cast<float>(value(a).sum());
  n.requires_grad = requires_grad(a);
  int id = static_cast<int>(nodes_.size());
  n.back = [a, id](Tape& t) {
    if (!t.requires_grad(a)) return;
    float g = t.grad(id)[0];
    Tensor& da = t.grad_buf(a);
    for (auto& v : da.raw()) v += g;
  };
  return push(std::move(n));
}

int Tape::mean(int a) {
  int s = sum(a);
  return scale(s, 1.0f / static_cast<float>(value(a).numel()));
}

int Tape::sq_norm(int a) {
  Node n;
  n.value = Tensor({1});
  double s = 0.0;
  for (float v : value(a).raw()) s += static_cast<double>(v) * v;
  n.value[0] = static_cast<float>(s);
  n.requires_grad = requires_grad(a);
  int id = static_cast<int>(nodes_.size());
  n.back = [a, id](Tape& t) {
    if (!t.requires_grad(a)) return;
    float g = t.grad(id)[0];
    t.accum_scaled(a, t.value(a), 2.0f * g);
  };
  return push(std::move(n));
}

int Tape::softmax_rows(int a) {
  const Tensor& va = value(a);
  check(va.rank() == 2, "softmax_rows: rank-2 only");
  int N = va.dim(0), M = va.dim(1);
  Node n;
  n.value = Tensor({N, M});
  for (int i = 0; i < N; ++i) {
    float mx = -1e30f;
    for (int j = 0; j < M; ++j) mx = std::max(mx, va.at(i, j));
    double z = 0.0;
    for (int j = 0; j < M; ++j) {
      float e = std::exp(va.at(i, j) - mx);
      n.value.at(i, j) = e;
      z += e;
    }
    float inv = static_cast<float>(1.0 / z);
    for (int j = 0; j < M; ++j) n.value.at(i, j) *= inv;
  }
  n.requires_grad = requires_grad(a);
  int id = static_cast<int>(nodes_.size());
  n.back = [a, id, N, M](Tape& t) {
    if (!t.requires_grad(a)) return;
    const Tensor& g = t.grad(id);
    const Tensor& y = t.value(id);
    Tensor& da = t.grad_buf(a);
    for (int i = 0; i < N; ++i) {
      double gy = 0.0;
      for (int j = 0; j < M; ++j) gy += static_cast<double>(g.at(i, j)) * y.at(i, j);
      for (int j = 0; j < M; ++j)
        da.at(i, j) += y.at(i, j) * (g.at(i, j) - static_cast<float>(gy));
    }
  };
  return push(std::move(n));
}

int Tape::logsumexp(int a) {
  const Tensor& va = value(a);
  check(va.rank() == 1, "logsumexp: rank-1 only");
  Node n;
  n.value = Tensor({1});
  float mx = -1e30f;
  for (float v : va.raw()) mx = std::max(mx, v);
  double z = 0.0;
  for (float v : va.raw()) z += std::exp(static_cast<double>(v) - mx);
  n.value[0] = mx + static_cast<float>(std::log(z));
  n.requires_grad = requires_grad(a);
  int id = static_cast<int>(nodes_.size());
  n.back = [a, id](Tape& t) {
    if (!t.requires_grad(a)) return;
    float g = t.grad(id)[0];
    float l = t.value(id)[0];
    const Tensor& x = t.value(a);
    Tensor& da = t.grad_buf(a);
    for (std::size_t i = 0; i < da.numel(); ++i) da[i] += g * std::exp(x[i] - l);
  };
  return push(std::move(n));
}

int Tape::gather(int a, std::vector<int> idx) {
  const Tensor& va = value(a);
  check(va.rank() == 1, "gather: rank-1 only");
  Node n;
  n.value = Tensor({static_cast<int>(idx.size())});
  for (std::size_t j = 0; j < idx.size(); ++j) n.value[j] = va[static_cast<std::size_t>(idx[j])];
  n.requires_grad = requires_grad(a);
  int id = static_cast<int>(nodes_.size());
  n.back = [a, id, idx = std::move(idx)](Tape& t) {
    if (!t.requires_grad(a)) return;
    const Tensor& g = t.grad(id);
    Tensor& da = t.grad_buf(a);
    for (std::size_t j = 0; j < idx.size(); ++j) da[static_cast<std::size_t>(idx[j])] += g[j];
  };
  return push(std::move(n));
}

int Tape::pack(const std::vector<int>& scalars) {
  Node n;
  n.value = Tensor({static_cast<int>(scalars.size())});
  bool rg = false;
  for (std::size_t j = 0; j < scalars.size(); ++j) {
    check(value(scalars[j]).numel() == 1, "pack: scalar inputs only");
    n.value[j] = value(scalars[j])[0];
    rg = rg || requires_grad(scalars[j]);
  }
  n.requires_grad = rg;
  int id = static_cast<int>(nodes_.size());
  n.back = [scalars, id](Tape& t) {
    const Tensor& g = t.grad(id);
    for (std::size_t j = 0; j < scalars.size(); ++j) {
      if (t.requires_grad(scalars[j])) t.grad_buf(scalars[j])[0] += g[j];
    }
  };
  return push(std::move(n));
}

int Tape::l2_normalize(int a) {
  const Tensor& va = value(a);
  check(va.rank() == 1, "l2_normalize: rank-1 only");
  double s = 0.0;
  for (float v : va.raw()) s += static_cast<double>(v) * v;
  double norm = std::sqrt(s);
  if (norm < 1e-12) throw std::domain_error("l2_normalize: zero-norm vector");
  Node n;
  n.value = va;
  n.value.scale_(static_cast<float>(1.0 / norm));
  n.requires_grad = requires_grad(a);
  int id = static_cast<int>(nodes_.size());
  float inv = static_cast<float>(1.0 / norm);
  n.back = [a, id, inv](Tape& t) {
    if (!t.requires_grad(a)) return;
    const Tensor& g = t.grad(id);
    const Tensor& y = t.value(id);
    double gy = 0.0;
    for (std::size_t i = 0; i < g.numel(); ++i) gy += static_cast<double>(g[i]) * y[i];
    Tensor& da = t.grad_buf(a);
    for (std::size_t i = 0; i < da.numel(); ++i)
      da[i] += inv * (g[i] - static_cast<float>(gy) * y[i]);
  };
  return push(std::move(n));
}

int Tape::cross_entropy_logits(int logits, int label) {
  const Tensor& v = value(logits);
  check(v.rank() == 1, "cross_entropy_logits: rank-1 logits");
  check(label >= 0 && label < v.dim(0), "cross_entropy_logits: label out of range");
  int lse = logsumexp(logits);
  int picked = gather(logits, {label});
  int picked_s = sum(picked);
  return sub(lse, picked_s);
}

// ---- conv / image ----

namespace {
struct ConvDims {
  int ci, h, w, co, k, stride, pad, ho, wo, kk, p;
};
ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
  ConvDims d;
  d.ci = x.dim(0);
  d.h = x.dim(1);
  d.w = x.dim(2);
  d.co = w.dim(0);
  d.k = w.dim(2);
  d.stride = stride;
  d.pad = pad;
  d.ho = (d.h + 2 * pad - d.k) / stride + 1;
  d.wo = (d.w + 2 * pad - d.k) / stride + 1;
  d.kk = d.ci * d.k * d.k;
  d.p = d.ho * d.wo;
  return d;
}

void im2col(const Tensor& x, const ConvDims& d, Tensor& col) {
  // col is [kk, p] row-major
  float* out = col.data();
  for (int ci = 0; ci < d.ci; ++ci) {
    for (int ky = 0; ky < d.k; ++ky) {
      for (int kx = 0; kx < d.k; ++kx) {
        float* row = out;
        out += d.p;
        for (int oy = 0; oy < d.ho; ++oy) {
          int iy = oy * d.stride + ky - d.pad;
          if (iy < 0 || iy >= d.h) {
            for (int ox = 0; ox < d.wo; ++ox) *row++ = 0.0f;
            continue;
          }
          const float* src = &x.at(ci, iy, 0);
          for (int ox = 0; ox < d.wo; ++ox) {
            int ix = ox * d.stride + kx - d.pad;
            *row++ = (ix >= 0 && ix < d.w) ? src[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im_accum(const Tensor& col, const ConvDims& d, Tensor& dx) {
  const float* in = col.data();
  for (int ci = 0; ci < d.ci; ++ci) {
    for (int ky = 0; ky < d.k; ++ky) {
      for (int kx = 0; kx < d.k; ++kx) {
        const float* row = in;
        in += d.p;
        for (int oy = 0; oy < d.ho; ++oy) {
          int iy = oy * d.stride + ky - d.pad;
          if (iy < 0 || iy >= d.h) {
            row += d.wo;
            continue;
          }
          float* dst = &dx.at(ci, iy, 0);
          for (int ox = 0; ox < d.wo; ++ox) {
            int ix = ox * d.stride + kx - d.pad;
            if (ix >= 0 && ix < d.w) dst[ix] += row[ox];
          }
          row += d.wo;
        }
      }
    }
  }
}
}  // namespace

int Tape::conv2d(int x, int w, int b, int stride, int pad) {
  const Tensor& vx = value(x);
  const Tensor& vw = value(w);
  check(vx.rank() == 3 && vw.rank() == 4, "conv2d: x must be CHW, w must be [Co,Ci,k,k]");
  check(vw.dim(1) == vx.dim(0), "conv2d: channel mismatch");
  check(vw.dim(2) == vw.dim(3), "conv2d: square kernels only");
  ConvDims d = conv_dims(vx, vw, stride, pad);
  check(d.ho > 0 && d.wo > 0, "conv2d: empty output");
  if (b >= 0) check(value(b).rank() == 1 && value(b).dim(0) == d.co, "conv2d: bias shape");

  auto col = std::make_shared<Tensor>(std::vector<int>{d.kk, d.p});
  im2col(vx, d, *col);

  Node n;
  n.value = Tensor({d.co, d.ho, d.wo});
  {
    CMapMat W(vw.data(), d.co, d.kk);
    CMapMat C(col->data(), d.kk, d.p);
    MapMat Y(n.value.data(), d.co, d.p);
    Y.noalias() = W * C;
  }
  if (b >= 0) {
    const Tensor& vb = value(b);
    for (int c = 0; c < d.co; ++c) {
      float bias = vb[static_cast<std::size_t>(c)];
      float* row = n.value.data() + static_cast<std::size_t>(c) * d.p;
      for (int i = 0; i < d.p; ++i) row[i] += bias;
    }
  }
  n.requires_grad = requires_grad(x) || requires_grad(w) || (b >= 0 && requires_grad(b));
  int id = static_cast<int>(nodes_.size());
  n.back = [x, w, b, id, d, col](Tape& t) {
    CMapMat G(t.grad(id).data(), d.co, d.p);
    if (t.requires_grad(w)) {
      CMapMat C(col->data(), d.kk, d.p);
      MapMat dW(t.grad_buf(w).data(), d.co, d.kk);
      dW.noalias() += G * C.transpose();
    }
    if (b >= 0 && t.requires_grad(b)) {
      Tensor& db = t.grad_buf(b);
      for (int c = 0; c < d.co; ++c) db[static_cast<std::size_t>(c)] += G.row(c).sum();
    }
    if (t.requires_grad(x)) {
      CMapMat W(t.value(w).data(), d.co, d.kk);
      Tensor dcol({d.kk, d.p});
      MapMat DC(dcol.data(), d.kk, d.p);
      DC.noalias() = W.transpose() * G;
      col2im_accum(dcol, d, t.grad_buf(x));
    }
  };
  return push(std::move(n));
}

int Tape::prelu(int x, int slope) {
  const Tensor& vx = value(x);
  const Tensor& vs = value(slope);
  check(vx.rank() == 3 && vs.rank() == 1 && vs.dim(0) == vx.dim(0), "prelu: shape mismatch");
  int C = vx.dim(0), hw = vx.dim(1) * vx.dim(2);
  Node n;
  n.value = vx;
  for (int c = 0; c < C; ++c) {
    float a = vs[static_cast<std::size_t>(c)];
    float* row = n.value.data() + static_cast<std::size_t>(c) * hw;
    for (int i = 0; i < hw; ++i)
      if (row[i] < 0.0f) row[i] *= a;
  }
  n.requires_grad = requires_grad(x) || requires_grad(slope);
  int id = static_cast<int>(nodes_.size());
  n.back = [x, slope, id, C, hw](Tape& t) {
    const Tensor& g = t.grad(id);
    const Tensor& vx2 = t.value(x);
    const Tensor& vs2 = t.value(slope);
    if (t.requires_grad(x)) {
      Tensor& dx = t.grad_buf(x);
      for (int c = 0; c < C; ++c) {
        float a = vs2[static_cast<std::size_t>(c)];
        std::size_t off = static_cast<std::size_t>(c) * hw;
        for (int i = 0; i < hw; ++i)
          dx[off + i] += g[off + i] * (vx2[off + i] > 0.0f ? 1.0f : a);
      }
    }
    if (t.requires_grad(slope)) {
      Tensor& ds = t.grad_buf(slope);
      for (int c = 0; c < C; ++c) {
        std::size_t off = static_cast<std::size_t>(c) * hw;
        double acc = 0.0;
        for (int i = 0; i < hw; ++i)
          if (vx2[off + i] <= 0.0f) acc += static_cast<double>(g[off + i]) * vx2[off + i];
        ds[static_cast<std::size_t>(c)] += static_cast<float>(acc);
      }
    }
  };
  return push(std::move(n));
}

void Tape::stats_of(const Tensor& x, Tensor& mean, Tensor& var) {
  int C = x.dim(0), hw = x.dim(1) * x.dim(2);
  mean = Tensor({C});
  var = Tensor({C});
  for (int c = 0; c < C; ++c) {
    const float* row = x.data() + static_cast<std::size_t>(c) * hw;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < hw; ++i) {
      s += row[i];
      s2 += static_cast<double>(row[i]) * row[i];
    }
    double m = s / hw;
    mean[static_cast<std::size_t>(c)] = static_cast<float>(m);
    var[static_cast<std::size_t>(c)] = static_cast<float>(std::max(0.0, s2 / hw - m * m));
  }
}

int Tape::channel_norm(int x, int gain, int bias, const Tensor& mean, const Tensor& var,
                       float eps, bool stats_from_x) {
  const Tensor& vx = value(x);
  check(vx.rank() == 3, "channel_norm: CHW input");
  int C = vx.dim(0), hw = vx.dim(1) * vx.dim(2);
  check(mean.dim(0) == C && var.dim(0) == C, "channel_norm: stats shape");
  check(value(gain).dim(0) == C && value(bias).dim(0) == C, "channel_norm: affine shape");

  auto xhat = std::make_shared<Tensor>(vx.shape());
  auto inv_sd = std::make_shared<Tensor>(std::vector<int>{C});
  Node n;
  n.value = Tensor(vx.shape());
  const Tensor& vg = value(gain);
  const Tensor& vb = value(bias);
  for (int c = 0; c < C; ++c) {
    float inv = 1.0f / std::sqrt(var[static_cast<std::size_t>(c)] + eps);
    (*inv_sd)[static_cast<std::size_t>(c)] = inv;
    float m = mean[static_cast<std::size_t>(c)];
    float g = vg[static_cast<std::size_t>(c)];
    float b = vb[static_cast<std::size_t>(c)];
    std::size_t off = static_cast<std::size_t>(c) * hw;
    for (int i = 0; i < hw; ++i) {
      float xh = (vx[off + i] - m) * inv;
      (*xhat)[off + i] = xh;
      n.value[off + i] = g * xh + b;
    }
  }
  n.requires_grad = requires_grad(x) || requires_grad(gain) || requires_grad(bias);
  int id = static_cast<int>(nodes_.size());
  n.back = [x, gain, bias, id, C, hw, xhat, inv_sd, stats_from_x](Tape& t) {
    const Tensor& g = t.grad(id);
    const Tensor& vg2 = t.value(gain);
    if (t.requires_grad(gain)) {
      Tensor& dg = t.grad_buf(gain);
      for (int c = 0; c < C; ++c) {
        std::size_t off = static_cast<std::size_t>(c) * hw;
        double acc = 0.0;
        for (int i = 0; i < hw; ++i) acc += static_cast<double>(g[off + i]) * (*xhat)[off + i];
        dg[static_cast<std::size_t>(c)] += static_cast<float>(acc);
      }
    }
    if (t.requires_grad(bias)) {
      Tensor& db = t.grad_buf(bias);
      for (int c = 0; c < C; ++c) {
        std::size_t off = static_cast<std::size_t>(c) * hw;
        double acc = 0.0;
        for (int i = 0; i < hw; ++i) acc += g[off + i];
        db[static_cast<std::size_t>(c)] += static_cast<float>(acc);
      }
    }
    if (t.requires_grad(x)) {
      Tensor& dx = t.grad_buf(x);
      for (int c = 0; c < C; ++c) {
        float gamma = vg2[static_cast<std::size_t>(c)];
        float inv = (*inv_sd)[static_cast<std::size_t>(c)];
        std::size_t off = static_cast<std::size_t>(c) * hw;
        if (!stats_from_x) {
          for (int i = 0; i < hw; ++i) dx[off + i] += g[off + i] * gamma * inv;
        } else {
          double sum_g = 0.0, sum_gx = 0.0;
          for (int i = 0; i < hw; ++i) {
            sum_g += g[off + i];
            sum_gx += static_cast<double>(g[off + i]) * (*xhat)[off + i];
          }
          float mg = static_cast<float>(sum_g / hw);
          float mgx = static_cast<float>(sum_gx / hw);
          for (int i = 0; i < hw; ++i) {
            dx[off + i] += gamma * inv * (g[off + i] - mg - (*xhat)[off + i] * mgx);
          }
        }
      }
    }
  };
  return push(std::move(n));
}

int Tape::global_avg_pool(int x) {
  const Tensor& vx = value(x);
  check(vx.rank() == 3, "global_avg_pool: CHW input");
  int C = vx.dim(0), hw = vx.dim(1) * vx.dim(2);
  Node n;
  n.value = Tensor({C});
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    const float* row = vx.data() + static_cast<std::size_t>(c) * hw;
    for (int i = 0; i < hw; ++i) s += row[i];
    n.value[static_cast<std::size_t>(c)] = static_cast<float>(s / hw);
  }
  n.requires_grad = requires_grad(x);
  int id = static_cast<int>(nodes_.size());
  n.back = [x, id, C, hw](Tape& t) {
    if (!t.requires_grad(x)) return;
    const Tensor& g = t.grad(id);
    Tensor& dx = t.grad_buf(x);
    for (int c = 0; c < C; ++c) {
      float gc = g[static_cast<std::size_t>(c)] / hw;
      std::size_t off = static_cast<std::size_t>(c) * hw;
      for (int i = 0; i < hw; ++i) dx[off + i] += gc;
    }
  };
  return push(std::move(n));
}

int Tape::chw_to_tokens(int x) {
  const Tensor& vx = value(x);
  check(vx.rank() == 3, "chw_to_tokens: CHW input");
  int C = vx.dim(0), hw = vx.dim(1) * vx.dim(2);
  Node n;
  n.value = Tensor({hw, C});
  for (int c = 0; c < C; ++c)
    for (int p = 0; p < hw; ++p)
      n.value.at(p, c) = vx[static_cast<std::size_t>(c) * hw + p];
  n.requires_grad = requires_grad(x);
  int id = static_cast<int>(nodes_.size());
  n.back = [x, id, C, hw](Tape& t) {
    if (!t.requires_grad(x)) return;
    const Tensor& g = t.grad(id);
    Tensor& dx = t.grad_buf(x);
    for (int c = 0; c < C; ++c)
      for (int p = 0; p < hw; ++p) dx[static_cast<std::size_t>(c) * hw + p] += g.at(p, c);
  };
  return push(std::move(n));
}

int Tape::tokens_to_chw(int tok, int c, int h, int w) {
  const Tensor& vt = value(tok);
  check(vt.rank() == 2 && vt.dim(0) == h * w && vt.dim(1) == c, "tokens_to_chw: shape");
  int hw = h * w;
  Node n;
  n.value = Tensor({c, h, w});
  for (int ci = 0; ci < c; ++ci)
    for (int p = 0; p < hw; ++p) n.value[static_cast<std::size_t>(ci) * hw + p] = vt.at(p, ci);
  n.requires_grad = requires_grad(tok);
  int id = static_cast<int>(nodes_.size());
  n.back = [tok, id, c, hw](Tape& t) {
    if (!t.requires_grad(tok)) return;
    const Tensor& g = t.grad(id);
    Tensor& dt = t.grad_buf(tok);
    for (int ci = 0; ci < c; ++ci)
      for (int p = 0; p < hw; ++p) dt.at(p, ci) += g[static_cast<std::size_t>(ci) * hw + p];
  };
  return push(std::move(n));
}

}  // namespace recguard
