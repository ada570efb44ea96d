#include "remem/kernels.hpp"

#include <algorithm>
#include <cmath>

#include "remem/error.hpp"

namespace remem {

const char* to_string(Nonlinearity n) {
  switch (n) {
    case Nonlinearity::identity: return "identity";
    case Nonlinearity::relu: return "relu";
    case Nonlinearity::leaky_relu: return "leaky_relu";
    case Nonlinearity::tanh: return "tanh";
  }
  return "identity";
}

Nonlinearity nonlinearity_from_string(const std::string& s) {
  if (s == "identity") return Nonlinearity::identity;
  if (s == "relu") return Nonlinearity::relu;
  if (s == "leaky_relu") return Nonlinearity::leaky_relu;
  if (s == "tanh") return Nonlinearity::tanh;
  throw FormatError("unknown nonlinearity '" + s + "'");
}

namespace kernels {

namespace {

struct ConvDims {
  int in_ch, h, w, out_ch, kh, kw;
};

ConvDims check_conv(const Tensor& in, const Tensor& weight) {
  if (in.rank() != 3 || weight.rank() != 4) throw ValidationError("conv2d: expected CHW input and OIHW weight");
  ConvDims d{in.dim(0), in.dim(1), in.dim(2), weight.dim(0), weight.dim(2), weight.dim(3)};
  if (weight.dim(1) != d.in_ch) {
    throw ValidationError("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                          " input channels, got " + std::to_string(d.in_ch));
  }
  if (d.kh % 2 == 0 || d.kw % 2 == 0) throw ValidationError("conv2d: kernel sizes must be odd");
  return d;
}

// Dot product with eight interleaved partial sums; fixed order, vectorizes.
inline float dot(const float* a, const float* b, int n) {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int x = 0;
  for (; x + 8 <= n; x += 8) {
    for (int j = 0; j < 8; ++j) acc[j] += a[x + j] * b[x + j];
  }
  float tail = 0.0f;
  for (; x < n; ++x) tail += a[x] * b[x];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

}  // namespace

Tensor conv2d(const Tensor& in, const Tensor& weight, const Tensor& bias) {
  const ConvDims d = check_conv(in, weight);
  if (static_cast<int>(bias.size()) != d.out_ch) throw ValidationError("conv2d: bias size mismatch");
  Tensor out({d.out_ch, d.h, d.w});
  const int ry = d.kh / 2, rx = d.kw / 2;
  const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
  const float* src = in.ptr();
  const float* wt = weight.ptr();
  float* dst = out.ptr();

#pragma omp parallel for schedule(static)
  for (int o = 0; o < d.out_ch; ++o) {
    float* out_o = dst + o * plane;
    for (int i = 0; i < d.in_ch; ++i) {
      const float* in_i = src + i * plane;
      for (int ky = 0; ky < d.kh; ++ky) {
        const int dy = ky - ry;
        const int y0 = std::max(0, -dy), y1 = std::min(d.h, d.h - dy);
        for (int kx = 0; kx < d.kw; ++kx) {
          const float wv = wt[((static_cast<std::size_t>(o) * d.in_ch + i) * d.kh + ky) * d.kw + kx];
          if (wv == 0.0f) continue;
          const int dx = kx - rx;
          const int x0 = std::max(0, -dx), x1 = std::min(d.w, d.w - dx);
          for (int y = y0; y < y1; ++y) {
            float* orow = out_o + static_cast<std::size_t>(y) * d.w;
            const float* irow = in_i + static_cast<std::size_t>(y + dy) * d.w + dx;
            for (int x = x0; x < x1; ++x) orow[x] += wv * irow[x];
          }
        }
      }
    }
    const float b = bias.data[o];
    for (std::size_t p = 0; p < plane; ++p) out_o[p] += b;
  }
  return out;
}

Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& weight) {
  if (grad_out.rank() != 3 || weight.rank() != 4 || grad_out.dim(0) != weight.dim(0)) {
    throw ValidationError("conv2d_grad_input: shape mismatch");
  }
  const int out_ch = weight.dim(0), in_ch = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  const int h = grad_out.dim(1), w = grad_out.dim(2);
  const int ry = kh / 2, rx = kw / 2;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor grad_in({in_ch, h, w});
  const float* g = grad_out.ptr();
  const float* wt = weight.ptr();
  float* dst = grad_in.ptr();

#pragma omp parallel for schedule(static)
  for (int i = 0; i < in_ch; ++i) {
    float* gin = dst + i * plane;
    for (int o = 0; o < out_ch; ++o) {
      const float* go = g + o * plane;
      for (int ky = 0; ky < kh; ++ky) {
        const int dy = ky - ry;
        const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
        for (int kx = 0; kx < kw; ++kx) {
          const float wv = wt[((static_cast<std::size_t>(o) * in_ch + i) * kh + ky) * kw + kx];
          if (wv == 0.0f) continue;
          const int dx = kx - rx;
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          for (int y = y0; y < y1; ++y) {
            float* irow = gin + static_cast<std::size_t>(y + dy) * w + dx;
            const float* orow = go + static_cast<std::size_t>(y) * w;
            for (int x = x0; x < x1; ++x) irow[x] += wv * orow[x];
          }
        }
      }
    }
  }
  return grad_in;
}

void conv2d_grad_params(const Tensor& in, const Tensor& grad_out, const std::vector<int>& weight_shape,
                        Tensor& grad_w, Tensor& grad_b) {
  if (weight_shape.size() != 4 || in.rank() != 3 || grad_out.rank() != 3 ||
      in.dim(0) != weight_shape[1] || grad_out.dim(0) != weight_shape[0] ||
      in.dim(1) != grad_out.dim(1) || in.dim(2) != grad_out.dim(2)) {
    throw ValidationError("conv2d_grad_params: shape mismatch");
  }
  const int out_ch = weight_shape[0], in_ch = weight_shape[1], kh = weight_shape[2], kw = weight_shape[3];
  const int h = in.dim(1), w = in.dim(2);
  const int ry = kh / 2, rx = kw / 2;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  grad_w = Tensor(weight_shape);
  grad_b = Tensor({out_ch});
  const float* src = in.ptr();
  const float* g = grad_out.ptr();

#pragma omp parallel for schedule(static)
  for (int o = 0; o < out_ch; ++o) {
    const float* go = g + o * plane;
    for (int i = 0; i < in_ch; ++i) {
      const float* in_i = src + i * plane;
      for (int ky = 0; ky < kh; ++ky) {
        const int dy = ky - ry;
        const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
        for (int kx = 0; kx < kw; ++kx) {
          const int dx = kx - rx;
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          float acc = 0.0f;
          for (int y = y0; y < y1; ++y) {
            acc += dot(go + static_cast<std::size_t>(y) * w + x0,
                       in_i + static_cast<std::size_t>(y + dy) * w + x0 + dx, x1 - x0);
          }
          grad_w.data[((static_cast<std::size_t>(o) * in_ch + i) * kh + ky) * kw + kx] = acc;
        }
      }
    }
    float b = 0.0f;
    for (int y = 0; y < h; ++y) {
      const float* row = go + static_cast<std::size_t>(y) * w;
      float r = 0.0f;
      for (int x = 0; x < w; ++x) r += row[x];
      b += r;
    }
    grad_b.data[o] = b;
  }
}

Tensor upsample_nearest(const Tensor& in, int factor) {
  if (factor == 1) return in;
  if (factor < 1) throw ValidationError("upsample factor must be >= 1");
  const int c = in.dim(0), h = in.dim(1), w = in.dim(2);
  Tensor out({c, h * factor, w * factor});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h * factor; ++y)
      for (int x = 0; x < w * factor; ++x) out.at(ch, y, x) = in.at(ch, y / factor, x / factor);
  return out;
}

Tensor upsample_nearest_grad(const Tensor& grad_out, int factor) {
  if (factor == 1) return grad_out;
  const int c = grad_out.dim(0), h = grad_out.dim(1) / factor, w = grad_out.dim(2) / factor;
  Tensor out({c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h * factor; ++y)
      for (int x = 0; x < w * factor; ++x) out.at(ch, y / factor, x / factor) += grad_out.at(ch, y, x);
  return out;
}

void activate_inplace(Tensor& t, Nonlinearity act) {
  switch (act) {
    case Nonlinearity::identity: return;
    case Nonlinearity::relu:
      for (float& v : t.data) v = v > 0.0f ? v : 0.0f;
      return;
    case Nonlinearity::leaky_relu:
      for (float& v : t.data) v = v > 0.0f ? v : kLeakySlope * v;
      return;
    case Nonlinearity::tanh:
      for (float& v : t.data) v = std::tanh(v);
      return;
  }
}

void activate_grad_inplace(Tensor& grad, const Tensor& pre, Nonlinearity act) {
  switch (act) {
    case Nonlinearity::identity: return;
    case Nonlinearity::relu:
      for (std::size_t i = 0; i < grad.size(); ++i) grad.data[i] = pre.data[i] > 0.0f ? grad.data[i] : 0.0f;
      return;
    case Nonlinearity::leaky_relu:
      for (std::size_t i = 0; i < grad.size(); ++i)
        grad.data[i] = pre.data[i] > 0.0f ? grad.data[i] : kLeakySlope * grad.data[i];
      return;
    case Nonlinearity::tanh:
      for (std::size_t i = 0; i < grad.size(); ++i) {
        const float t = std::tanh(pre.data[i]);
        grad.data[i] *= 1.0f - t * t;
      }
      return;
  }
}

void accumulate_second_moment(const Tensor& keys, Eigen::MatrixXd& acc) {
  const int c = keys.dim(0);
  const std::size_t plane = static_cast<std::size_t>(keys.dim(1)) * keys.dim(2);
  if (acc.rows() != c || acc.cols() != c) throw ValidationError("accumulate_second_moment: size mismatch");
  const float* k = keys.ptr();

#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < c; ++i) {
    const float* ki = k + i * plane;
    for (int j = i; j < c; ++j) {
      const float* kj = k + j * plane;
      double s = 0.0;
      for (std::size_t p = 0; p < plane; ++p) s += static_cast<double>(ki[p]) * kj[p];
      acc(i, j) += s;
      if (j != i) acc(j, i) += s;
    }
  }
}

}  // namespace kernels
}  // namespace remem
