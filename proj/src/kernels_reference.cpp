#include "remem/error.hpp"
#include "remem/kernels.hpp"

namespace remem::kernels::reference {

Tensor conv2d(const Tensor& in, const Tensor& weight, const Tensor& bias) {
  const int c = in.dim(0), h = in.dim(1), w = in.dim(2);
  const int o_ch = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != c) throw ValidationError("reference::conv2d: channel mismatch");
  Tensor out({o_ch, h, w});
  for (int o = 0; o < o_ch; ++o)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = bias.data[o];
        for (int i = 0; i < c; ++i)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              const int sy = y + ky - kh / 2, sx = x + kx - kw / 2;
              if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
              acc += static_cast<double>(weight.data[((o * c + i) * kh + ky) * kw + kx]) * in.at(i, sy, sx);
            }
        out.at(o, y, x) = static_cast<float>(acc);
      }
  return out;
}

Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& weight) {
  const int o_ch = weight.dim(0), c = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  const int h = grad_out.dim(1), w = grad_out.dim(2);
  Tensor grad_in({c, h, w});
  for (int i = 0; i < c; ++i)
    for (int sy = 0; sy < h; ++sy)
      for (int sx = 0; sx < w; ++sx) {
        double acc = 0.0;
        for (int o = 0; o < o_ch; ++o)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              const int y = sy - ky + kh / 2, x = sx - kx + kw / 2;
              if (y < 0 || y >= h || x < 0 || x >= w) continue;
              acc += static_cast<double>(weight.data[((o * c + i) * kh + ky) * kw + kx]) * grad_out.at(o, y, x);
            }
        grad_in.at(i, sy, sx) = static_cast<float>(acc);
      }
  return grad_in;
}

void conv2d_grad_params(const Tensor& in, const Tensor& grad_out, const std::vector<int>& weight_shape,
                        Tensor& grad_w, Tensor& grad_b) {
  const int o_ch = weight_shape[0], c = weight_shape[1], kh = weight_shape[2], kw = weight_shape[3];
  const int h = in.dim(1), w = in.dim(2);
  grad_w = Tensor(weight_shape);
  grad_b = Tensor({o_ch});
  for (int o = 0; o < o_ch; ++o) {
    double b = 0.0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) b += grad_out.at(o, y, x);
    grad_b.data[o] = static_cast<float>(b);
    for (int i = 0; i < c; ++i)
      for (int ky = 0; ky < kh; ++ky)
        for (int kx = 0; kx < kw; ++kx) {
          double acc = 0.0;
          for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
              const int sy = y + ky - kh / 2, sx = x + kx - kw / 2;
              if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
              acc += static_cast<double>(grad_out.at(o, y, x)) * in.at(i, sy, sx);
            }
          grad_w.data[((o * c + i) * kh + ky) * kw + kx] = static_cast<float>(acc);
        }
  }
}

void accumulate_second_moment(const Tensor& keys, Eigen::MatrixXd& acc) {
  const int c = keys.dim(0), h = keys.dim(1), w = keys.dim(2);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int i = 0; i < c; ++i)
        for (int j = 0; j < c; ++j) acc(i, j) += static_cast<double>(keys.at(i, y, x)) * keys.at(j, y, x);
}

}  // namespace remem::kernels::reference
