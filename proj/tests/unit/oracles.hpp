#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "tstcnn/synth.hpp"

namespace oracle {

/// Bilinear sample of channel c, frame t of a (C, T, H, W) tensor with
/// clamped coordinates.
inline double sample(const tstcnn::TensorF& v, std::size_t c, std::size_t t, double x, double y) {
  const std::size_t T = v.dim(1), H = v.dim(2), W = v.dim(3);
  x = std::clamp(x, 0.0, double(W - 1));
  y = std::clamp(y, 0.0, double(H - 1));
  const std::size_t x0 = std::size_t(x), y0 = std::size_t(y);
  const std::size_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
  const double ax = x - double(x0), ay = y - double(y0);
  auto at = [&](std::size_t yy, std::size_t xx) {
    return double(v.data()[((c * T + t) * H + yy) * W + xx]);
  };
  return (1 - ay) * ((1 - ax) * at(y0, x0) + ax * at(y0, x1)) +
         ay * ((1 - ax) * at(y1, x0) + ax * at(y1, x1));
}

/**
 * Mean over frames t < T - 1, channels and interior pixels (a `border` wide
 * frame excluded) of |rgb_t(p - flow_t(p)) - rgb_{t+1}(p)|: frame t+1
 * predicted by pulling frame t back along the flow.
 */
inline double warp_residual(const tstcnn::synth::Clip& clip, std::size_t border = 2) {
  const std::size_t T = clip.rgb.dim(1), H = clip.rgb.dim(2), W = clip.rgb.dim(3);
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t t = 0; t + 1 < T; ++t)
    for (std::size_t y = border; y + border < H; ++y)
      for (std::size_t x = border; x + border < W; ++x) {
        const std::size_t k = (t * H + y) * W + x;
        const double vx = clip.flow.data()[k];
        const double vy = clip.flow.data()[T * H * W + k];
        for (std::size_t c = 0; c < 3; ++c) {
          const double pred = sample(clip.rgb, c, t, double(x) - vx, double(y) - vy);
          const double next = clip.rgb.data()[((c * T + t + 1) * H + y) * W + x];
          sum += std::abs(pred - next);
          ++n;
        }
      }
  return sum / double(n);
}

}  // namespace oracle
