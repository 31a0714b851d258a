#pragma once

// Procedural class-conditional image generator.
//
// Every image is a pure function of (seed, index). Only +, -, *, / and
// comparisons on doubles are used, so the output is bit-reproducible on any
// IEEE-754 platform. Algorithm for image i (canvas S x S, K classes):
//
//   label c = i mod K
//   rng     = CounterRng{seed, 1 (dataset), i}, draws taken in this order:
//     bg      = 0.15 + 0.25 * u          background gray level
//     cy, cx  = S/2 + (u * 2 - 1) * S/10 shape center
//     r       = S * (0.22 + 0.10 * u)    shape radius
//     bright  = 0.75 + 0.25 * u          color gain
//     phase   = u * 8                    stripe phase in pixels
//   class tuple: shape = c mod 4 (disk, square, diamond, ring),
//                hue = (c / 2) mod 6 (palette below), freq = 1 + c mod 3
//   pixel (y, x), with dy = y + 0.5 - cy, dx = x + 0.5 - cx:
//     inside  disk:    dy^2 + dx^2 <= r^2
//             square:  |dy| <= 0.8 r and |dx| <= 0.8 r
//             diamond: |dy| + |dx| <= 1.1 r
//             ring:    0.55^2 r^2 <= dy^2 + dx^2 <= r^2
//     stripe  = floor((y + x + phase) * freq / 8) is even ? 1.0 : 0.55
//     value   = inside ? bg + 0.6 * (palette[hue][ch] * bright * stripe - bg) : bg
//   then per pixel and channel (channel-major order) value += (u - 0.5) * 0.1,
//   clamped to [0, 1].

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "tabench/rng.hpp"
#include "tabench/tensor.hpp"

namespace tabench {

struct Dataset {
  Tensor images;            // [N, 3, S, S] in [0, 1]
  std::vector<int> labels;  // [N]
  std::vector<std::size_t> indices;  // generator index of every row
  std::size_t classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  Dataset subset(std::span<const std::size_t> rows) const;
};

inline constexpr std::size_t kCanvas = 40;

namespace detail {

inline constexpr std::array<std::array<double, 3>, 6> kPalette{{
    {0.95, 0.20, 0.15},
    {0.15, 0.80, 0.25},
    {0.20, 0.35, 0.95},
    {0.95, 0.85, 0.15},
    {0.85, 0.25, 0.90},
    {0.15, 0.85, 0.90},
}};

inline void render(std::uint64_t seed, std::size_t index, std::size_t classes, std::size_t S, double* out) {
  const int c = static_cast<int>(index % classes);
  const int shape = c % 4;
  const auto& color = kPalette[static_cast<std::size_t>((c / 2) % 6)];
  const double freq = 1.0 + c % 3;
  auto rng = make_rng(seed, Stream::dataset, index);
  const double s = static_cast<double>(S);
  const double bg = 0.15 + 0.25 * rng.uniform();
  const double cy = s / 2 + (rng.uniform() * 2 - 1) * s / 10;
  const double cx = s / 2 + (rng.uniform() * 2 - 1) * s / 10;
  const double r = s * (0.22 + 0.10 * rng.uniform());
  const double bright = 0.75 + 0.25 * rng.uniform();
  const double phase = rng.uniform() * 8;
  const double r2 = r * r;
  for (std::size_t y = 0; y < S; ++y) {
    for (std::size_t x = 0; x < S; ++x) {
      const double dy = static_cast<double>(y) + 0.5 - cy;
      const double dx = static_cast<double>(x) + 0.5 - cx;
      const double d2 = dy * dy + dx * dx;
      bool inside = false;
      switch (shape) {
        case 0: inside = d2 <= r2; break;
        case 1: inside = std::abs(dy) <= 0.8 * r && std::abs(dx) <= 0.8 * r; break;
        case 2: inside = std::abs(dy) + std::abs(dx) <= 1.1 * r; break;
        default: inside = d2 <= r2 && d2 >= 0.55 * 0.55 * r2; break;
      }
      const auto band = static_cast<long>(std::floor((static_cast<double>(y + x) + phase) * freq / 8));
      const double stripe = band % 2 == 0 ? 1.0 : 0.55;
      for (std::size_t ch = 0; ch < 3; ++ch) out[(ch * S + y) * S + x] = inside ? bg + 0.6 * (color[ch] * bright * stripe - bg) : bg;
    }
  }
  for (std::size_t k = 0; k < 3 * S * S; ++k) out[k] = std::clamp(out[k] + (rng.uniform() - 0.5) * 0.1, 0.0, 1.0);
}

}  // namespace detail

/// Images with generator indices first, first+1, ..., first+n-1.
inline Dataset gen_dataset(std::uint64_t seed, std::size_t n, std::size_t classes, std::size_t canvas = kCanvas,
                           std::size_t first = 0) {
  if (classes < 2) throw Error("gen_dataset: need at least 2 classes");
  if (n == 0) throw Error("gen_dataset: n must be positive");
  if (canvas < 8) throw Error("gen_dataset: canvas too small");
  Dataset d;
  d.classes = classes;
  d.images = Tensor({n, 3, canvas, canvas});
  const std::size_t per = 3 * canvas * canvas;
  for (std::size_t i = 0; i < n; ++i) {
    detail::render(seed, first + i, classes, canvas, d.images.ptr() + i * per);
    d.labels.push_back(static_cast<int>((first + i) % classes));
    d.indices.push_back(first + i);
  }
  return d;
}

inline Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset d;
  d.classes = classes;
  const std::size_t per = images.row_size();
  Shape s = images.shape();
  s[0] = rows.size();
  d.images = Tensor(s);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= size()) throw Error("dataset: row " + std::to_string(rows[k]) + " out of range");
    std::copy_n(images.ptr() + rows[k] * per, per, d.images.ptr() + k * per);
    d.labels.push_back(labels[rows[k]]);
    d.indices.push_back(indices[rows[k]]);
  }
  return d;
}

}  // namespace tabench
