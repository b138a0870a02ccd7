#pragma once

#include <string>

#include "owm/layers.hpp"
#include "owm/views.hpp"

namespace owm::encoder {

/// Small patch transformer standing in for a pretrained vision backbone.
struct EncoderConfig {
  int image_size = 32;
  int patch = 8;
  int channels = 3;
  int width = 64;
  int heads = 4;
  int blocks = 2;
  int mlp_ratio = 2;
  bool attention = true;
  bool positional = true;

  int grid() const { return image_size / patch; }
  int tokens() const { return grid() * grid(); }
  int patch_dim() const { return patch * patch * channels; }

  void validate() const {
    if (patch <= 0 || image_size <= 0 || image_size % patch != 0) {
      throw StructuralError("encoder: image size " + std::to_string(image_size) +
                            " is not divisible by patch " + std::to_string(patch));
    }
    if (width % heads != 0) throw ConfigError("encoder: width not divisible by heads");
  }

  BlockConfig block() const { return {width, heads, mlp_ratio * width, attention}; }
};

/// Pixels (B, T, H, W, C) in [0, 1] for one view.
template <class T>
struct FrameBatch {
  Array<T> pixels;
  View view = View::R;
};

/// Encoder output (B, T, N, D) for one view.
template <class T>
struct TokenGrid {
  Var<T> tokens;
  View view = View::R;
};

/// (B, T, H, W, C) -> (B, T, N, patch*patch*C), raster order over patches,
/// each patch flattened row-major as (py, px, c).
template <class T>
Array<T> patchify(const Array<T>& pixels, int patch) {
  if (pixels.rank() != 5) {
    throw StructuralError("patchify: expected (B,T,H,W,C), got " + numerics::shape_string(pixels.shape()));
  }
  const int b = pixels.dim(0), t = pixels.dim(1), h = pixels.dim(2), w = pixels.dim(3), c = pixels.dim(4);
  if (patch <= 0 || h % patch != 0 || w % patch != 0) {
    throw StructuralError("patchify: image " + std::to_string(h) + "x" + std::to_string(w) +
                          " not divisible by patch " + std::to_string(patch));
  }
  const int gh = h / patch, gw = w / patch, pd = patch * patch * c;
  numerics::Buffer<T> out(pixels.size());
  const auto& src = pixels.vec();
  std::size_t o = 0;
  for (int f = 0; f < b * t; ++f) {
    const std::size_t frame = static_cast<std::size_t>(f) * h * w * c;
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx)
        for (int py = 0; py < patch; ++py) {
          const std::size_t row = frame + (static_cast<std::size_t>(gy * patch + py) * w + gx * patch) * c;
          for (int k = 0; k < patch * c; ++k) out[o++] = src[row + k];
        }
  }
  return Array<T>(numerics::unchecked, Shape{b, t, gh * gw, pd}, std::move(out));
}

/// Inverse of patchify for a square patch grid.
template <class T>
Array<T> unpatchify(const Array<T>& patches, int patch, int channels) {
  const int b = patches.dim(0), t = patches.dim(1), n = patches.dim(2);
  int g = 0;
  while (g * g < n) ++g;
  if (g * g != n || patches.dim(3) != patch * patch * channels) {
    throw StructuralError("unpatchify: patches " + numerics::shape_string(patches.shape()) +
                          " do not form a square grid");
  }
  const int h = g * patch, w = g * patch;
  numerics::Buffer<T> out(patches.size());
  const auto& src = patches.vec();
  std::size_t o = 0;
  for (int f = 0; f < b * t; ++f) {
    const std::size_t frame = static_cast<std::size_t>(f) * h * w * channels;
    for (int gy = 0; gy < g; ++gy)
      for (int gx = 0; gx < g; ++gx)
        for (int py = 0; py < patch; ++py) {
          const std::size_t row = frame + (static_cast<std::size_t>(gy * patch + py) * w + gx * patch) * channels;
          for (int k = 0; k < patch * channels; ++k) out[row + k] = src[o++];
        }
  }
  return Array<T>(numerics::unchecked, Shape{b, t, h, w, channels}, std::move(out));
}

template <class T>
void init_encoder(ParamSet<T>& ps, const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  numerics::add_linear(ps, "encoder.patch", cfg.patch_dim(), cfg.width, rng);
  for (View v : kViews) {
    ps.add("encoder.pos." + std::string(view_name(v)),
           numerics::normal_array<T>(Shape{cfg.tokens(), cfg.width}, 0.1, rng));
  }
  for (int i = 0; i < cfg.blocks; ++i) add_block(ps, "encoder.block" + std::to_string(i), cfg.block(), rng);
}

/// Frames -> token grid. Weights are shared across views except for the
/// positional table.
template <class T>
TokenGrid<T> encode(const FrameBatch<T>& frames, const BoundParams<T>& p, const EncoderConfig& cfg) {
  cfg.validate();
  const auto& s = frames.pixels.shape();
  if (frames.pixels.rank() != 5 || s[2] != cfg.image_size || s[3] != cfg.image_size || s[4] != cfg.channels) {
    throw StructuralError("encode: frames " + numerics::shape_string(s) + " do not match a " +
                          std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) + "x" +
                          std::to_string(cfg.channels) + " encoder");
  }
  for (T v : frames.pixels.vec()) {
    if (!(v >= T{0} && v <= T{1})) throw InputError("encode: pixel values must lie in [0,1]");
  }
  const int b = s[0], t = s[1], n = cfg.tokens(), d = cfg.width;
  Tape<T>& tape = p.tape();
  auto x = numerics::linear(p, "encoder.patch", tape.constant(patchify(frames.pixels, cfg.patch)));
  if (cfg.positional) x = numerics::add(x, p["encoder.pos." + std::string(view_name(frames.view))]);
  x = numerics::reshape(x, Shape{b * t, n, d});
  for (int i = 0; i < cfg.blocks; ++i) x = transformer_block(p, "encoder.block" + std::to_string(i), cfg.block(), x);
  return {numerics::reshape(x, Shape{b, t, n, d}), frames.view};
}

}  // namespace owm::encoder
