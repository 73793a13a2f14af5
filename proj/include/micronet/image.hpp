#pragma once

// Minimal image plumbing: binary PPM (P6) / PGM (P5) decode and encode,
// nearest-neighbor resizing, and a .npy writer for dumping tensors (heatmaps)
// in a form numpy can open directly. Pixels map to floats in [0, 1].

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "micronet/common.hpp"
#include "micronet/tensor.hpp"

namespace micronet {

namespace detail {

/// Reads the next whitespace-delimited PNM header token, skipping comments.
inline std::string pnm_token(std::istream& in) {
  std::string tok;
  int ch = in.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = in.get();
    } else if (ch == ' ' || ch == '\t' || ch == '\r' || ch == '\n') {
      if (!tok.empty()) return tok;
    } else {
      tok.push_back(static_cast<char>(ch));
    }
    ch = in.get();
  }
  if (tok.empty()) throw FormatError("truncated image header");
  return tok;
}

inline int pnm_int(std::istream& in, const std::string& what) {
  const std::string tok = pnm_token(in);
  try {
    std::size_t pos = 0;
    const int v = std::stoi(tok, &pos);
    if (pos != tok.size() || v < 0) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw FormatError("bad image header field " + what + ": '" + tok + "'");
  }
}

}  // namespace detail

/// Decodes an 8-bit binary PGM (P5, 1 channel) or PPM (P6, 3 channels) into
/// a (1, C, H, W) float tensor scaled to [0, 1].
inline Tensor<float> read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open image '" + path + "'");
  const std::string magic = detail::pnm_token(in);
  int channels = 0;
  if (magic == "P5") channels = 1;
  else if (magic == "P6") channels = 3;
  else throw FormatError("unsupported image magic '" + magic + "' in " + path);
  const int w = detail::pnm_int(in, "width");
  const int h = detail::pnm_int(in, "height");
  const int maxval = detail::pnm_int(in, "maxval");
  if (w < 1 || h < 1 || maxval < 1 || maxval > 255) {
    throw FormatError("unsupported image geometry in " + path);
  }
  // The header terminates with exactly one whitespace byte (consumed by the
  // token reader already when it returned the maxval token's delimiter).
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * channels);
  in.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
    throw FormatError("truncated pixel payload in " + path);
  }
  Tensor<float> img(1, channels, h, w);
  const float scale = 1.0f / static_cast<float>(maxval);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < channels; ++c) {
        img.at(0, c, y, x) =
            scale * raw[(static_cast<std::size_t>(y) * w + x) * channels + c];
      }
    }
  }
  return img;
}

/// Encodes a (1, 1|3, H, W) tensor (values clamped to [0,1]) as PGM/PPM.
inline void write_pnm(const std::string& path, const Tensor<float>& img) {
  if (img.n() != 1 || (img.c() != 1 && img.c() != 3)) {
    throw DimensionError("write_pnm wants (1, 1|3, H, W), got " +
                         img.shape().str());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write image '" + path + "'");
  out << (img.c() == 1 ? "P5" : "P6") << "\n"
      << img.w() << " " << img.h() << "\n255\n";
  std::vector<unsigned char> raw(static_cast<std::size_t>(img.w()) * img.h() *
                                 img.c());
  std::size_t k = 0;
  for (int y = 0; y < img.h(); ++y) {
    for (int x = 0; x < img.w(); ++x) {
      for (int c = 0; c < img.c(); ++c) {
        float v = img.at(0, c, y, x);
        v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
        raw[k++] = static_cast<unsigned char>(v * 255.0f + 0.5f);
      }
    }
  }
  out.write(reinterpret_cast<const char*>(raw.data()),
            static_cast<std::streamsize>(raw.size()));
  if (!out) throw FormatError("short write to '" + path + "'");
}

/// Nearest-neighbor resize to (out_h, out_w), preserving batch and channels.
template <typename T>
Tensor<T> nearest_resize(const Tensor<T>& x, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) {
    throw DimensionError("resize wants positive output dims");
  }
  if (x.h() == out_h && x.w() == out_w) return x;
  Tensor<T> y(x.n(), x.c(), out_h, out_w);
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      for (int oy = 0; oy < out_h; ++oy) {
        int sy = static_cast<int>((static_cast<long long>(oy) * x.h()) /
                                  out_h);
        if (sy >= x.h()) sy = x.h() - 1;
        for (int ox = 0; ox < out_w; ++ox) {
          int sx = static_cast<int>((static_cast<long long>(ox) * x.w()) /
                                    out_w);
          if (sx >= x.w()) sx = x.w() - 1;
          y.at(n, c, oy, ox) = x.at(n, c, sy, sx);
        }
      }
    }
  }
  return y;
}

/// Replicates single-channel input to `channels`, or errors when incompatible.
inline Tensor<float> adapt_channels(const Tensor<float>& img, int channels) {
  if (img.c() == channels) return img;
  if (img.c() == 1) {
    Tensor<float> out(img.n(), channels, img.h(), img.w());
    for (int n = 0; n < img.n(); ++n) {
      for (int c = 0; c < channels; ++c) {
        for (int y = 0; y < img.h(); ++y) {
          for (int x = 0; x < img.w(); ++x) {
            out.at(n, c, y, x) = img.at(n, 0, y, x);
          }
        }
      }
    }
    return out;
  }
  throw DimensionError("cannot adapt a " + std::to_string(img.c()) +
                       "-channel image to " + std::to_string(channels) +
                       " channels");
}

/// Writes a tensor as a numpy .npy (format 1.0, little-endian float32). The
/// batch dimension is dropped when it is 1, so heatmaps load as (C, H, W).
template <typename T>
void write_npy(const std::string& path, const Tensor<T>& t) {
  std::ostringstream shape;
  shape << "(";
  if (t.n() != 1) shape << t.n() << ", ";
  shape << t.c() << ", " << t.h() << ", " << t.w() << ")";
  std::string header = "{'descr': '<f4', 'fortran_order': False, 'shape': " +
                       shape.str() + ", }";
  // Pad so that magic + version + length + header is a multiple of 64.
  const std::size_t base = 6 + 2 + 2;
  std::size_t total = base + header.size() + 1;
  const std::size_t pad = (64 - total % 64) % 64;
  header.append(pad, ' ');
  header.push_back('\n');

  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out.write("\x93NUMPY\x01\x00", 8);
  const std::uint16_t hlen = static_cast<std::uint16_t>(header.size());
  out.put(static_cast<char>(hlen & 0xff));
  out.put(static_cast<char>((hlen >> 8) & 0xff));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (std::size_t i = 0; i < t.size(); ++i) {
    const float v = static_cast<float>(t[i]);
    out.write(reinterpret_cast<const char*>(&v), 4);
  }
  if (!out) throw FormatError("short write to '" + path + "'");
}

}  // namespace micronet
