#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "enjoint/tensor.hpp"

namespace enjoint {

/// RGB image with values in [0,1], stored planar (channel, row, column).
class Image {
 public:
  static constexpr int kChannels = 3;

  Image() = default;
  Image(int height, int width, float fill = 0.0f)
      : height_(height), width_(width), data_(static_cast<std::size_t>(kChannels) * height * width, fill) {
    if (height <= 0 || width <= 0) throw ShapeError("image dims must be positive");
  }

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t plane() const { return static_cast<std::size_t>(height_) * width_; }

  float& at(int c, int y, int x) { return data_[c * plane() + static_cast<std::size_t>(y) * width_ + x]; }
  float at(int c, int y, int x) const { return data_[c * plane() + static_cast<std::size_t>(y) * width_ + x]; }

  std::vector<float>& data() { return data_; }
  const std::vector<float>& data() const { return data_; }

  bool same_size(const Image& o) const { return height_ == o.height_ && width_ == o.width_; }

  friend bool operator==(const Image& a, const Image& b) {
    return a.height_ == b.height_ && a.width_ == b.width_ && a.data_ == b.data_;
  }

  std::array<double, 3> channel_means() const {
    std::array<double, 3> m{};
    for (int c = 0; c < kChannels; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < plane(); ++i) acc += data_[c * plane() + i];
      m[static_cast<std::size_t>(c)] = acc / static_cast<double>(plane());
    }
    return m;
  }

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<float> data_;
};

/// Axis-aligned box in pixel coordinates, (x1,y1) top-left, (x2,y2) bottom-right.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x1 < x2 && y1 < y2; }

  friend bool operator==(const Box&, const Box&) = default;
};

/// Stacks images into a [N,3,H,W] tensor.
template <typename T = float>
Tensor<T> images_to_tensor(const std::vector<const Image*>& images) {
  if (images.empty()) throw ShapeError("images_to_tensor: empty batch");
  const int H = images.front()->height(), W = images.front()->width();
  Tensor<T> t({static_cast<int>(images.size()), Image::kChannels, H, W});
  std::size_t off = 0;
  for (const Image* im : images) {
    if (im->height() != H || im->width() != W) throw ShapeError("images_to_tensor: mixed sizes");
    for (float v : im->data()) t[off++] = static_cast<T>(v);
  }
  return t;
}

template <typename T = float>
Tensor<T> image_to_tensor(const Image& image) {
  return images_to_tensor<T>({&image});
}

/// Extracts image `n` from a [N,3,H,W] tensor.
template <typename T>
Image tensor_to_image(const Tensor<T>& t, int n = 0) {
  if (t.rank() != 4 || t.dim(1) != Image::kChannels) throw ShapeError("tensor_to_image: expected [N,3,H,W]");
  Image im(t.dim(2), t.dim(3));
  const std::size_t sz = im.data().size();
  for (std::size_t i = 0; i < sz; ++i) im.data()[i] = static_cast<float>(t[n * sz + i]);
  return im;
}

inline void clamp01(Image& im) {
  for (float& v : im.data()) v = std::clamp(v, 0.0f, 1.0f);
}

/// Rounds to the nearest 8-bit level so PPM export is lossless.
inline void quantize8(Image& im) {
  for (float& v : im.data()) v = std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f;
}

inline Image hflip(const Image& im) {
  Image out(im.height(), im.width());
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < im.height(); ++y)
      for (int x = 0; x < im.width(); ++x) out.at(c, y, x) = im.at(c, y, im.width() - 1 - x);
  return out;
}

/// Bilinear resample of the source window [x0,x0+w) x [y0,y0+h) to out_h x out_w,
/// half-pixel centers, edge-clamped.
inline Image resample(const Image& im, double x0, double y0, double w, double h, int out_h, int out_w) {
  Image out(out_h, out_w);
  const double sy = h / out_h, sx = w / out_w;
  for (int y = 0; y < out_h; ++y) {
    double fy = std::clamp(y0 + (y + 0.5) * sy - 0.5, 0.0, static_cast<double>(im.height() - 1));
    const int y_lo = static_cast<int>(std::floor(fy));
    const int y_hi = std::min(y_lo + 1, im.height() - 1);
    const double wy = fy - y_lo;
    for (int x = 0; x < out_w; ++x) {
      double fx = std::clamp(x0 + (x + 0.5) * sx - 0.5, 0.0, static_cast<double>(im.width() - 1));
      const int x_lo = static_cast<int>(std::floor(fx));
      const int x_hi = std::min(x_lo + 1, im.width() - 1);
      const double wx = fx - x_lo;
      for (int c = 0; c < 3; ++c) {
        const double top = im.at(c, y_lo, x_lo) * (1 - wx) + im.at(c, y_lo, x_hi) * wx;
        const double bot = im.at(c, y_hi, x_lo) * (1 - wx) + im.at(c, y_hi, x_hi) * wx;
        out.at(c, y, x) = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

inline Image resize(const Image& im, int out_h, int out_w) {
  return resample(im, 0, 0, im.width(), im.height(), out_h, out_w);
}

/// Separable Gaussian blur, kernel radius ceil(3 sigma), replicated borders.
inline Image gaussian_blur(const Image& im, double sigma) {
  if (sigma <= 0) return im;
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double norm = 0;
  for (int i = -r; i <= r; ++i) {
    k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
    norm += k[static_cast<std::size_t>(i + r)];
  }
  for (double& v : k) v /= norm;
  const int H = im.height(), W = im.width();
  Image tmp(H, W), out(H, W);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * im.at(c, y, std::clamp(x + i, 0, W - 1));
        tmp.at(c, y, x) = static_cast<float>(acc);
      }
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * tmp.at(c, std::clamp(y + i, 0, H - 1), x);
        out.at(c, y, x) = static_cast<float>(acc);
      }
  }
  return out;
}

/// Binary PPM (P6, maxval 255).
inline void write_ppm(const std::filesystem::path& path, const Image& im) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "P6\n" << im.width() << ' ' << im.height() << "\n255\n";
  std::vector<unsigned char> buf(static_cast<std::size_t>(im.width()) * im.height() * 3);
  for (int y = 0; y < im.height(); ++y)
    for (int x = 0; x < im.width(); ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(im.at(c, y, x), 0.0f, 1.0f);
        buf[(static_cast<std::size_t>(y) * im.width() + x) * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw std::runtime_error("short write to " + path.string());
}

inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  auto next_token = [&is]() {
    std::string tok;
    while (is >> tok) {
      if (tok[0] == '#') {
        std::string rest;
        std::getline(is, rest);
        continue;
      }
      return tok;
    }
    throw std::runtime_error("truncated PPM header");
  };
  if (next_token() != "P6") throw std::runtime_error(path.string() + ": not a binary PPM");
  const int w = std::stoi(next_token());
  const int h = std::stoi(next_token());
  const int maxval = std::stoi(next_token());
  if (maxval != 255) throw std::runtime_error(path.string() + ": only 8-bit PPM supported");
  is.get();
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (is.gcount() != static_cast<std::streamsize>(buf.size())) throw std::runtime_error(path.string() + ": truncated pixels");
  Image im(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        im.at(c, y, x) = static_cast<float>(buf[(static_cast<std::size_t>(y) * w + x) * 3 + c]) / 255.0f;
  return im;
}

}  // namespace enjoint
