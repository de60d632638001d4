#pragma once

// RGB rasters for remote backends: PNG in/out through libpng's simplified
// API, crop + bilinear zoom, and base64 attachments. This is the only place
// pixels exist; the rest of the engine sees ImageRef lineage.

#include <png.h>

#include <boost/beast/core/detail/base64.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "seprod/errors.hpp"
#include "seprod/model.hpp"

namespace seprod {

struct Raster {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  std::uint8_t* px(int x, int y) { return &rgb[static_cast<std::size_t>((y * width + x) * 3)]; }
  const std::uint8_t* px(int x, int y) const {
    return &rgb[static_cast<std::size_t>((y * width + x) * 3)];
  }
  friend bool operator==(const Raster&, const Raster&) = default;
};

inline Raster decode_png(const std::vector<std::uint8_t>& bytes) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
    throw ContextError(std::string("png decode: ") + img.message);
  img.format = PNG_FORMAT_RGB;
  Raster r;
  r.width = static_cast<int>(img.width);
  r.height = static_cast<int>(img.height);
  r.rgb.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, r.rgb.data(), 0, nullptr)) {
    png_image_free(&img);
    throw ContextError(std::string("png decode: ") + img.message);
  }
  return r;
}

inline std::vector<std::uint8_t> encode_png(const Raster& r) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(r.width);
  img.height = static_cast<png_uint_32>(r.height);
  img.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, r.rgb.data(), 0, nullptr))
    throw ContextError(std::string("png encode: ") + img.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, r.rgb.data(), 0, nullptr))
    throw ContextError(std::string("png encode: ") + img.message);
  out.resize(size);
  return out;
}

inline Raster load_png(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContextError("cannot open image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), {});
  return decode_png(bytes);
}

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  namespace b64 = boost::beast::detail::base64;
  std::string out(b64::encoded_size(bytes.size()), '\0');
  out.resize(b64::encode(out.data(), bytes.data(), bytes.size()));
  return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& text) {
  namespace b64 = boost::beast::detail::base64;
  std::vector<std::uint8_t> out(b64::decoded_size(text.size()));
  out.resize(b64::decode(out.data(), text.data(), text.size()).first);
  return out;
}

// Pixel rectangle of a normalized box: outer edges, at least one pixel.
inline void pixel_rect(const BBox& b, int w, int h, int& x0, int& y0, int& x1, int& y1) {
  x0 = std::clamp(static_cast<int>(std::floor(b.x0 * w)), 0, w - 1);
  y0 = std::clamp(static_cast<int>(std::floor(b.y0 * h)), 0, h - 1);
  x1 = std::clamp(static_cast<int>(std::ceil(b.x1 * w)), x0 + 1, w);
  y1 = std::clamp(static_cast<int>(std::ceil(b.y1 * h)), y0 + 1, h);
}

// Crop, then bilinear upscale by `zoom` (pixel-center aligned).
inline Raster crop_zoom_raster(const Raster& src, const BBox& bbox, double zoom = 2.0) {
  if (src.width <= 0 || src.height <= 0) throw ContextError("empty raster");
  if (!(zoom > 0.0)) throw ConfigError("zoom factor must be > 0");
  int x0, y0, x1, y1;
  pixel_rect(bbox, src.width, src.height, x0, y0, x1, y1);
  const int cw = x1 - x0, ch = y1 - y0;
  Raster out;
  out.width = std::max(1, static_cast<int>(std::lround(cw * zoom)));
  out.height = std::max(1, static_cast<int>(std::lround(ch * zoom)));
  out.rgb.resize(static_cast<std::size_t>(out.width * out.height * 3));
  const double sx = static_cast<double>(cw) / out.width;
  const double sy = static_cast<double>(ch) / out.height;
  for (int y = 0; y < out.height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, ch - 1.0);
    const int iy = static_cast<int>(fy);
    const int iy1 = std::min(iy + 1, ch - 1);
    const double ty = fy - iy;
    for (int x = 0; x < out.width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, cw - 1.0);
      const int ix = static_cast<int>(fx);
      const int ix1 = std::min(ix + 1, cw - 1);
      const double tx = fx - ix;
      const auto* a = src.px(x0 + ix, y0 + iy);
      const auto* b = src.px(x0 + ix1, y0 + iy);
      const auto* c = src.px(x0 + ix, y0 + iy1);
      const auto* d = src.px(x0 + ix1, y0 + iy1);
      auto* o = out.px(x, y);
      for (int k = 0; k < 3; ++k) {
        const double top = a[k] * (1 - tx) + b[k] * tx;
        const double bot = c[k] * (1 - tx) + d[k] * tx;
        o[k] = static_cast<std::uint8_t>(std::lround(top * (1 - ty) + bot * ty));
      }
    }
  }
  return out;
}

// Original rasters by image id; crops are derived on demand and the encoded
// PNG attachment is cached per lineage.
class ImageStore {
 public:
  explicit ImageStore(double zoom = 2.0) : zoom_(zoom) {}

  void add(std::uint64_t id, Raster r) { originals_[id] = std::move(r); }
  bool has(std::uint64_t id) const { return originals_.count(id) > 0; }

  Raster resolve(const ImageRef& img) const {
    if (img.is_original()) {
      auto it = originals_.find(img.id);
      if (it == originals_.end()) throw ContextError("unknown image " + std::to_string(img.id));
      return it->second;
    }
    return crop_zoom_raster(resolve(img.crop->parent), img.crop->bbox, zoom_);
  }

  std::string attachment(const ImageRef& img) const {
    const std::string key = lineage_key(img);
    {
      std::lock_guard lock(mu_);
      if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    }
    std::string data = base64_encode(encode_png(resolve(img)));
    std::lock_guard lock(mu_);
    return cache_.emplace(key, std::move(data)).first->second;
  }

  static std::string lineage_key(const ImageRef& img) {
    if (img.is_original()) return std::to_string(img.id);
    const BBox& b = img.crop->bbox;
    return lineage_key(img.crop->parent) + "/" + std::to_string(img.id) + "(" +
           std::to_string(b.x0) + "," + std::to_string(b.y0) + "," + std::to_string(b.x1) +
           "," + std::to_string(b.y1) + ")";
  }

 private:
  double zoom_;
  std::map<std::uint64_t, Raster> originals_;
  mutable std::mutex mu_;
  mutable std::map<std::string, std::string> cache_;
};

}  // namespace seprod
