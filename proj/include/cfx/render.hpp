#pragma once

// PNG figures: explanation-mask overlays and size/fidelity-vs-confidence
// charts. Requires libpng. Output carries no timestamps, so reruns produce
// identical files.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <png.h>

#include "cfx/error.hpp"
#include "cfx/tensor.hpp"

namespace cfx::render {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
};

inline constexpr Rgb kWhite{255, 255, 255};
inline constexpr Rgb kBlack{0, 0, 0};
inline constexpr Rgb kGrey{160, 160, 160};
inline constexpr Rgb kBaselineGrey{128, 128, 128};

class Canvas {
 public:
  Canvas(std::size_t width, std::size_t height, Rgb fill = kWhite)
      : width_(width), height_(height), px_(width * height, fill) {}

  std::size_t width() const noexcept { return width_; }
  std::size_t height() const noexcept { return height_; }

  void set(long x, long y, Rgb c) {
    if (x < 0 || y < 0 || x >= long(width_) || y >= long(height_)) return;
    px_[std::size_t(y) * width_ + std::size_t(x)] = c;
  }
  Rgb get(std::size_t x, std::size_t y) const { return px_[y * width_ + x]; }

  void fill_rect(long x0, long y0, long w, long h, Rgb c) {
    for (long y = y0; y < y0 + h; ++y) {
      for (long x = x0; x < x0 + w; ++x) set(x, y, c);
    }
  }

  void line(long x0, long y0, long x1, long y1, Rgb c, int thickness = 1) {
    const long dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const long sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    long err = dx + dy;
    while (true) {
      fill_rect(x0 - thickness / 2, y0 - thickness / 2, thickness, thickness, c);
      if (x0 == x1 && y0 == y1) break;
      const long e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  const std::vector<Rgb>& pixels() const noexcept { return px_; }

 private:
  std::size_t width_, height_;
  std::vector<Rgb> px_;
};

// --- 5x7 bitmap font ------------------------------------------------------------

namespace detail {

using Glyph = std::array<std::uint8_t, 7>;

inline const std::map<char, Glyph>& font() {
  static const std::map<char, Glyph> f = {
      {' ', {0, 0, 0, 0, 0, 0, 0}},
      {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
      {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}},
      {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
      {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
      {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
      {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
      {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
      {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
      {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
      {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}},
      {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
      {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}},
      {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
      {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}},
      {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
      {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
      {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
      {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}},
      {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
      {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
      {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
      {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}},
      {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
      {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}},
      {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
      {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
      {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
      {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}},
      {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
      {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}},
      {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
      {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}},
      {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}},
      {',', {0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08}},
      {'%', {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03}},
      {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}},
      {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
      {'+', {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}},
      {'=', {0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00}},
      {'/', {0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00}},
      {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}},
      {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}},
  };
  return f;
}

}  // namespace detail

inline constexpr int kGlyphAdvance = 6;  // 5 columns + 1 spacing

inline long text_width(const std::string& s, int scale = 1) {
  return long(s.size()) * kGlyphAdvance * scale;
}

// Lowercase letters are drawn as capitals; unknown characters as blanks.
inline void draw_text(Canvas& c, long x, long y, const std::string& s, Rgb color, int scale = 1) {
  const auto& f = detail::font();
  for (char ch : s) {
    const char up = (ch >= 'a' && ch <= 'z') ? char(ch - 'a' + 'A') : ch;
    const auto it = f.find(up);
    if (it != f.end()) {
      for (int row = 0; row < 7; ++row) {
        for (int col = 0; col < 5; ++col) {
          if (it->second[row] & (0x10 >> col)) {
            c.fill_rect(x + col * scale, y + row * scale, scale, scale, color);
          }
        }
      }
    }
    x += kGlyphAdvance * scale;
  }
}

// --- PNG output -----------------------------------------------------------------

inline void write_png(const Canvas& c, const std::filesystem::path& path,
                      const std::vector<std::pair<std::string, std::string>>& text = {}) {
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (fp == nullptr) throw DataError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_write_struct(&png, nullptr);
    std::fclose(fp);
    throw DataError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw DataError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, png_uint_32(c.width()), png_uint_32(c.height()), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_text> chunks(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    chunks[i].compression = PNG_TEXT_COMPRESSION_NONE;
    chunks[i].key = const_cast<char*>(text[i].first.c_str());
    chunks[i].text = const_cast<char*>(text[i].second.c_str());
    chunks[i].text_length = text[i].second.size();
  }
  if (!chunks.empty()) png_set_text(png, info, chunks.data(), int(chunks.size()));
  png_write_info(png, info);
  std::vector<png_byte> row(3 * c.width());
  for (std::size_t y = 0; y < c.height(); ++y) {
    for (std::size_t x = 0; x < c.width(); ++x) {
      const Rgb p = c.get(x, y);
      row[3 * x] = p.r;
      row[3 * x + 1] = p.g;
      row[3 * x + 2] = p.b;
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

// --- figures --------------------------------------------------------------------

// "S_E size: 13.6%"
inline std::string size_caption(double fraction) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "S_E size: %.1f%%", 100.0 * fraction);
  return buf;
}

// Kept pixels show the image in grey (channel mean, min-max scaled, kept
// at or above 40/255); dropped pixels are flat baseline grey. Caption strip
// underneath.
inline Canvas mask_overlay(const ImageTensor& img, const PixelMask& keep,
                           const std::string& caption) {
  if (keep.extent() != img.extent()) throw DataError("render: mask and image differ in size");
  const std::size_t h = img.height(), w = img.width();
  std::vector<double> grey(h * w, 0.0);
  for (std::size_t c = 0; c < img.channels(); ++c) {
    const auto ch = img.channel(c);
    for (std::size_t p = 0; p < h * w; ++p) grey[p] += ch[p] / double(img.channels());
  }
  const auto [lo_it, hi_it] = std::minmax_element(grey.begin(), grey.end());
  const double lo = *lo_it, span = *hi_it - *lo_it;

  const int scale = int(std::max<std::size_t>(1, 256 / std::max(h, w)));
  const int text_scale = 2;
  const long caption_h = 7 * text_scale + 12;
  const long width = std::max<long>(long(w) * scale, text_width(caption, text_scale) + 12);
  Canvas canvas(std::size_t(width), std::size_t(long(h) * scale + caption_h), kWhite);
  for (std::size_t p = 0; p < h * w; ++p) {
    const double g = span > 0 ? (grey[p] - lo) / span : 0.5;
    const auto v = std::uint8_t(std::lround(40 + 215 * g));
    const Rgb color = keep[p] ? Rgb{v, v, v} : kBaselineGrey;
    canvas.fill_rect(long(p % w) * scale, long(p / w) * scale, scale, scale, color);
  }
  draw_text(canvas, 6, long(h) * scale + 6, caption, kBlack, text_scale);
  return canvas;
}

struct SeriesPoint {
  double confidence = 0.0;
  double size = 0.0;
  double fidelity = 0.0;
};

// One line per series name, keyed e.g. by conformity kind.
using SweepSeries = std::map<std::string, std::vector<SeriesPoint>>;

// Reads the kind, epsilon, mean_size and fidelity columns of a sweep CSV.
inline SweepSeries read_sweep_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty CSV");
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
    if (!s.empty() && s.back() == ',') out.emplace_back();
    return out;
  };
  const auto header = split(line);
  auto column = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError(path.string() + ": missing column '" + name + "'");
    return std::size_t(it - header.begin());
  };
  const std::size_t kind = column("kind"), eps = column("epsilon"), size = column("mean_size"),
                    fid = column("fidelity");
  SweepSeries series;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": wrong column count");
    }
    try {
      series[cells[kind]].push_back(
          {1.0 - std::stod(cells[eps]), std::stod(cells[size]), std::stod(cells[fid])});
    } catch (const std::exception&) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": bad number");
    }
  }
  if (series.empty()) throw DataError(path.string() + ": no rows");
  for (auto& [name, pts] : series) {
    std::sort(pts.begin(), pts.end(),
              [](const auto& a, const auto& b) { return a.confidence < b.confidence; });
  }
  return series;
}

inline const std::vector<Rgb>& palette() {
  static const std::vector<Rgb> p = {
      {31, 119, 180}, {214, 39, 40}, {44, 160, 44}, {148, 103, 189}, {255, 127, 14}, {23, 190, 207}};
  return p;
}

// Two panels: mean explanation size and fidelity against confidence 1 - eps.
// The fidelity panel also shows the y = x target line.
inline Canvas sweep_chart(const SweepSeries& series) {
  const long panel_w = 360, panel_h = 260, left = 48, top = 28, plot_w = 290, plot_h = 190;
  const long legend_h = 14 * long(series.size()) + 10;
  Canvas canvas(std::size_t(2 * panel_w), std::size_t(panel_h + legend_h), kWhite);

  double xmin = 1.0, xmax = 0.0;
  for (const auto& [name, pts] : series) {
    for (const auto& p : pts) {
      xmin = std::min(xmin, p.confidence);
      xmax = std::max(xmax, p.confidence);
    }
  }
  if (xmax - xmin < 1e-9) {
    xmin -= 0.01;
    xmax += 0.01;
  }

  for (int panel = 0; panel < 2; ++panel) {
    const long ox = panel * panel_w + left, oy = top;
    auto px = [&](double x) { return ox + long(std::lround((x - xmin) / (xmax - xmin) * plot_w)); };
    auto py = [&](double y) { return oy + plot_h - long(std::lround(std::clamp(y, 0.0, 1.0) * plot_h)); };
    draw_text(canvas, ox, 8, panel == 0 ? "mean S_E size" : "fidelity", kBlack, 2);
    canvas.line(ox, oy, ox, oy + plot_h, kBlack);
    canvas.line(ox, oy + plot_h, ox + plot_w, oy + plot_h, kBlack);
    for (double t : {0.0, 0.5, 1.0}) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%.1f", t);
      canvas.line(ox - 4, py(t), ox, py(t), kBlack);
      draw_text(canvas, ox - 6 - text_width(buf), py(t) - 3, buf, kBlack);
    }
    std::vector<double> ticks;
    for (const auto& [name, pts] : series) {
      for (const auto& p : pts) ticks.push_back(p.confidence);
    }
    std::sort(ticks.begin(), ticks.end());
    ticks.erase(std::unique(ticks.begin(), ticks.end(),
                            [](double a, double b) { return std::abs(a - b) < 1e-9; }),
                ticks.end());
    for (double t : ticks) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%g", 100.0 * t);
      canvas.line(px(t), oy + plot_h, px(t), oy + plot_h + 4, kBlack);
      draw_text(canvas, px(t) - text_width(buf) / 2, oy + plot_h + 8, buf, kBlack);
    }
    draw_text(canvas, ox + plot_w / 2 - text_width("confidence %") / 2, oy + plot_h + 20,
              "confidence %", kBlack);
    if (panel == 1) canvas.line(px(xmin), py(xmin), px(xmax), py(xmax), kGrey);

    std::size_t idx = 0;
    for (const auto& [name, pts] : series) {
      const Rgb color = palette()[idx++ % palette().size()];
      for (std::size_t i = 0; i < pts.size(); ++i) {
        const double y = panel == 0 ? pts[i].size : pts[i].fidelity;
        canvas.fill_rect(px(pts[i].confidence) - 2, py(y) - 2, 5, 5, color);
        if (i > 0) {
          const double y0 = panel == 0 ? pts[i - 1].size : pts[i - 1].fidelity;
          canvas.line(px(pts[i - 1].confidence), py(y0), px(pts[i].confidence), py(y), color, 2);
        }
      }
    }
  }

  std::size_t idx = 0;
  for (const auto& [name, pts] : series) {
    const long y = panel_h + 4 + 14 * long(idx);
    canvas.fill_rect(left, y, 16, 7, palette()[idx % palette().size()]);
    draw_text(canvas, left + 24, y, name, kBlack);
    ++idx;
  }
  return canvas;
}

}  // namespace cfx::render
