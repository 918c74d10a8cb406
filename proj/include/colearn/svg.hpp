#pragma once

// Minimal SVG report plots: loss/accuracy line charts, ROC overlays, and
// horizontal importance bars. Self-contained files, no plotting runtime.
// Also a binary PGM writer for exporting attention slices.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "colearn/common.hpp"
#include "colearn/evalmetrics.hpp"

namespace colearn {

namespace detail {

inline std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '&') out += "&amp;";
    else if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else out += c;
  }
  return out;
}

inline std::string fmt_num(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline const char* series_color(size_t i) {
  static const char* palette[] = {"#1f6fb2", "#d45500", "#2e8540",
                                  "#9b2d9b", "#b2a11f", "#666666"};
  return palette[i % (sizeof palette / sizeof palette[0])];
}

struct AxisScale {
  double lo = 0, hi = 1;
  double px0 = 0, px1 = 1;
  double to_px(double v) const {
    if (hi == lo) return (px0 + px1) / 2;
    return px0 + (v - lo) / (hi - lo) * (px1 - px0);
  }
};

inline void axis_ticks(std::string& svg, const AxisScale& ax, bool horizontal,
                       double cross_px) {
  const int n = 5;
  for (int i = 0; i <= n; ++i) {
    const double v = ax.lo + (ax.hi - ax.lo) * double(i) / n;
    const double p = ax.to_px(v);
    if (horizontal) {
      svg += "<line x1='" + fmt_num(p) + "' y1='" + fmt_num(cross_px) +
             "' x2='" + fmt_num(p) + "' y2='" + fmt_num(cross_px + 5) +
             "' stroke='#333'/>\n";
      svg += "<text x='" + fmt_num(p) + "' y='" + fmt_num(cross_px + 20) +
             "' font-size='11' text-anchor='middle' fill='#333'>" + fmt_num(v) +
             "</text>\n";
    } else {
      svg += "<line x1='" + fmt_num(cross_px - 5) + "' y1='" + fmt_num(p) +
             "' x2='" + fmt_num(cross_px) + "' y2='" + fmt_num(p) +
             "' stroke='#333'/>\n";
      svg += "<text x='" + fmt_num(cross_px - 8) + "' y='" + fmt_num(p + 4) +
             "' font-size='11' text-anchor='end' fill='#333'>" + fmt_num(v) +
             "</text>\n";
    }
  }
}

inline void write_svg_file(const std::string& path, const std::string& body,
                           int w, int h) {
  std::ofstream f(path);
  if (!f) fail_data("cannot write ", path);
  f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='"
    << h << "' viewBox='0 0 " << w << " " << h << "'>\n"
    << "<rect width='" << w << "' height='" << h << "' fill='white'/>\n"
    << body << "</svg>\n";
  if (!f) fail_data("short write on ", path);
}

}  // namespace detail

struct SvgSeries {
  std::string name;
  std::vector<double> x, y;
};

inline void write_line_chart(const std::string& path, const std::string& title,
                             const std::string& xlabel, const std::string& ylabel,
                             const std::vector<SvgSeries>& series) {
  require(!series.empty(), "line chart needs at least one series");
  const int W = 720, H = 460;
  detail::AxisScale xs{0, 1, 70, W - 30.0}, ys{0, 1, H - 60.0, 40};
  bool first = true;
  for (const auto& s : series) {
    require(s.x.size() == s.y.size() && !s.x.empty(),
            "line chart series needs matching nonempty x/y");
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (first) {
        xs.lo = xs.hi = s.x[i];
        ys.lo = ys.hi = s.y[i];
        first = false;
      }
      xs.lo = std::min(xs.lo, s.x[i]);
      xs.hi = std::max(xs.hi, s.x[i]);
      ys.lo = std::min(ys.lo, s.y[i]);
      ys.hi = std::max(ys.hi, s.y[i]);
    }
  }
  if (ys.hi == ys.lo) {
    ys.lo -= 0.5;
    ys.hi += 0.5;
  }
  if (xs.hi == xs.lo) {
    xs.lo -= 0.5;
    xs.hi += 0.5;
  }

  std::string b;
  b += "<text x='" + detail::fmt_num(W / 2.0) +
       "' y='24' font-size='15' text-anchor='middle' fill='#111'>" +
       detail::svg_escape(title) + "</text>\n";
  b += "<line x1='70' y1='40' x2='70' y2='" + detail::fmt_num(H - 60.0) +
       "' stroke='#333'/>\n";
  b += "<line x1='70' y1='" + detail::fmt_num(H - 60.0) + "' x2='" +
       detail::fmt_num(W - 30.0) + "' y2='" + detail::fmt_num(H - 60.0) +
       "' stroke='#333'/>\n";
  detail::axis_ticks(b, xs, true, H - 60.0);
  detail::axis_ticks(b, ys, false, 70);
  b += "<text x='" + detail::fmt_num((70 + W - 30) / 2.0) + "' y='" +
       detail::fmt_num(H - 20.0) +
       "' font-size='12' text-anchor='middle' fill='#333'>" +
       detail::svg_escape(xlabel) + "</text>\n";
  b += "<text x='18' y='" + detail::fmt_num((40 + H - 60) / 2.0) +
       "' font-size='12' text-anchor='middle' fill='#333' transform='rotate(-90 18 " +
       detail::fmt_num((40 + H - 60) / 2.0) + ")'>" + detail::svg_escape(ylabel) +
       "</text>\n";

  for (size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    std::string pts;
    for (size_t i = 0; i < s.x.size(); ++i) {
      pts += detail::fmt_num(xs.to_px(s.x[i])) + "," +
             detail::fmt_num(ys.to_px(s.y[i])) + " ";
    }
    b += "<polyline points='" + pts + "' fill='none' stroke='" +
         detail::series_color(si) + "' stroke-width='1.8'/>\n";
    const double ly = 46.0 + 16.0 * double(si);
    b += "<line x1='" + detail::fmt_num(W - 180.0) + "' y1='" +
         detail::fmt_num(ly - 4) + "' x2='" + detail::fmt_num(W - 160.0) +
         "' y2='" + detail::fmt_num(ly - 4) + "' stroke='" +
         detail::series_color(si) + "' stroke-width='2'/>\n";
    b += "<text x='" + detail::fmt_num(W - 154.0) + "' y='" +
         detail::fmt_num(ly) + "' font-size='11' fill='#333'>" +
         detail::svg_escape(s.name) + "</text>\n";
  }
  detail::write_svg_file(path, b, W, H);
}

inline void write_roc_overlay(
    const std::string& path,
    const std::vector<std::pair<std::string, RocCurve>>& curves) {
  require(!curves.empty(), "roc overlay needs at least one curve");
  const int W = 520, H = 520;
  detail::AxisScale xs{0, 1, 70, W - 30.0}, ys{0, 1, H - 60.0, 40};
  std::string b;
  b += "<text x='" + detail::fmt_num(W / 2.0) +
       "' y='24' font-size='15' text-anchor='middle' fill='#111'>ROC</text>\n";
  b += "<line x1='70' y1='40' x2='70' y2='" + detail::fmt_num(H - 60.0) +
       "' stroke='#333'/>\n";
  b += "<line x1='70' y1='" + detail::fmt_num(H - 60.0) + "' x2='" +
       detail::fmt_num(W - 30.0) + "' y2='" + detail::fmt_num(H - 60.0) +
       "' stroke='#333'/>\n";
  detail::axis_ticks(b, xs, true, H - 60.0);
  detail::axis_ticks(b, ys, false, 70);
  b += "<text x='" + detail::fmt_num((70 + W - 30) / 2.0) + "' y='" +
       detail::fmt_num(H - 20.0) +
       "' font-size='12' text-anchor='middle' fill='#333'>false positive rate</text>\n";
  b += "<text x='18' y='" + detail::fmt_num((40 + H - 60) / 2.0) +
       "' font-size='12' text-anchor='middle' fill='#333' transform='rotate(-90 18 " +
       detail::fmt_num((40 + H - 60) / 2.0) +
       ")'>true positive rate</text>\n";
  b += "<line x1='" + detail::fmt_num(xs.to_px(0)) + "' y1='" +
       detail::fmt_num(ys.to_px(0)) + "' x2='" + detail::fmt_num(xs.to_px(1)) +
       "' y2='" + detail::fmt_num(ys.to_px(1)) +
       "' stroke='#bbb' stroke-dasharray='4 3'/>\n";

  for (size_t ci = 0; ci < curves.size(); ++ci) {
    const auto& [name, curve] = curves[ci];
    std::string pts;
    for (const auto& p : curve.points)
      pts += detail::fmt_num(xs.to_px(p.fpr)) + "," +
             detail::fmt_num(ys.to_px(p.tpr)) + " ";
    b += "<polyline points='" + pts + "' fill='none' stroke='" +
         detail::series_color(ci) + "' stroke-width='1.8'/>\n";
    char lbl[160];
    std::snprintf(lbl, sizeof lbl, "%s (AUC %.3f)", name.c_str(),
                  auc_from_curve(curve));
    const double ly = H - 80.0 - 16.0 * double(curves.size() - 1 - ci);
    b += "<line x1='" + detail::fmt_num(W - 230.0) + "' y1='" +
         detail::fmt_num(ly - 4) + "' x2='" + detail::fmt_num(W - 210.0) +
         "' y2='" + detail::fmt_num(ly - 4) + "' stroke='" +
         detail::series_color(ci) + "' stroke-width='2'/>\n";
    b += "<text x='" + detail::fmt_num(W - 204.0) + "' y='" +
         detail::fmt_num(ly) + "' font-size='11' fill='#333'>" +
         detail::svg_escape(lbl) + "</text>\n";
  }
  detail::write_svg_file(path, b, W, H);
}

// horizontal bars, value labels at the bar ends
inline void write_bar_chart(const std::string& path, const std::string& title,
                            const std::vector<std::pair<std::string, double>>& bars) {
  require(!bars.empty(), "bar chart needs at least one bar");
  const int W = 640;
  const int H = 70 + int(bars.size()) * 28;
  double vmax = 0;
  for (const auto& [name, v] : bars) vmax = std::max(vmax, v);
  if (vmax <= 0) vmax = 1;
  const double x0 = 190, x1 = W - 80.0;
  std::string b;
  b += "<text x='" + detail::fmt_num(W / 2.0) +
       "' y='26' font-size='15' text-anchor='middle' fill='#111'>" +
       detail::svg_escape(title) + "</text>\n";
  for (size_t i = 0; i < bars.size(); ++i) {
    const double y = 50.0 + 28.0 * double(i);
    const double w = (x1 - x0) * bars[i].second / vmax;
    b += "<text x='" + detail::fmt_num(x0 - 8) + "' y='" +
         detail::fmt_num(y + 13) + "' font-size='11' text-anchor='end' fill='#333'>" +
         detail::svg_escape(bars[i].first) + "</text>\n";
    b += "<rect x='" + detail::fmt_num(x0) + "' y='" + detail::fmt_num(y) +
         "' width='" + detail::fmt_num(std::max(0.5, w)) +
         "' height='18' fill='" + detail::series_color(0) + "'/>\n";
    b += "<text x='" + detail::fmt_num(x0 + std::max(0.5, w) + 6) + "' y='" +
         detail::fmt_num(y + 13) + "' font-size='11' fill='#333'>" +
         detail::fmt_num(bars[i].second) + "</text>\n";
  }
  detail::write_svg_file(path, b, W, H);
}

// 8-bit binary PGM (P5)
inline void write_pgm(const std::string& path, int64_t width, int64_t height,
                      const std::vector<uint8_t>& pixels) {
  require(width > 0 && height > 0, "pgm: empty image");
  require(int64_t(pixels.size()) == width * height,
          "pgm: pixel count does not match dimensions");
  std::ofstream f(path, std::ios::binary);
  if (!f) fail_data("cannot write ", path);
  f << "P5\n" << width << " " << height << "\n255\n";
  f.write(reinterpret_cast<const char*>(pixels.data()),
          std::streamsize(pixels.size()));
  if (!f) fail_data("short write on ", path);
}

}  // namespace colearn
