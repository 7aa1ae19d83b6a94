// Copyright 2026 The metadet Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "metadet/io.hpp"

// Minimal SVG line plots plus exact-value CSV sidecars. CSV cells use the
// JSON shortest-round-trip rendering so they match report files digit for
// digit.

namespace metadet::plots {

namespace fs = std::filesystem;

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;  // (x, y)
};

inline std::string num(double v) { return io::json(v).dump(); }

inline void write_csv(const fs::path& path, const std::string& x_name,
                      const std::vector<Series>& series) {
  std::string out = x_name + ",series,value\n";
  for (const auto& s : series)
    for (const auto& [x, y] : s.points)
      out += num(x) + "," + s.name + "," + num(y) + "\n";
  io::write_bytes(path, out.data(), out.size());
}

inline void write_line_plot_svg(const fs::path& path, const std::string& title,
                                const std::string& x_label, const std::string& y_label,
                                const std::vector<Series>& series) {
  MD_CHECK(!series.empty(), ConfigError, "plot needs at least one series");
  const double w = 640, h = 420, ml = 70, mr = 30, mt = 50, mb = 60;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  if (xmax <= xmin) xmax = xmin + 1;
  if (ymax <= ymin) ymax = ymin + 1;
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (w - ml - mr); };
  auto py = [&](double y) { return h - mb - (y - ymin) / (ymax - ymin) * (h - mt - mb); };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

  std::string svg = "<svg xmlns='http://www.w3.org/2000/svg' width='" + std::to_string(int(w)) +
                    "' height='" + std::to_string(int(h)) + "'>\n";
  svg += "<rect width='100%' height='100%' fill='white'/>\n";
  svg += "<text x='" + std::to_string(int(w / 2)) + "' y='28' text-anchor='middle' "
         "font-family='sans-serif' font-size='16'>" + title + "</text>\n";
  // axes
  svg += "<line x1='" + num(ml) + "' y1='" + num(h - mb) + "' x2='" + num(w - mr) + "' y2='" +
         num(h - mb) + "' stroke='black'/>\n";
  svg += "<line x1='" + num(ml) + "' y1='" + num(mt) + "' x2='" + num(ml) + "' y2='" +
         num(h - mb) + "' stroke='black'/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double xv = xmin + t * (xmax - xmin) / 4;
    const double yv = ymin + t * (ymax - ymin) / 4;
    svg += "<text x='" + num(px(xv)) + "' y='" + num(h - mb + 18) +
           "' text-anchor='middle' font-family='sans-serif' font-size='11'>" + num(xv) +
           "</text>\n";
    svg += "<text x='" + num(ml - 8) + "' y='" + num(py(yv) + 4) +
           "' text-anchor='end' font-family='sans-serif' font-size='11'>" + num(yv) +
           "</text>\n";
  }
  svg += "<text x='" + std::to_string(int(w / 2)) + "' y='" + num(h - 16) +
         "' text-anchor='middle' font-family='sans-serif' font-size='13'>" + x_label +
         "</text>\n";
  svg += "<text x='18' y='" + std::to_string(int(h / 2)) +
         "' text-anchor='middle' font-family='sans-serif' font-size='13' transform='rotate(-90 "
         "18 " + std::to_string(int(h / 2)) + ")'>" + y_label + "</text>\n";

  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = palette[si % 5];
    std::string pts;
    auto sorted = s.points;
    std::sort(sorted.begin(), sorted.end());
    for (const auto& [x, y] : sorted) pts += num(px(x)) + "," + num(py(y)) + " ";
    svg += "<polyline fill='none' stroke='" + std::string(color) + "' stroke-width='2' points='" +
           pts + "'/>\n";
    for (const auto& [x, y] : sorted)
      svg += "<circle cx='" + num(px(x)) + "' cy='" + num(py(y)) + "' r='3' fill='" + color +
             "'/>\n";
    svg += "<text x='" + num(w - mr - 4) + "' y='" + num(mt + 16 * (si + 1)) +
           "' text-anchor='end' font-family='sans-serif' font-size='12' fill='" + color + "'>" +
           s.name + "</text>\n";
  }
  svg += "</svg>\n";
  io::write_bytes(path, svg.data(), svg.size());
}

}  // namespace metadet::plots
