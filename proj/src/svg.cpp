#include "parenlens/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <sstream>

#include "parenlens/error.hpp"

namespace parenlens {

namespace {

double num(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str()) throw InvalidArgument("plot: '" + s + "' is not a number");
  return v;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

// Tokens like "\n" and " " are invisible; show an escaped form instead.
std::string display_token(const std::string& t) {
  std::string out;
  for (char c : t) {
    if (c == '\n') out += "\\n";
    else if (c == ' ') out += "␣";
    else out += c;
  }
  return out;
}

std::string color_for(double v, double max_abs) {
  const double t = max_abs > 0 ? std::clamp(v / max_abs, -1.0, 1.0) : 0.0;
  int r = 255, g = 255, b = 255;
  if (t > 0) {
    r = static_cast<int>(std::lround(255 - t * (255 - 33)));
    g = static_cast<int>(std::lround(255 - t * (255 - 102)));
    b = static_cast<int>(std::lround(255 - t * (255 - 172)));
  } else if (t < 0) {
    const double a = -t;
    r = static_cast<int>(std::lround(255 - a * (255 - 214)));
    g = static_cast<int>(std::lround(255 - a * (255 - 96)));
    b = static_cast<int>(std::lround(255 - a * (255 - 77)));
  }
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"};

void open_svg(std::ostringstream& os, double w, double h, const std::string& title) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(w) << "\" height=\"" << fmt(h)
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<title>" << xml_escape(title) << "</title>\n";
  os << "<text x=\"" << fmt(w / 2) << "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title)
     << "</text>\n";
}

}  // namespace

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      case '\n': out += "&#10;"; break;
      case '\r': out += "&#13;"; break;
      case '\t': out += "&#9;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string render_line_chart(const CsvTable& table, const std::string& series_col, const std::string& x_col,
                              const std::string& y_col, const std::string& title) {
  const auto sc = table.column(series_col), xc = table.column(x_col), yc = table.column(y_col);
  std::vector<std::string> xs, series;
  std::map<std::string, std::vector<std::pair<std::size_t, double>>> points;
  double lo = 0, hi = 0;
  for (const auto& r : table.rows) {
    auto xi = std::find(xs.begin(), xs.end(), r[xc]);
    if (xi == xs.end()) xi = xs.insert(xs.end(), r[xc]);
    if (std::find(series.begin(), series.end(), r[sc]) == series.end()) series.push_back(r[sc]);
    const double y = num(r[yc]);
    lo = std::min(lo, y);
    hi = std::max(hi, y);
    points[r[sc]].emplace_back(static_cast<std::size_t>(xi - xs.begin()), y);
  }
  if (hi == lo) hi = lo + 1;
  const double left = 60, right = 150, top = 30, bottom = 70;
  const double pw = std::max<double>(300, 40.0 * static_cast<double>(xs.size())), ph = 260;
  const double w = left + pw + right, h = top + ph + bottom;
  auto X = [&](std::size_t i) { return left + (xs.size() > 1 ? pw * static_cast<double>(i) / (xs.size() - 1) : pw / 2); };
  auto Y = [&](double v) { return top + ph * (hi - v) / (hi - lo); };

  std::ostringstream os;
  open_svg(os, w, h, title);
  os << "<rect x=\"" << fmt(left) << "\" y=\"" << fmt(top) << "\" width=\"" << fmt(pw) << "\" height=\"" << fmt(ph)
     << "\" fill=\"none\" stroke=\"#999\"/>\n";
  os << "<line x1=\"" << fmt(left) << "\" x2=\"" << fmt(left + pw) << "\" y1=\"" << fmt(Y(0)) << "\" y2=\""
     << fmt(Y(0)) << "\" stroke=\"#bbb\" stroke-dasharray=\"4 3\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4;
    os << "<text x=\"" << fmt(left - 6) << "\" y=\"" << fmt(Y(v) + 4) << "\" text-anchor=\"end\">" << fmt(v)
       << "</text>\n";
  }
  for (std::size_t i = 0; i < xs.size(); ++i) {
    os << "<text x=\"" << fmt(X(i)) << "\" y=\"" << fmt(top + ph + 14) << "\" text-anchor=\"end\" transform=\"rotate(-45 "
       << fmt(X(i)) << ' ' << fmt(top + ph + 14) << ")\">" << xml_escape(xs[i]) << "</text>\n";
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kPalette[s % std::size(kPalette)];
    os << "<polyline class=\"series\" data-series=\"" << xml_escape(series[s]) << "\" fill=\"none\" stroke=\""
       << color << "\" stroke-width=\"2\" points=\"";
    bool first = true;
    for (const auto& [i, y] : points[series[s]]) {
      os << (first ? "" : " ") << fmt(X(i)) << ',' << fmt(Y(y));
      first = false;
    }
    os << "\"/>\n";
    for (const auto& [i, y] : points[series[s]]) {
      os << "<circle cx=\"" << fmt(X(i)) << "\" cy=\"" << fmt(Y(y)) << "\" r=\"2.5\" fill=\"" << color
         << "\"><title>" << xml_escape(series[s] + " " + xs[i]) << "</title></circle>\n";
    }
    const double ly = top + 14 + 16.0 * static_cast<double>(s);
    os << "<rect x=\"" << fmt(left + pw + 12) << "\" y=\"" << fmt(ly - 9) << "\" width=\"10\" height=\"10\" fill=\""
       << color << "\"/><text x=\"" << fmt(left + pw + 26) << "\" y=\"" << fmt(ly) << "\">" << xml_escape(series[s])
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string render_heatmap(const CsvTable& table, const std::string& row_col, const std::string& col_col,
                           const std::string& value_col, const std::string& title) {
  const auto rc = table.column(row_col), cc = table.column(col_col), vc = table.column(value_col);
  int n_rows = 0, n_cols = 0;
  double max_abs = 0;
  for (const auto& r : table.rows) {
    n_rows = std::max(n_rows, static_cast<int>(num(r[rc])) + 1);
    n_cols = std::max(n_cols, static_cast<int>(num(r[cc])) + 1);
    max_abs = std::max(max_abs, std::abs(num(r[vc])));
  }
  const double cell = 36, left = 70, top = 40;
  const double w = left + cell * n_cols + 90, h = top + cell * n_rows + 40;
  std::ostringstream os;
  open_svg(os, w, h, title);
  for (const auto& r : table.rows) {
    const double v = num(r[vc]);
    const double x = left + cell * num(r[cc]), y = top + cell * num(r[rc]);
    os << "<rect class=\"cell\" data-row=\"" << r[rc] << "\" data-col=\"" << r[cc] << "\" data-value=\""
       << xml_escape(r[vc]) << "\" x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" width=\"" << fmt(cell)
       << "\" height=\"" << fmt(cell) << "\" fill=\"" << color_for(v, max_abs) << "\" stroke=\"#fff\"><title>"
       << xml_escape(row_col + " " + r[rc] + ", " + col_col + " " + r[cc] + ": " + r[vc]) << "</title></rect>\n";
  }
  for (int i = 0; i < n_rows; ++i) {
    os << "<text x=\"" << fmt(left - 6) << "\" y=\"" << fmt(top + cell * i + cell / 2 + 4)
       << "\" text-anchor=\"end\">" << xml_escape(row_col) << ' ' << i << "</text>\n";
  }
  for (int j = 0; j < n_cols; ++j) {
    os << "<text x=\"" << fmt(left + cell * j + cell / 2) << "\" y=\"" << fmt(top - 4) << "\" text-anchor=\"middle\">"
       << j << "</text>\n";
  }
  os << "<text x=\"" << fmt(left + cell * n_cols + 8) << "\" y=\"" << fmt(top + 12) << "\">max |v| "
     << xml_escape(format_number(max_abs)) << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

std::string render_attention(const CsvTable& table, const std::string& title) {
  const auto qc = table.column("query_pos"), kc = table.column("key_pos"), wc = table.column("weight");
  const auto qt = table.column("query_token"), kt = table.column("key_token");
  std::map<int, std::string> q_tokens, k_tokens;
  for (const auto& r : table.rows) {
    q_tokens[static_cast<int>(num(r[qc]))] = r[qt];
    k_tokens[static_cast<int>(num(r[kc]))] = r[kt];
  }
  const int nq = q_tokens.empty() ? 0 : q_tokens.rbegin()->first + 1;
  const int nk = k_tokens.empty() ? 0 : k_tokens.rbegin()->first + 1;
  const double cell = 22, left = 90, top = 110;
  const double w = left + cell * nk + 30, h = top + cell * nq + 30;
  std::ostringstream os;
  open_svg(os, w, h, title);
  for (const auto& r : table.rows) {
    const double v = num(r[wc]);
    os << "<rect class=\"cell\" data-query=\"" << r[qc] << "\" data-key=\"" << r[kc] << "\" data-value=\""
       << xml_escape(r[wc]) << "\" x=\"" << fmt(left + cell * num(r[kc])) << "\" y=\"" << fmt(top + cell * num(r[qc]))
       << "\" width=\"" << fmt(cell) << "\" height=\"" << fmt(cell) << "\" fill=\"" << color_for(v, 1.0)
       << "\" stroke=\"#eee\"><title>" << xml_escape(r[wc]) << "</title></rect>\n";
  }
  for (const auto& [k, tok] : k_tokens) {
    const double x = left + cell * k + cell / 2 + 4;
    os << "<text class=\"key-label\" data-pos=\"" << k << "\" data-token=\"" << xml_escape(tok) << "\" x=\"" << fmt(x)
       << "\" y=\"" << fmt(top - 6) << "\" transform=\"rotate(-60 " << fmt(x) << ' ' << fmt(top - 6) << ")\">"
       << xml_escape(display_token(tok)) << "</text>\n";
  }
  for (const auto& [q, tok] : q_tokens) {
    os << "<text class=\"query-label\" data-pos=\"" << q << "\" data-token=\"" << xml_escape(tok) << "\" x=\""
       << fmt(left - 6) << "\" y=\"" << fmt(top + cell * q + cell / 2 + 4) << "\" text-anchor=\"end\">"
       << xml_escape(display_token(tok)) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace parenlens
