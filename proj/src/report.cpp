#include "fdseg/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "fdseg/error.hpp"

namespace fdseg {

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

bool parse_double(const std::string& s, double& v) {
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  return ec == std::errc() && p == end;
}

std::string fmt(double v, const char* spec = "%.2f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

}  // namespace

std::vector<SweepRow> parse_sweep_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(is, line)) throw ParseError("sweep CSV: missing header", 1);
  ++lineno;
  const auto header = split_fields(line);
  auto column = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ParseError("sweep CSV: header lacks column '" + name + "'", 1);
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_cond = column("condition"), c_seed = column("seed"), c_mode = column("loss_mode"),
                    c_dice = column("test_dice_base"), c_iou = column("test_iou_base"), c_status = column("status");
  std::vector<SweepRow> rows;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto f = split_fields(line);
    if (f.size() != header.size()) {
      throw ParseError("sweep CSV line " + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                           " fields, got " + std::to_string(f.size()),
                       lineno);
    }
    SweepRow r;
    r.condition = f[c_cond];
    r.seed = f[c_seed];
    r.loss_mode = f[c_mode];
    r.status = f[c_status];
    const bool ok_dice = parse_double(f[c_dice], r.dice);
    const bool ok_iou = parse_double(f[c_iou], r.iou);
    if (r.status == "ok" && (!ok_dice || !ok_iou)) {
      throw ParseError("sweep CSV line " + std::to_string(lineno) + ": non-numeric metric", lineno);
    }
    if (r.condition.empty() || r.loss_mode.empty()) {
      throw ParseError("sweep CSV line " + std::to_string(lineno) + ": empty condition or loss_mode", lineno);
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string render_svg(const std::vector<SweepRow>& rows, const std::string& metric, const std::string& title) {
  if (metric != "dice" && metric != "iou") throw ContractError("render_svg: metric must be dice or iou");
  std::vector<std::string> conditions, modes;
  std::map<std::pair<std::string, std::string>, std::vector<double>> values;
  for (const auto& r : rows) {
    if (r.status != "ok") continue;
    if (std::find(conditions.begin(), conditions.end(), r.condition) == conditions.end())
      conditions.push_back(r.condition);
    if (std::find(modes.begin(), modes.end(), r.loss_mode) == modes.end()) modes.push_back(r.loss_mode);
    values[{r.loss_mode, r.condition}].push_back(metric == "dice" ? r.dice : r.iou);
  }
  if (conditions.empty()) throw ValidationError("report: sweep has no successful rows");
  const bool numeric = std::all_of(conditions.begin(), conditions.end(), [](const std::string& c) {
    double v;
    return parse_double(c, v);
  });
  if (numeric) {
    std::stable_sort(conditions.begin(), conditions.end(), [](const std::string& a, const std::string& b) {
      double x, y;
      parse_double(a, x);
      parse_double(b, y);
      return x < y;
    });
  }

  struct Stat {
    double mean, sd;
  };
  std::map<std::pair<std::string, std::string>, Stat> stats;
  double lo = 1e300, hi = -1e300;
  for (const auto& [key, v] : values) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    stats[key] = {m, sd};
    lo = std::min(lo, m - sd);
    hi = std::max(hi, m + sd);
  }
  double ymin = std::floor(lo * 10.0) / 10.0, ymax = std::ceil(hi * 10.0) / 10.0;
  if (ymax - ymin < 0.1) ymax = ymin + 0.1;

  const double W = 640, H = 400, left = 60, right = 170, top = 40, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;
  auto xpos = [&](std::size_t i) {
    return conditions.size() == 1 ? left + pw / 2 : left + pw * static_cast<double>(i) / (conditions.size() - 1);
  };
  auto ypos = [&](double v) { return top + ph * (1.0 - (v - ymin) / (ymax - ymin)); };
  static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
    << " " << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << fmt(left + pw / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">" << escape_xml(title)
    << "</text>\n";
  s << "<line x1=\"" << fmt(left) << "\" y1=\"" << fmt(top + ph) << "\" x2=\"" << fmt(left + pw) << "\" y2=\""
    << fmt(top + ph) << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << fmt(left) << "\" y1=\"" << fmt(top) << "\" x2=\"" << fmt(left) << "\" y2=\"" << fmt(top + ph)
    << "\" stroke=\"black\"/>\n";
  const int yticks = static_cast<int>(std::lround((ymax - ymin) / 0.1));
  const int ystep = yticks > 10 ? 2 : 1;
  for (int t = 0; t <= yticks; t += ystep) {
    const double v = ymin + 0.1 * t;
    s << "<line x1=\"" << fmt(left - 4) << "\" y1=\"" << fmt(ypos(v)) << "\" x2=\"" << fmt(left) << "\" y2=\""
      << fmt(ypos(v)) << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << fmt(left - 8) << "\" y=\"" << fmt(ypos(v) + 4) << "\" text-anchor=\"end\">" << fmt(v)
      << "</text>\n";
  }
  for (std::size_t i = 0; i < conditions.size(); ++i) {
    s << "<text x=\"" << fmt(xpos(i)) << "\" y=\"" << fmt(top + ph + 18) << "\" text-anchor=\"middle\">"
      << escape_xml(conditions[i]) << "</text>\n";
  }
  s << "<text x=\"" << fmt(left + pw / 2) << "\" y=\"" << fmt(H - 10) << "\" text-anchor=\"middle\">condition</text>\n";
  s << "<text x=\"16\" y=\"" << fmt(top + ph / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
    << fmt(top + ph / 2) << ")\">mean " << metric << "</text>\n";

  for (std::size_t m = 0; m < modes.size(); ++m) {
    const char* color = palette[m % 10];
    std::ostringstream pts;
    std::ostringstream marks;
    bool first = true;
    for (std::size_t i = 0; i < conditions.size(); ++i) {
      auto it = stats.find({modes[m], conditions[i]});
      if (it == stats.end()) continue;
      const double x = xpos(i), y = ypos(it->second.mean);
      pts << (first ? "" : " ") << fmt(x) << "," << fmt(y);
      first = false;
      const double y0 = ypos(it->second.mean - it->second.sd), y1 = ypos(it->second.mean + it->second.sd);
      marks << "<line x1=\"" << fmt(x) << "\" y1=\"" << fmt(y0) << "\" x2=\"" << fmt(x) << "\" y2=\"" << fmt(y1)
            << "\" stroke=\"" << color << "\"/>\n";
      marks << "<line x1=\"" << fmt(x - 4) << "\" y1=\"" << fmt(y0) << "\" x2=\"" << fmt(x + 4) << "\" y2=\""
            << fmt(y0) << "\" stroke=\"" << color << "\"/>\n";
      marks << "<line x1=\"" << fmt(x - 4) << "\" y1=\"" << fmt(y1) << "\" x2=\"" << fmt(x + 4) << "\" y2=\""
            << fmt(y1) << "\" stroke=\"" << color << "\"/>\n";
      marks << "<circle cx=\"" << fmt(x) << "\" cy=\"" << fmt(y) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"" << pts.str() << "\"/>\n";
    s << marks.str();
    const double ly = top + 10 + 18.0 * static_cast<double>(m);
    s << "<line x1=\"" << fmt(left + pw + 15) << "\" y1=\"" << fmt(ly) << "\" x2=\"" << fmt(left + pw + 35)
      << "\" y2=\"" << fmt(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    s << "<text x=\"" << fmt(left + pw + 40) << "\" y=\"" << fmt(ly + 4) << "\">" << escape_xml(modes[m])
      << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

std::vector<std::filesystem::path> write_report(const std::filesystem::path& csv, const std::filesystem::path& out) {
  std::ifstream is(csv, std::ios::binary);
  if (!is) throw Error("cannot open " + csv.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  const auto rows = parse_sweep_csv(ss.str());
  const std::string stem = csv.stem().string();
  std::vector<std::pair<std::filesystem::path, std::string>> files;
  for (const std::string metric : {"dice", "iou"}) {
    files.emplace_back(out / (stem + "_" + metric + ".svg"), render_svg(rows, metric, stem + ": " + metric));
  }
  std::filesystem::create_directories(out);
  std::vector<std::filesystem::path> paths;
  for (const auto& [path, body] : files) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write " + path.string());
    os << body;
    paths.push_back(path);
  }
  return paths;
}

}  // namespace fdseg
