#include "melodyflow/report.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "melodyflow/errors.hpp"

namespace melodyflow {

using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

const json& clip_rows(const json& eval) {
  if (!eval.is_object() || !eval.contains("clips") || !eval["clips"].is_array()) {
    throw ParseError("evaluation JSON lacks a 'clips' array");
  }
  return eval["clips"];
}

double metric(const json& row, const std::string& name) {
  if (!row.contains(name) || !row[name].is_number()) {
    throw ParseError("clip entry lacks numeric '" + name + "'");
  }
  return row[name].get<double>();
}

}  // namespace

const std::vector<std::string>& report_metrics() {
  static const std::vector<std::string> names = {"wer", "S", "D", "I", "r_con", "r_mel", "fpc", "sim", "total"};
  return names;
}

std::map<std::string, double> recompute_aggregates(const json& eval) {
  const json& rows = clip_rows(eval);
  std::map<std::string, double> out;
  if (rows.empty()) return out;
  for (const auto& name : report_metrics()) {
    double sum = 0.0;
    for (const auto& row : rows) sum += metric(row, name);
    out[name] = sum / static_cast<double>(rows.size());
  }
  return out;
}

std::vector<json> parse_json_lines(const std::string& text) {
  std::vector<json> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::string render_curve_svg(const std::vector<json>& curve) {
  const double width = 640, height = 360, pad = 40;
  const std::vector<std::pair<std::string, std::string>> series = {
      {"mean_reward", "#1f77b4"}, {"mean_r_con", "#2ca02c"}, {"mean_r_mel", "#d62728"}};

  double x_lo = 0, x_hi = 1, y_lo = 0, y_hi = 1;
  bool first = true;
  for (const auto& p : curve) {
    const double x = p.value("step", 0.0);
    if (first) x_lo = x_hi = x;
    x_lo = std::min(x_lo, x);
    x_hi = std::max(x_hi, x);
    for (const auto& [key, colour] : series) {
      const double y = p.value(key, 0.0);
      if (first) y_lo = y_hi = y;
      y_lo = std::min(y_lo, y);
      y_hi = std::max(y_hi, y);
      first = false;
    }
  }
  if (x_hi == x_lo) x_hi = x_lo + 1;
  if (y_hi == y_lo) y_hi = y_lo + 1;
  auto sx = [&](double x) { return pad + (x - x_lo) / (x_hi - x_lo) * (width - 2 * pad); };
  auto sy = [&](double y) { return height - pad - (y - y_lo) / (y_hi - y_lo) * (height - 2 * pad); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<line x1=\"" << pad << "\" y1=\"" << height - pad << "\" x2=\"" << width - pad << "\" y2=\"" << height - pad
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << pad << "\" y1=\"" << pad << "\" x2=\"" << pad << "\" y2=\"" << height - pad
      << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << pad << "\" y=\"" << pad - 8 << "\" font-size=\"11\">" << fmt(y_hi) << "</text>\n";
  svg << "<text x=\"" << pad << "\" y=\"" << height - pad + 14 << "\" font-size=\"11\">" << fmt(y_lo) << " @ step "
      << x_lo << "</text>\n";
  svg << "<text x=\"" << width - pad - 60 << "\" y=\"" << height - pad + 14 << "\" font-size=\"11\">step " << x_hi
      << "</text>\n";
  int row = 0;
  for (const auto& [key, colour] : series) {
    svg << "<polyline fill=\"none\" stroke=\"" << colour << "\" points=\"";
    for (const auto& p : curve) svg << sx(p.value("step", 0.0)) << ',' << sy(p.value(key, 0.0)) << ' ';
    svg << "\"/>\n";
    svg << "<text x=\"" << width - pad - 100 << "\" y=\"" << pad + 14 * row++ << "\" font-size=\"11\" fill=\""
        << colour << "\">" << key << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

std::string render_report(const json& eval, const json* before, const std::vector<json>* curve,
                          const std::string& curve_image) {
  const json& rows = clip_rows(eval);
  const auto after = recompute_aggregates(eval);
  std::map<std::string, double> base;
  if (before != nullptr) base = recompute_aggregates(*before);

  std::ostringstream md;
  md << "# Evaluation report\n\n";
  md << "Clips: " << rows.size() << "\n\n";
  md << "`sim` is a mean-feature cosine stand-in and is not comparable to embedding-based speaker similarity.\n\n";

  md << "## Aggregates\n\n";
  if (before != nullptr) {
    md << "| metric | before | after | delta |\n|---|---|---|---|\n";
  } else {
    md << "| metric | mean |\n|---|---|\n";
  }
  for (const auto& name : report_metrics()) {
    const bool has_after = after.count(name) > 0;
    const std::string a = has_after ? fmt(after.at(name)) : "n/a";
    if (before != nullptr) {
      const bool has_before = base.count(name) > 0;
      const std::string b = has_before ? fmt(base.at(name)) : "n/a";
      const std::string d = has_after && has_before ? fmt(after.at(name) - base.at(name)) : "n/a";
      md << "| " << name << " | " << b << " | " << a << " | " << d << " |\n";
    } else {
      md << "| " << name << " | " << a << " |\n";
    }
  }

  md << "\n## Per clip\n\n| clip";
  for (const auto& name : report_metrics()) md << " | " << name;
  md << " |\n|---";
  for (std::size_t i = 0; i < report_metrics().size(); ++i) md << "|---";
  md << "|\n";
  for (const auto& row : rows) {
    md << "| " << row.value("clip_id", std::string("?"));
    for (const auto& name : report_metrics()) md << " | " << fmt(metric(row, name));
    md << " |\n";
  }

  if (curve != nullptr) {
    md << "\n## Post-training reward curve\n\n";
    md << "Points: " << curve->size() << "\n\n";
    if (!curve->empty()) {
      const json& first = curve->front();
      const json& last = curve->back();
      md << "| | step | mean_reward | mean_r_con | mean_r_mel | mean_kl |\n|---|---|---|---|---|---|\n";
      for (const auto& [label, p] : {std::pair<const char*, const json*>{"first", &first}, {"last", &last}}) {
        md << "| " << label << " | " << p->value("step", 0) << " | " << fmt(p->value("mean_reward", 0.0)) << " | "
           << fmt(p->value("mean_r_con", 0.0)) << " | " << fmt(p->value("mean_r_mel", 0.0)) << " | "
           << fmt(p->value("mean_kl", 0.0)) << " |\n";
      }
    }
    if (!curve_image.empty()) md << "\n![reward curve](" << curve_image << ")\n";
  }
  return md.str();
}

}  // namespace melodyflow
