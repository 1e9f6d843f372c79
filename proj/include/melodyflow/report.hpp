#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace melodyflow {

/// Metric columns shown per clip, in table order.
const std::vector<std::string>& report_metrics();

/// Means of each metric over eval["clips"]; ParseError when the document is
/// not an evaluation output.
std::map<std::string, double> recompute_aggregates(const nlohmann::json& eval);

/// Parses JSON-lines text; blank lines are skipped.
std::vector<nlohmann::json> parse_json_lines(const std::string& text);

/// Polyline plot of mean_reward, mean_r_con and mean_r_mel against step.
std::string render_curve_svg(const std::vector<nlohmann::json>& curve);

/// Markdown summary. With `before`, aggregates gain before and delta
/// (after - before) columns. `curve_image` is linked when non-empty.
std::string render_report(const nlohmann::json& eval, const nlohmann::json* before = nullptr,
                          const std::vector<nlohmann::json>* curve = nullptr, const std::string& curve_image = "");

}  // namespace melodyflow
