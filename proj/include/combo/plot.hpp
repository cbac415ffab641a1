#pragma once

// Static SVG charts rendered from report JSON alone.

#include <string>

#include "json.hpp"

namespace combo {

/// Accuracy-vs-layer line chart from a layer-sweep report.
std::string svg_layer_curve(const nlohmann::json& sweep);

/// One bar per backbone from an importance report's mean scores.
std::string svg_score_bars(const nlohmann::json& importance);

/// Validation accuracy per epoch from a training report.
std::string svg_train_curve(const nlohmann::json& report);

/// Dispatches on the report's "kind"; throws DataError for unknown kinds.
std::string render_svg(const nlohmann::json& report);

}  // namespace combo
