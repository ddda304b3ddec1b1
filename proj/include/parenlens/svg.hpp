#pragma once

#include <string>

#include "parenlens/report.hpp"

namespace parenlens {

// Plots are views of a CSV table: every number drawn is read back from the
// table's text, and nothing else is consulted.

/// One polyline per distinct `series_col` value; x positions are the distinct
/// `x_col` labels in first-appearance order, y is `y_col`.
std::string render_line_chart(const CsvTable& table, const std::string& series_col, const std::string& x_col,
                              const std::string& y_col, const std::string& title);

/// Grid of `value_col` indexed by integer `row_col` × `col_col`, diverging
/// blue (positive) / red (negative) scale centred at zero.
std::string render_heatmap(const CsvTable& table, const std::string& row_col, const std::string& col_col,
                           const std::string& value_col, const std::string& title);

/// Attention matrix from a table with query_pos, key_pos, weight,
/// query_token, key_token. Axis labels carry each token's exact text in a
/// data-token attribute.
std::string render_attention(const CsvTable& table, const std::string& title);

std::string xml_escape(const std::string& s);

}  // namespace parenlens
