#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "kdkit/train.hpp"

namespace kd {

std::string fmt_metric(double v);  // %.17g, '.' decimal point

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    void add_row(std::vector<std::string> row);
    std::string to_string() const;  // comma separated, LF endings
};

// epoch, lr, task_loss, feat_loss, val_metric
CsvTable epochs_csv(const ExperimentReport& report);

void write_text_file(const std::string& path, const std::string& content);
void write_json_file(const std::string& path, const nlohmann::json& j);

struct SvgSeries {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

// Minimal line chart: axes, ticks, one polyline per series, legend.
std::string render_svg_lines(const std::string& title, const std::string& x_label,
                             const std::string& y_label, const std::vector<SvgSeries>& series);

}  // namespace kd
