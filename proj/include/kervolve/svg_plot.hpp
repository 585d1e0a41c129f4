#pragma once

#include <optional>
#include <string>
#include <vector>

#include "kervolve/experiment.hpp"

namespace kervolve {

enum class PlotMetric { best_accuracy, convergence_time };

PlotMetric plot_metric_from_string(const std::string& s);
std::string to_string(PlotMetric m);

/// One model's mean +/- CI per learning rate, aligned to the shared ladder.
/// Omitted learning rates are absent (nullopt) and render as gaps, never as
/// zeros.
struct PlotSeries {
    std::string label;
    std::vector<std::optional<Interval>> points;
};

struct PlotSpec {
    PlotMetric metric = PlotMetric::best_accuracy;
    std::vector<double> lrs;          // descending, plotted on a log2 axis
    std::vector<PlotSeries> series;   // all aligned to `lrs`
};

/// Builds the plot description from aggregated summary rows.
PlotSpec plot_from_summary(const std::vector<SummaryRow>& rows, PlotMetric metric);

/// Renders mean polylines with translucent confidence bands, one color per
/// model, log2 learning-rate axis, and a legend naming each model's extreme
/// mean and interval. Pure text output; no rendering dependency.
std::string render_svg(const PlotSpec& spec);

}  // namespace kervolve
