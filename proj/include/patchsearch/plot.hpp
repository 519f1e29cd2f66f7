#pragma once

#include <filesystem>
#include <vector>

namespace patchsearch::plot {

/// Minimal raster charts written as PNG: axes plus marks, no text.
void bar_chart(const std::vector<double>& heights, const std::filesystem::path& path, int width = 480, int height = 320);
void line_chart(const std::vector<double>& xs, const std::vector<double>& ys, const std::filesystem::path& path,
                int width = 480, int height = 320);

/// Counts of `values` in `bins` equal-width bins over [min, max].
std::vector<double> histogram(const std::vector<double>& values, int bins);

}  // namespace patchsearch::plot
