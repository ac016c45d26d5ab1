// Dataset-level spectral diagnostics backing the analyze-spectrum command:
// per-dimension centered energy densities averaged over episodes (mean
// removed per episode, so the densities describe the AC spectrum), plus the
// share of energy in the central band.

#pragma once

#include <string>

#include "wavediff/worldkit.hpp"

namespace wavediff::analysis {

struct SpectrumSummary {
  Eigen::VectorXd frequencies;      // centered bins in [-0.5, 0.5)
  Eigen::MatrixXd mean_density;     // bins x d_s, percentages per column
  Eigen::VectorXd central_share;    // per-dimension % inside the central 20% of bins
  double mean_central_share = 0.0;  // averaged over dimensions
  int window_len = 0;
  int episodes = 0;
};

// Episodes are truncated to the shortest common length. Rejects datasets
// whose AC spectrum is identically zero in any dimension (constant states).
SpectrumSummary analyze_dataset_spectrum(const worldkit::Dataset& dataset);

void write_spectrum_csv(const SpectrumSummary& summary, const std::string& path);

}  // namespace wavediff::analysis
