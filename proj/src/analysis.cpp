#include "wavediff/analysis.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "wavediff/spectral.hpp"

namespace wavediff::analysis {

SpectrumSummary analyze_dataset_spectrum(const worldkit::Dataset& dataset) {
  if (dataset.episodes.empty()) {
    throw std::invalid_argument("analyze_spectrum: empty dataset");
  }
  Eigen::Index window = dataset.episodes.front().states.rows();
  for (const auto& ep : dataset.episodes) window = std::min(window, ep.states.rows());
  if (window < 2) throw std::invalid_argument("analyze_spectrum: episodes too short");

  const int d = dataset.env.d_s;
  SpectrumSummary out;
  out.window_len = int(window);
  out.episodes = int(dataset.episodes.size());
  out.mean_density = Eigen::MatrixXd::Zero(window, d);

  for (const auto& ep : dataset.episodes) {
    Eigen::MatrixXd states = ep.states.topRows(window);
    for (Eigen::Index c = 0; c < states.cols(); ++c) {
      if (states.col(c).maxCoeff() == states.col(c).minCoeff()) {
        throw std::invalid_argument("analyze_spectrum: all-zero AC spectrum in dimension " +
                                    std::to_string(c));
      }
    }
    states.rowwise() -= states.colwise().mean().eval();  // AC spectrum
    const auto density = spectral::energy_density<double>(states);
    out.mean_density += density.density / double(dataset.episodes.size());
    out.frequencies = density.frequencies;
  }

  // Central 20% of bins around the zero-frequency bin.
  const Eigen::Index count = std::max<Eigen::Index>(1, Eigen::Index(std::lround(0.2 * double(window))));
  const Eigen::Index center = window / 2;
  Eigen::Index lo = center - (count - 1) / 2;
  lo = std::max<Eigen::Index>(0, std::min(lo, window - count));
  out.central_share = out.mean_density.middleRows(lo, count).colwise().sum();
  out.mean_central_share = out.central_share.mean();
  return out;
}

void write_spectrum_csv(const SpectrumSummary& summary, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  const Eigen::Index d = summary.mean_density.cols();
  out << "frequency";
  for (Eigen::Index c = 0; c < d; ++c) out << ",dim" << c;
  out << "\n";
  char buf[64];
  for (Eigen::Index r = 0; r < summary.mean_density.rows(); ++r) {
    std::snprintf(buf, sizeof(buf), "%.17g", summary.frequencies(r));
    out << buf;
    for (Eigen::Index c = 0; c < d; ++c) {
      std::snprintf(buf, sizeof(buf), ",%.17g", summary.mean_density(r, c));
      out << buf;
    }
    out << "\n";
  }
  out << "central_share_pct";
  for (Eigen::Index c = 0; c < d; ++c) {
    std::snprintf(buf, sizeof(buf), ",%.17g", summary.central_share(c));
    out << buf;
  }
  out << "\n";
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace wavediff::analysis
