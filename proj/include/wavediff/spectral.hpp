// Wavelet analysis/synthesis of state trajectories and Fourier diagnostics.
//
// A trajectory is a dense T x d matrix: rows are time steps, columns are
// state dimensions. One-level orthonormal DWT splits it into half-length
// low/high sub-trajectories; the plain (unnormalized-forward) DFT provides
// amplitude/phase frames, energy densities and band-power reports.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>

namespace wavediff::spectral {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

enum class WaveletKind { Haar, Daubechies2 };

inline const char* wavelet_name(WaveletKind k) {
  return k == WaveletKind::Haar ? "haar" : "daubechies2";
}

// Orthonormal analysis filter pair. The synthesis operator is the transpose
// of the (periodic) analysis operator, so perfect reconstruction is exact.
template <typename Scalar>
struct WaveletFilterPair {
  WaveletKind kind;
  Vector<Scalar> low_pass;
  Vector<Scalar> high_pass;

  static WaveletFilterPair haar() {
    const Scalar r = Scalar(1) / std::sqrt(Scalar(2));
    WaveletFilterPair f;
    f.kind = WaveletKind::Haar;
    f.low_pass.resize(2);
    f.low_pass << r, r;
    f.high_pass.resize(2);
    f.high_pass << r, -r;
    return f;
  }

  static WaveletFilterPair daubechies2() {
    const Scalar s3 = std::sqrt(Scalar(3));
    const Scalar n = Scalar(4) * std::sqrt(Scalar(2));
    WaveletFilterPair f;
    f.kind = WaveletKind::Daubechies2;
    f.low_pass.resize(4);
    f.low_pass << (1 + s3) / n, (3 + s3) / n, (3 - s3) / n, (1 - s3) / n;
    // Quadrature mirror: g[m] = (-1)^m h[taps-1-m].
    f.high_pass.resize(4);
    f.high_pass << f.low_pass(3), -f.low_pass(2), f.low_pass(1), -f.low_pass(0);
    return f;
  }

  static WaveletFilterPair make(WaveletKind k) {
    return k == WaveletKind::Haar ? haar() : daubechies2();
  }
};

template <typename Scalar>
struct SubTrajectoryPair {
  Matrix<Scalar> low;   // T/2 x d
  Matrix<Scalar> high;  // T/2 x d
  Eigen::Index source_len = 0;
};

// Polar DFT frame: amplitude >= 0, phase in (-pi, pi].
template <typename Scalar>
struct SpectrumFrame {
  Matrix<Scalar> amplitude;
  Matrix<Scalar> phase;
  Eigen::Index n = 0;
};

template <typename Scalar>
struct EnergyDensity {
  Vector<Scalar> frequencies;  // centered bins in [-0.5, 0.5)
  Matrix<Scalar> density;      // n x d, percentages summing to 100 per column
};

template <typename Scalar>
struct LossSpectrumReport {
  Matrix<Scalar> one_sided_power;  // (floor(n/2)+1) x d
  Scalar low_band_power = 0;
  Scalar high_band_power = 0;
  Scalar ratio = 0;  // low/high; +inf when the high band is exactly empty
};

namespace detail {

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const char* what) {
  if (!m.allFinite()) {
    throw std::invalid_argument(std::string(what) + ": non-finite entries");
  }
}

}  // namespace detail

// One-level analysis: low_k = sum_m low_pass[m] * seq[(2k+m) mod T], per
// column, and analogously for high_k. Haar never wraps; Daubechies2 uses
// periodic boundary extension.
template <typename Scalar>
SubTrajectoryPair<Scalar> dwt(const Matrix<Scalar>& seq,
                              const WaveletFilterPair<Scalar>& filter) {
  const Eigen::Index t = seq.rows();
  const Eigen::Index taps = filter.low_pass.size();
  if (t < 2 || t % 2 != 0) {
    throw std::invalid_argument("dwt: sequence length must be even and >= 2, got " +
                                std::to_string(t));
  }
  if (filter.kind == WaveletKind::Daubechies2 && t < 4) {
    throw std::invalid_argument("dwt: daubechies2 needs length >= 4");
  }
  detail::require_finite(seq, "dwt");

  SubTrajectoryPair<Scalar> out;
  out.source_len = t;
  out.low.setZero(t / 2, seq.cols());
  out.high.setZero(t / 2, seq.cols());
  for (Eigen::Index k = 0; k < t / 2; ++k) {
    for (Eigen::Index m = 0; m < taps; ++m) {
      const Eigen::Index src = (2 * k + m) % t;
      out.low.row(k) += filter.low_pass(m) * seq.row(src);
      out.high.row(k) += filter.high_pass(m) * seq.row(src);
    }
  }
  return out;
}

// Synthesis = transpose of the periodic analysis operator.
template <typename Scalar>
Matrix<Scalar> idwt(const SubTrajectoryPair<Scalar>& pair,
                    const WaveletFilterPair<Scalar>& filter) {
  if (pair.low.rows() != pair.high.rows() || pair.low.cols() != pair.high.cols()) {
    throw std::invalid_argument("idwt: low/high shape mismatch");
  }
  const Eigen::Index half = pair.low.rows();
  const Eigen::Index t = 2 * half;
  const Eigen::Index taps = filter.low_pass.size();

  Matrix<Scalar> out = Matrix<Scalar>::Zero(t, pair.low.cols());
  for (Eigen::Index k = 0; k < half; ++k) {
    for (Eigen::Index m = 0; m < taps; ++m) {
      const Eigen::Index dst = (2 * k + m) % t;
      out.row(dst) += filter.low_pass(m) * pair.low.row(k) +
                      filter.high_pass(m) * pair.high.row(k);
    }
  }
  return out;
}

// Unnormalized forward transform F(k) = sum_i s_i exp(-j 2 pi k i / n), per
// column, returned in polar form. Phase at near-zero amplitude is defined 0.
template <typename Scalar>
SpectrumFrame<Scalar> dft(const Matrix<Scalar>& seq) {
  const Eigen::Index n = seq.rows();
  if (n < 1) {
    throw std::invalid_argument("dft: empty sequence");
  }
  detail::require_finite(seq, "dft");

  SpectrumFrame<Scalar> frame;
  frame.n = n;
  frame.amplitude.resize(n, seq.cols());
  frame.phase.resize(n, seq.cols());
  const Scalar two_pi = Scalar(2) * Scalar(EIGEN_PI);
  for (Eigen::Index c = 0; c < seq.cols(); ++c) {
    for (Eigen::Index k = 0; k < n; ++k) {
      std::complex<Scalar> acc(0, 0);
      for (Eigen::Index i = 0; i < n; ++i) {
        const Scalar ang = -two_pi * Scalar(k) * Scalar(i) / Scalar(n);
        acc += seq(i, c) * std::complex<Scalar>(std::cos(ang), std::sin(ang));
      }
      const Scalar amp = std::abs(acc);
      frame.amplitude(k, c) = amp;
      Scalar ph = amp < Scalar(1e-12) ? Scalar(0) : std::atan2(acc.imag(), acc.real());
      if (ph <= -Scalar(EIGEN_PI)) {
        ph += two_pi;  // keep phase in (-pi, pi]
      }
      frame.phase(k, c) = ph;
    }
  }
  return frame;
}

// Inverse with 1/n prefactor. The frame must describe a real signal; an
// imaginary residue above `reject_tol` is rejected, smaller residue is
// discarded.
template <typename Scalar>
Matrix<Scalar> idft(const SpectrumFrame<Scalar>& frame, Scalar reject_tol = Scalar(1e-6)) {
  const Eigen::Index n = frame.amplitude.rows();
  if (n < 1 || frame.phase.rows() != n || frame.phase.cols() != frame.amplitude.cols()) {
    throw std::invalid_argument("idft: malformed frame");
  }
  const Scalar two_pi = Scalar(2) * Scalar(EIGEN_PI);
  Matrix<Scalar> out(n, frame.amplitude.cols());
  Scalar max_imag = 0;
  for (Eigen::Index c = 0; c < frame.amplitude.cols(); ++c) {
    for (Eigen::Index i = 0; i < n; ++i) {
      std::complex<Scalar> acc(0, 0);
      for (Eigen::Index k = 0; k < n; ++k) {
        const Scalar ang = frame.phase(k, c) + two_pi * Scalar(k) * Scalar(i) / Scalar(n);
        acc += frame.amplitude(k, c) * std::complex<Scalar>(std::cos(ang), std::sin(ang));
      }
      acc /= Scalar(n);
      out(i, c) = acc.real();
      max_imag = std::max(max_imag, std::abs(acc.imag()));
    }
  }
  if (max_imag > reject_tol) {
    throw std::invalid_argument("idft: non-symmetric spectrum, imaginary residue " +
                                std::to_string(max_imag));
  }
  return out;
}

// Centered squared-amplitude spectrum normalized to percentages per column.
// Bin j holds unshifted frequency index (j + ceil(n/2)) mod n, so the zero
// mode sits at the middle bin and frequencies span [-0.5, 0.5).
template <typename Scalar>
EnergyDensity<Scalar> energy_density(const Matrix<Scalar>& seq) {
  const Eigen::Index n = seq.rows();
  if (n < 2) {
    throw std::invalid_argument("energy_density: need at least 2 samples");
  }
  const SpectrumFrame<Scalar> frame = dft(seq);
  const Matrix<Scalar> power = frame.amplitude.array().square();

  EnergyDensity<Scalar> out;
  out.frequencies.resize(n);
  out.density.resize(n, seq.cols());
  const Eigen::Index shift = n - n / 2;  // == ceil(n/2)
  for (Eigen::Index c = 0; c < seq.cols(); ++c) {
    const Scalar total = power.col(c).sum();
    if (total <= Scalar(0)) {
      throw std::invalid_argument("energy_density: all-zero spectrum in dimension " +
                                  std::to_string(c));
    }
    for (Eigen::Index j = 0; j < n; ++j) {
      const Eigen::Index k = (j + shift) % n;
      out.density(j, c) = Scalar(100) * power(k, c) / total;
    }
  }
  for (Eigen::Index j = 0; j < n; ++j) {
    out.frequencies(j) = (Scalar(j) - Scalar(n / 2)) / Scalar(n);
  }
  return out;
}

// Band powers over the one-sided spectrum, summed across dimensions: the
// first `band_width` bins are the low band, the last `band_width` the high
// band, ratio = low/high.
template <typename Scalar>
LossSpectrumReport<Scalar> loss_spectrum(const Matrix<Scalar>& residuals,
                                         Eigen::Index band_width = 10) {
  const Eigen::Index n = residuals.rows();
  const Eigen::Index one_sided = n / 2 + 1;
  if (band_width < 1 || one_sided < 2 * band_width) {
    throw std::invalid_argument("loss_spectrum: one-sided length " +
                                std::to_string(one_sided) + " too short for band width " +
                                std::to_string(band_width));
  }
  const SpectrumFrame<Scalar> frame = dft(residuals);

  LossSpectrumReport<Scalar> rep;
  rep.one_sided_power = frame.amplitude.topRows(one_sided).array().square();
  rep.low_band_power = rep.one_sided_power.topRows(band_width).sum();
  rep.high_band_power = rep.one_sided_power.bottomRows(band_width).sum();
  rep.ratio = rep.high_band_power > Scalar(0)
                  ? rep.low_band_power / rep.high_band_power
                  : std::numeric_limits<Scalar>::infinity();
  return rep;
}

}  // namespace wavediff::spectral
