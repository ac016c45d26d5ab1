// Cross Fourier Fusion Conditioner: residual frequency-domain enhancement of
// each sub-trajectory followed by cross attention, producing the condition
// features for both diffusion models.
//
// Enhancement operates on the non-redundant one-sided spectrum (bins
// 0..floor(n/2)) and synthesizes with Hermitian symmetry, so the output is
// real by construction; self-conjugate bins contribute A*cos(P).

#pragma once

#include <random>
#include <string>

#include "wavediff/spectral.hpp"
#include "wavediff/tape.hpp"

namespace wavediff::cffc {

using Matrix = Eigen::MatrixXd;

struct CFFCConfig {
  int d_state = 0;
  int d_model = 64;  // also d_k: Q and K project to the model width
  int hidden = 512;
};

// Registers every CFFC parameter under "cffc." prefixes: separate
// amplitude/phase branches per stream (enhancer FFN output layers start at
// zero, the identity enhancement) and the Q/K/V projection FFNs.
void add_cffc_params(ad::ParameterSet& ps, const CFFCConfig& cfg, std::mt19937_64& rng);

// tau' = IDFT(A + FFN(Norm(A)), P + FFN(Norm(P))) with (A, P) = DFT(sub).
// `prefix` selects the stream parameters ("cffc.enh_low" / "cffc.enh_high").
ad::Var fourier_enhance(ad::Tape& t, const Matrix& sub, ad::ParameterSet& ps,
                        const std::string& prefix, const CFFCConfig& cfg);

struct ConditionVars {
  ad::Var con_low;      // T x d_model
  ad::Var con_high;     // T x d_model
  ad::Var pooled_low;   // 1 x d_model (row mean)
  ad::Var pooled_high;  // 1 x d_model
};

// Q from the high stream, K from the low stream, one shared attention matrix
// Softmax(QK^T / sqrt(d_k)) applied to both V projections.
ConditionVars cross_attend(ad::Tape& t, ad::Var tlow, ad::Var thigh, ad::ParameterSet& ps,
                           const CFFCConfig& cfg);

ConditionVars cffc_forward(ad::Tape& t, const spectral::SubTrajectoryPair<double>& pair,
                           ad::ParameterSet& ps, const CFFCConfig& cfg);

// Value-level condition pair for inference paths.
struct ConditionPair {
  Matrix con_low;
  Matrix con_high;
  Eigen::RowVectorXd pooled_low;
  Eigen::RowVectorXd pooled_high;
};

ConditionPair cffc_eval(const spectral::SubTrajectoryPair<double>& pair, ad::ParameterSet& ps,
                        const CFFCConfig& cfg);

}  // namespace wavediff::cffc
