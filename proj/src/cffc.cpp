#include "wavediff/cffc.hpp"

#include <cmath>
#include <stdexcept>

namespace wavediff::cffc {

namespace {

void add_enhancer_branch(ad::ParameterSet& ps, const std::string& prefix, int d, int hidden,
                         std::mt19937_64& rng) {
  ps.add(prefix + ".norm.gain", Matrix::Ones(1, d));
  ps.add(prefix + ".norm.shift", Matrix::Zero(1, d));
  ad::add_ffn(ps, prefix + ".ffn", d, hidden, d, rng, /*zero_output=*/true);
}

ad::Var enhance_branch(ad::Tape& t, const Matrix& spectrum_rows, ad::ParameterSet& ps,
                       const std::string& prefix) {
  const ad::Var raw = t.input(spectrum_rows);
  const ad::Var normed = t.layer_norm(raw, t.leaf(ps.at(prefix + ".norm.gain")),
                                      t.leaf(ps.at(prefix + ".norm.shift")));
  const ad::Var update = ad::ffn_apply(t, normed, ad::ffn_handles(ps, prefix + ".ffn"));
  return t.add(raw, update);
}

}  // namespace

void add_cffc_params(ad::ParameterSet& ps, const CFFCConfig& cfg, std::mt19937_64& rng) {
  for (const char* stream : {"cffc.enh_low", "cffc.enh_high"}) {
    add_enhancer_branch(ps, std::string(stream) + ".amp", cfg.d_state, cfg.hidden, rng);
    add_enhancer_branch(ps, std::string(stream) + ".phase", cfg.d_state, cfg.hidden, rng);
  }
  ad::add_ffn(ps, "cffc.attn.q", cfg.d_state, cfg.hidden, cfg.d_model, rng);
  ad::add_ffn(ps, "cffc.attn.k", cfg.d_state, cfg.hidden, cfg.d_model, rng);
  ad::add_ffn(ps, "cffc.attn.v_low", cfg.d_state, cfg.hidden, cfg.d_model, rng);
  ad::add_ffn(ps, "cffc.attn.v_high", cfg.d_state, cfg.hidden, cfg.d_model, rng);
}

ad::Var fourier_enhance(ad::Tape& t, const Matrix& sub, ad::ParameterSet& ps,
                        const std::string& prefix, const CFFCConfig& cfg) {
  const Eigen::Index n = sub.rows();
  if (n < 2) {
    throw std::invalid_argument("fourier_enhance: need at least 2 rows");
  }
  if (sub.cols() != cfg.d_state) {
    throw std::invalid_argument("fourier_enhance: feature width " +
                                std::to_string(sub.cols()) + " != configured " +
                                std::to_string(cfg.d_state));
  }
  const auto frame = spectral::dft<double>(sub);
  const Eigen::Index bins = n / 2 + 1;  // non-redundant one-sided bins

  const ad::Var amp = enhance_branch(t, frame.amplitude.topRows(bins), ps, prefix + ".amp");
  const ad::Var phase =
      enhance_branch(t, frame.phase.topRows(bins), ps, prefix + ".phase");

  // Hermitian synthesis: x_i = sum_k (c_k/n) A_k cos(P_k + 2 pi k i / n),
  // c_k = 2 for mirrored bins and 1 for self-conjugate ones. Split via
  // cos(P + w i) = cos P cos w i - sin P sin w i into two constant matmuls.
  Matrix cmat(n, bins), smat(n, bins);
  for (Eigen::Index k = 0; k < bins; ++k) {
    const bool self_conj = (k == 0) || (n % 2 == 0 && k == n / 2);
    const double c = (self_conj ? 1.0 : 2.0) / double(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double w = 2.0 * EIGEN_PI * double(k) * double(i) / double(n);
      cmat(i, k) = c * std::cos(w);
      smat(i, k) = c * std::sin(w);
    }
  }
  const ad::Var cos_part = t.lmul_const(cmat, t.hadamard(amp, t.cwise_cos(phase)));
  const ad::Var sin_part = t.lmul_const(smat, t.hadamard(amp, t.cwise_sin(phase)));
  return t.sub(cos_part, sin_part);
}

ConditionVars cross_attend(ad::Tape& t, ad::Var tlow, ad::Var thigh, ad::ParameterSet& ps,
                           const CFFCConfig& cfg) {
  if (t.value(tlow).rows() != t.value(thigh).rows() ||
      t.value(tlow).cols() != t.value(thigh).cols()) {
    throw std::invalid_argument("cross_attend: sub-trajectory shape mismatch");
  }
  const ad::Var q = ad::ffn_apply(t, thigh, ad::ffn_handles(ps, "cffc.attn.q"));
  const ad::Var k = ad::ffn_apply(t, tlow, ad::ffn_handles(ps, "cffc.attn.k"));
  const ad::Var v_low = ad::ffn_apply(t, tlow, ad::ffn_handles(ps, "cffc.attn.v_low"));
  const ad::Var v_high = ad::ffn_apply(t, thigh, ad::ffn_handles(ps, "cffc.attn.v_high"));

  const ad::Var logits =
      t.scale(t.matmul(q, t.transpose(k)), 1.0 / std::sqrt(double(cfg.d_model)));
  const ad::Var attn = t.softmax_rows(logits);

  ConditionVars out;
  out.con_low = t.matmul(attn, v_low);
  out.con_high = t.matmul(attn, v_high);
  out.pooled_low = t.row_mean(out.con_low);
  out.pooled_high = t.row_mean(out.con_high);
  return out;
}

ConditionVars cffc_forward(ad::Tape& t, const spectral::SubTrajectoryPair<double>& pair,
                           ad::ParameterSet& ps, const CFFCConfig& cfg) {
  if (pair.low.rows() != pair.high.rows() || pair.low.cols() != pair.high.cols()) {
    throw std::invalid_argument("cffc_forward: malformed sub-trajectory pair");
  }
  const ad::Var elow = fourier_enhance(t, pair.low, ps, "cffc.enh_low", cfg);
  const ad::Var ehigh = fourier_enhance(t, pair.high, ps, "cffc.enh_high", cfg);
  return cross_attend(t, elow, ehigh, ps, cfg);
}

ConditionPair cffc_eval(const spectral::SubTrajectoryPair<double>& pair, ad::ParameterSet& ps,
                        const CFFCConfig& cfg) {
  ad::Tape t;
  const ConditionVars vars = cffc_forward(t, pair, ps, cfg);
  ConditionPair out;
  out.con_low = t.value(vars.con_low);
  out.con_high = t.value(vars.con_high);
  out.pooled_low = t.value(vars.pooled_low).row(0);
  out.pooled_high = t.value(vars.pooled_high).row(0);
  return out;
}

}  // namespace wavediff::cffc
