#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "wavediff/cffc.hpp"
#include "wavediff/gradcheck.hpp"

using namespace wavediff;
using ad::Matrix;
using ad::Tape;
using ad::Var;

namespace {

cffc::CFFCConfig small_cfg(int d_state, int d_model = 6, int hidden = 16) {
  cffc::CFFCConfig cfg;
  cfg.d_state = d_state;
  cfg.d_model = d_model;
  cfg.hidden = hidden;
  return cfg;
}

void zero_enhancer_outputs(ad::ParameterSet& ps) {
  for (const char* stream : {"cffc.enh_low", "cffc.enh_high"}) {
    for (const char* branch : {".amp", ".phase"}) {
      ps.at(std::string(stream) + branch + ".ffn.w2").value.setZero();
      ps.at(std::string(stream) + branch + ".ffn.b2").value.setZero();
    }
  }
}

}  // namespace

TEST_CASE("fourier enhance with zeroed output layers is the identity") {
  std::mt19937_64 rng(1);
  const auto cfg = small_cfg(11, 8, 512);
  ad::ParameterSet ps;
  cffc::add_cffc_params(ps, cfg, rng);  // enhancer outputs are zero-initialized

  for (int rows : {48, 9}) {
    const Matrix sub = oracles::random_matrix(rows, 11, rng);
    Tape t;
    const Var out = cffc::fourier_enhance(t, sub, ps, "cffc.enh_low", cfg);
    REQUIRE(t.value(out).rows() == rows);
    REQUIRE(t.value(out).cols() == 11);
    CHECK((t.value(out) - sub).cwiseAbs().maxCoeff() <= 1e-9);
  }
}

TEST_CASE("fourier enhance preserves shape with live weights and stays finite") {
  std::mt19937_64 rng(2);
  const auto cfg = small_cfg(11, 8, 32);
  ad::ParameterSet ps;
  cffc::add_cffc_params(ps, cfg, rng);
  // Wake the residual branches up.
  ps.at("cffc.enh_low.amp.ffn.w2").value = ad::he_init(32, 11, rng);
  ps.at("cffc.enh_low.phase.ffn.w2").value = ad::he_init(32, 11, rng);

  const Matrix sub = oracles::random_matrix(48, 11, rng);
  Tape t;
  const Var out = cffc::fourier_enhance(t, sub, ps, "cffc.enh_low", cfg);
  CHECK(t.value(out).rows() == 48);
  CHECK(t.value(out).cols() == 11);
  CHECK(t.value(out).allFinite());
  CHECK((t.value(out) - sub).cwiseAbs().maxCoeff() > 1e-6);  // not trivially identity
}

TEST_CASE("fourier enhance gradient matches finite differences through DFT/IDFT") {
  std::mt19937_64 rng(3);
  const auto cfg = small_cfg(3, 4, 8);
  ad::ParameterSet ps;
  cffc::add_cffc_params(ps, cfg, rng);
  ps.at("cffc.enh_low.amp.ffn.w2").value = 0.3 * ad::he_init(8, 3, rng);
  ps.at("cffc.enh_low.phase.ffn.w2").value = 0.3 * ad::he_init(8, 3, rng);

  const Matrix sub = oracles::random_matrix(8, 3, rng);
  const Matrix weights = oracles::random_matrix(8, 3, rng);
  const auto build = [&](Tape& t) {
    const Var out = cffc::fourier_enhance(t, sub, ps, "cffc.enh_low", cfg);
    return t.sum(t.hadamard(out, t.input(weights)));
  };
  CHECK(ad::grad_check(build, ps).worst <= 1e-4);
}

TEST_CASE("cross attend with zero Q gives uniform attention rows") {
  std::mt19937_64 rng(4);
  const auto cfg = small_cfg(3, 5, 8);
  ad::ParameterSet ps;
  cffc::add_cffc_params(ps, cfg, rng);
  ps.at("cffc.attn.q.w1").value.setZero();
  ps.at("cffc.attn.q.b1").value.setZero();
  ps.at("cffc.attn.q.w2").value.setZero();
  ps.at("cffc.attn.q.b2").value.setZero();

  const Matrix tlow = oracles::random_matrix(6, 3, rng);
  const Matrix thigh = oracles::random_matrix(6, 3, rng);
  Tape t;
  const auto cv = cffc::cross_attend(t, t.input(tlow), t.input(thigh), ps, cfg);

  // Uniform attention averages the value rows; every output row is the
  // column mean of V_low.
  Tape tv;
  const Matrix v_low = tv.value(ad::ffn_apply(tv, tv.input(tlow), ad::ffn_handles(ps, "cffc.attn.v_low")));
  const Eigen::RowVectorXd col_mean = v_low.colwise().mean();
  for (int r = 0; r < 6; ++r) {
    CHECK((t.value(cv.con_low).row(r) - col_mean).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("cross attend on single-row inputs copies the value row") {
  std::mt19937_64 rng(5);
  const auto cfg = small_cfg(4, 5, 8);
  ad::ParameterSet ps;
  cffc::add_cffc_params(ps, cfg, rng);

  const Matrix tlow = oracles::random_matrix(1, 4, rng);
  const Matrix thigh = oracles::random_matrix(1, 4, rng);
  Tape t;
  const auto cv = cffc::cross_attend(t, t.input(tlow), t.input(thigh), ps, cfg);
  Tape tv;
  const Matrix v_low = tv.value(ad::ffn_apply(tv, tv.input(tlow), ad::ffn_handles(ps, "cffc.attn.v_low")));
  CHECK((t.value(cv.con_low) - v_low).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((t.value(cv.pooled_low) - v_low).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("attention rows sum to one and joint key/value permutation fixes con_low") {
  std::mt19937_64 rng(6);
  const auto cfg = small_cfg(3, 6, 12);
  ad::ParameterSet ps;
  cffc::add_cffc_params(ps, cfg, rng);

  const Matrix tlow = oracles::random_matrix(7, 3, rng);
  const Matrix thigh = oracles::random_matrix(7, 3, rng);

  Tape t;
  const auto cv = cffc::cross_attend(t, t.input(tlow), t.input(thigh), ps, cfg);
  const Matrix base_low = t.value(cv.con_low);

  // Permute the low stream: keys and V_low move together, so con_low is
  // unchanged (classic attention invariance).
  std::vector<int> perm = {3, 0, 6, 1, 5, 2, 4};
  Matrix tlow_p(7, 3);
  for (int r = 0; r < 7; ++r) tlow_p.row(r) = tlow.row(perm[r]);
  Tape t2;
  const auto cv2 = cffc::cross_attend(t2, t2.input(tlow_p), t2.input(thigh), ps, cfg);
  CHECK((t2.value(cv2.con_low) - base_low).cwiseAbs().maxCoeff() <= 1e-10);

  // With uniform attention (zero Q) con_high is permutation-invariant too.
  ps.at("cffc.attn.q.w2").value.setZero();
  ps.at("cffc.attn.q.b2").value.setZero();
  Tape t3, t4;
  const auto cv3 = cffc::cross_attend(t3, t3.input(tlow), t3.input(thigh), ps, cfg);
  const auto cv4 = cffc::cross_attend(t4, t4.input(tlow_p), t4.input(thigh), ps, cfg);
  CHECK((t3.value(cv3.con_high) - t4.value(cv4.con_high)).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("cffc forward composition: zeroed nets reduce to uniform attention on raw pair") {
  std::mt19937_64 rng(7);
  const auto cfg = small_cfg(3, 5, 8);
  ad::ParameterSet ps;
  cffc::add_cffc_params(ps, cfg, rng);
  zero_enhancer_outputs(ps);
  for (const char* suffix : {".w1", ".b1", ".w2", ".b2"}) {
    ps.at(std::string("cffc.attn.q") + suffix).value.setZero();
  }

  spectral::SubTrajectoryPair<double> pair;
  pair.low = oracles::random_matrix(6, 3, rng);
  pair.high = oracles::random_matrix(6, 3, rng);
  pair.source_len = 12;

  const auto cp = cffc::cffc_eval(pair, ps, cfg);
  Tape tv;
  const Matrix v_low = tv.value(ad::ffn_apply(tv, tv.input(pair.low), ad::ffn_handles(ps, "cffc.attn.v_low")));
  const Matrix v_high = tv.value(ad::ffn_apply(tv, tv.input(pair.high), ad::ffn_handles(ps, "cffc.attn.v_high")));
  CHECK((cp.pooled_low.transpose() - v_low.colwise().mean().transpose()).cwiseAbs().maxCoeff() <= 1e-10);
  CHECK((cp.pooled_high.transpose() - v_high.colwise().mean().transpose()).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("cffc forward is deterministic and shape-stable") {
  std::mt19937_64 rng(8);
  const auto cfg = small_cfg(4, 6, 16);
  ad::ParameterSet ps;
  cffc::add_cffc_params(ps, cfg, rng);

  spectral::SubTrajectoryPair<double> pair;
  pair.low = oracles::random_matrix(10, 4, rng);
  pair.high = oracles::random_matrix(10, 4, rng);
  pair.source_len = 20;

  const auto a = cffc::cffc_eval(pair, ps, cfg);
  const auto b = cffc::cffc_eval(pair, ps, cfg);
  CHECK((a.con_low - b.con_low).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a.con_high - b.con_high).cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.con_low.rows() == 10);
  CHECK(a.con_low.cols() == 6);
  CHECK(a.pooled_high.size() == 6);

  // Pooled vectors are the row means of their sequences.
  CHECK((a.pooled_low - Eigen::RowVectorXd(a.con_low.colwise().mean())).cwiseAbs().maxCoeff() <= 1e-12);

  pair.high = oracles::random_matrix(9, 4, rng);
  CHECK_THROWS_AS(cffc::cffc_eval(pair, ps, cfg), std::invalid_argument);
}

TEST_CASE("cffc end-to-end gradient matches finite differences for every parameter") {
  std::mt19937_64 rng(9);
  const auto cfg = small_cfg(2, 3, 6);
  ad::ParameterSet ps;
  cffc::add_cffc_params(ps, cfg, rng);
  // Nonzero enhancer outputs so the whole graph is exercised.
  ps.at("cffc.enh_low.amp.ffn.w2").value = 0.3 * ad::he_init(6, 2, rng);
  ps.at("cffc.enh_low.phase.ffn.w2").value = 0.3 * ad::he_init(6, 2, rng);
  ps.at("cffc.enh_high.amp.ffn.w2").value = 0.3 * ad::he_init(6, 2, rng);
  ps.at("cffc.enh_high.phase.ffn.w2").value = 0.3 * ad::he_init(6, 2, rng);

  spectral::SubTrajectoryPair<double> pair;
  pair.low = oracles::random_matrix(6, 2, rng);
  pair.high = oracles::random_matrix(6, 2, rng);
  pair.source_len = 12;

  const Matrix wl = oracles::random_matrix(1, 3, rng);
  const Matrix wh = oracles::random_matrix(1, 3, rng);
  const auto build = [&](Tape& t) {
    const auto cv = cffc::cffc_forward(t, pair, ps, cfg);
    return t.add(t.sum(t.hadamard(cv.pooled_low, t.input(wl))),
                 t.sum(t.hadamard(cv.pooled_high, t.input(wh))));
  };
  const auto report = ad::grad_check(build, ps);
  CHECK(report.worst <= 1e-4);

  // Every parameter block participates: perturbing any block changes the loss.
  for (const auto& entry : report.entries) {
    CAPTURE(entry.name);
    // Bias-of-hidden-layer entries can be dead under ReLU; check weights only.
    if (entry.name.find(".w") != std::string::npos) {
      ad::Parameter& p = ps.at(entry.name);
      const double base = [&] {
        Tape t;
        return t.value(build(t))(0, 0);
      }();
      p.value(0, 0) += 0.05;
      const double bumped = [&] {
        Tape t;
        return t.value(build(t))(0, 0);
      }();
      p.value(0, 0) -= 0.05;
      CHECK(std::abs(bumped - base) > 0.0);
    }
  }
}
