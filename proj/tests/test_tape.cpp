#include <doctest.h>
#include <fstream>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "wavediff/gradcheck.hpp"
#include "wavediff/tape.hpp"

using namespace wavediff;
using ad::Matrix;
using ad::Tape;
using ad::Var;

TEST_CASE("linear with identity weights is the identity") {
  std::mt19937_64 rng(1);
  const Matrix x = oracles::random_matrix(4, 3, rng);
  ad::ParameterSet ps;
  ad::Parameter& w = ps.add("w", Matrix::Identity(3, 3));
  ad::Parameter& b = ps.add("b", Matrix::Zero(1, 3));

  Tape t;
  const Var y = t.linear(t.input(x), t.leaf(w), t.leaf(b));
  CHECK((t.value(y) - x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("linear on zero input broadcasts the bias") {
  ad::ParameterSet ps;
  ad::Parameter& w = ps.add("w", Matrix::Ones(3, 2));
  Matrix bias(1, 2);
  bias << -1.5, 2.0;
  ad::Parameter& b = ps.add("b", bias);

  Tape t;
  const Var y = t.linear(t.input(Matrix::Zero(5, 3)), t.leaf(w), t.leaf(b));
  for (int r = 0; r < 5; ++r) {
    CHECK(t.value(y)(r, 0) == doctest::Approx(-1.5));
    CHECK(t.value(y)(r, 1) == doctest::Approx(2.0));
  }

  Tape t2;
  CHECK_THROWS_AS(t2.linear(t2.input(Matrix::Zero(5, 4)), t2.leaf(w), t2.leaf(b)),
                  std::invalid_argument);
}

TEST_CASE("linear gradient matches finite differences") {
  std::mt19937_64 rng(2);
  ad::ParameterSet ps;
  ps.add("w", oracles::random_matrix(3, 4, rng));
  ps.add("b", oracles::random_matrix(1, 4, rng));
  const Matrix x = oracles::random_matrix(5, 3, rng);

  const auto build = [&](Tape& t) {
    return t.sum(t.linear(t.input(x), t.leaf(ps.at("w")), t.leaf(ps.at("b"))));
  };
  const auto report = ad::grad_check(build, ps);
  CHECK(report.worst <= 1e-6);
}

TEST_CASE("layer norm collapses constant rows to the shift") {
  ad::ParameterSet ps;
  ad::Parameter& g = ps.add("g", Matrix::Ones(1, 4));
  ad::Parameter& s = ps.add("s", Matrix::Zero(1, 4));

  Tape t;
  const Var y = t.layer_norm(t.input(Matrix::Constant(2, 4, 7.0)), t.leaf(g), t.leaf(s));
  CHECK(t.value(y).cwiseAbs().maxCoeff() < 1e-9);

  Matrix row(1, 2);
  row << 1.0, -1.0;
  Tape t2;
  ad::ParameterSet ps2;
  const Var y2 = t2.layer_norm(t2.input(row), t2.leaf(ps2.add("g", Matrix::Ones(1, 2))),
                               t2.leaf(ps2.add("s", Matrix::Zero(1, 2))));
  CHECK(t2.value(y2)(0, 0) == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(t2.value(y2)(0, 1) == doctest::Approx(-1.0).epsilon(1e-4));
}

TEST_CASE("layer norm gradient matches finite differences") {
  std::mt19937_64 rng(3);
  ad::ParameterSet ps;
  ps.add("x", oracles::random_matrix(4, 6, rng));
  ps.add("g", oracles::random_matrix(1, 6, rng, 0.5, 1.5));
  ps.add("s", oracles::random_matrix(1, 6, rng));
  // Weight the output so the gradient is not the trivial all-ones pullback.
  const Matrix weights = oracles::random_matrix(4, 6, rng);

  const auto build = [&](Tape& t) {
    const Var y = t.layer_norm(t.leaf(ps.at("x")), t.leaf(ps.at("g")), t.leaf(ps.at("s")));
    return t.sum(t.hadamard(y, t.input(weights)));
  };
  CHECK(ad::grad_check(build, ps).worst <= 1e-5);
}

TEST_CASE("softmax rows: uniform on zeros, shift invariant, unit row sums") {
  Tape t;
  const Var y = t.softmax_rows(t.input(Matrix::Zero(1, 4)));
  for (int c = 0; c < 4; ++c) CHECK(t.value(y)(0, c) == doctest::Approx(0.25).epsilon(1e-12));

  std::mt19937_64 rng(4);
  const Matrix x = oracles::random_matrix(3, 5, rng);
  Tape t2;
  const Matrix a = t2.value(t2.softmax_rows(t2.input(x)));
  const Matrix b = t2.value(t2.softmax_rows(t2.input(Matrix(x.array() + 11.25))));
  CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-12);
  for (int r = 0; r < 3; ++r) CHECK(std::abs(a.row(r).sum() - 1.0) <= 1e-12);
}

TEST_CASE("softmax gradient matches finite differences") {
  std::mt19937_64 rng(5);
  ad::ParameterSet ps;
  ps.add("x", oracles::random_matrix(3, 5, rng));
  const Matrix weights = oracles::random_matrix(3, 5, rng);
  const auto build = [&](Tape& t) {
    return t.sum(t.hadamard(t.softmax_rows(t.leaf(ps.at("x"))), t.input(weights)));
  };
  CHECK(ad::grad_check(build, ps).worst <= 1e-5);
}

TEST_CASE("ffn with zero output layer maps everything to zero") {
  std::mt19937_64 rng(6);
  ad::ParameterSet ps;
  const auto ffn = ad::add_ffn(ps, "f", 8, 512, 8, rng, /*zero_output=*/true);
  Tape t;
  const Var y = ad::ffn_apply(t, t.input(oracles::random_matrix(4, 8, rng)), ffn);
  CHECK(t.value(y).cwiseAbs().maxCoeff() == 0.0);

  // Zero input with zero biases also lands on zero.
  ad::ParameterSet ps2;
  auto f2 = ad::add_ffn(ps2, "f", 8, 16, 3, rng);
  Tape t2;
  const Var y2 = ad::ffn_apply(t2, t2.input(Matrix::Zero(2, 8)), f2);
  CHECK(t2.value(y2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("ffn end-to-end gradient matches finite differences") {
  std::mt19937_64 rng(7);
  ad::ParameterSet ps;
  const auto ffn = ad::add_ffn(ps, "f", 8, 32, 5, rng);
  const Matrix x = oracles::random_matrix(4, 8, rng);
  const auto build = [&](Tape& t) { return t.sum(ad::ffn_apply(t, t.input(x), ffn)); };
  CHECK(ad::grad_check(build, ps).worst <= 1e-4);
}

TEST_CASE("adam first step moves by about lr in the gradient sign direction") {
  ad::ParameterSet ps;
  Matrix v(1, 3);
  v << 1.0, -2.0, 0.5;
  ad::Parameter& p = ps.add("p", v);
  Matrix g(1, 3);
  g << 0.3, -4.0, 1e-3;
  p.grad = g;
  ps.adam_step(2e-4);
  for (int c = 0; c < 3; ++c) {
    const double delta = ps.at("p").value(0, c) - v(0, c);
    CHECK(delta == doctest::Approx(-2e-4 * (g(0, c) > 0 ? 1.0 : -1.0)).epsilon(1e-3));
  }
  CHECK(ps.step_count() == 1);
}

TEST_CASE("adam with zero gradients is a no-op on values") {
  ad::ParameterSet ps;
  ad::Parameter& p = ps.add("p", Matrix::Ones(2, 2));
  ps.adam_step(1e-3);
  CHECK((p.value.array() == 1.0).all());
  CHECK(ps.step_count() == 1);
}

TEST_CASE("adam rejects non-finite gradients by name") {
  ad::ParameterSet ps;
  ad::Parameter& p = ps.add("theta", Matrix::Ones(1, 2));
  p.grad(0, 1) = std::numeric_limits<double>::infinity();
  try {
    ps.adam_step(1e-3);
    FAIL("expected throw");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("theta") != std::string::npos);
  }
}

TEST_CASE("adam minimizes a quadratic from w=1 at lr 2e-4") {
  ad::ParameterSet ps;
  ad::Parameter& w = ps.add("w", Matrix::Ones(1, 1));
  for (int step = 0; step < 20000; ++step) {
    w.grad(0, 0) = 2.0 * w.value(0, 0);  // d/dw of w^2
    ps.adam_step(2e-4);
  }
  CHECK(std::abs(w.value(0, 0)) <= 1e-2);
}

TEST_CASE("grad check: exact for linear, flags a corrupted backward rule") {
  std::mt19937_64 rng(8);
  ad::ParameterSet ps;
  ps.add("w", oracles::random_matrix(3, 3, rng));
  const Matrix x = oracles::random_matrix(2, 3, rng);
  const auto linear_build = [&](Tape& t) {
    return t.sum(t.matmul(t.input(x), t.leaf(ps.at("w"))));
  };
  CHECK(ad::grad_check(linear_build, ps).worst <= 1e-8);

  // Deliberately corrupted rule: forward doubles, backward claims 1.9x.
  const auto corrupted = [&](Tape& t) {
    const Var w = t.leaf(ps.at("w"));
    const Var bad = t.custom(Matrix(2.0 * t.value(w)), {w},
                             [w](Tape& tt, const Matrix& g) {
                               tt.accumulate_grad(w, Matrix(1.9 * g));
                             });
    return t.sum(bad);
  };
  CHECK(ad::grad_check(corrupted, ps).worst > 1e-2);
}

TEST_CASE("conv1d gradient matches finite differences and pads with zeros") {
  std::mt19937_64 rng(9);
  ad::ParameterSet ps;
  ps.add("w0", oracles::random_matrix(3, 4, rng));
  ps.add("w1", oracles::random_matrix(3, 4, rng));
  ps.add("w2", oracles::random_matrix(3, 4, rng));
  ps.add("b", oracles::random_matrix(1, 4, rng));
  ps.add("x", oracles::random_matrix(6, 3, rng));
  const Matrix weights = oracles::random_matrix(6, 4, rng);

  const auto build = [&](Tape& t) {
    const std::vector<Var> taps = {t.leaf(ps.at("w0")), t.leaf(ps.at("w1")),
                                   t.leaf(ps.at("w2"))};
    const Var y = t.conv1d(t.leaf(ps.at("x")), taps, t.leaf(ps.at("b")));
    return t.sum(t.hadamard(y, t.input(weights)));
  };
  CHECK(ad::grad_check(build, ps).worst <= 1e-6);

  // Center-tap-only kernel equals a plain linear map, including at the edges.
  Tape t;
  const Matrix x = oracles::random_matrix(5, 3, rng);
  const Matrix w = oracles::random_matrix(3, 2, rng);
  const std::vector<Var> taps = {t.input(Matrix::Zero(3, 2)), t.input(w),
                                 t.input(Matrix::Zero(3, 2))};
  const Var y = t.conv1d(t.input(x), taps, t.input(Matrix::Zero(1, 2)));
  CHECK((t.value(y) - x * w).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("gradient accumulates once per parameter use") {
  // f(w) = sum(x*w) + sum(w) uses w twice; d/dw = x^T * ones + ones.
  ad::ParameterSet ps;
  Matrix w(2, 2);
  w << 1, 2, 3, 4;
  ad::Parameter& pw = ps.add("w", w);
  Matrix x(3, 2);
  x << 1, 0, 0, 1, 1, 1;

  Tape t;
  const Var vw = t.leaf(pw);
  const Var root = t.add(t.sum(t.matmul(t.input(x), vw)), t.sum(vw));
  t.backward(root);
  t.flush_param_grads();

  const Matrix expected = x.transpose() * Matrix::Ones(3, 2) + Matrix::Ones(2, 2);
  CHECK((pw.grad - expected).cwiseAbs().maxCoeff() <= 1e-12);
}

#include <cstdio>
#include <filesystem>
#include "wavediff/checkpoint.hpp"

TEST_CASE("checkpoint round trip preserves every value bit and checks integrity") {
  std::mt19937_64 rng(21);
  ad::ParameterSet ps;
  ps.add("a.w", oracles::random_matrix(3, 5, rng));
  ps.add("a.b", oracles::random_matrix(1, 5, rng));
  ps.add("z", Matrix::Constant(2, 2, -0.0));

  const std::string path =
      (std::filesystem::temp_directory_path() / "wavediff_ckpt_test.bin").string();
  ad::save_checkpoint(ps, path);

  ad::ParameterSet loaded;
  loaded.add("a.w", Matrix::Zero(3, 5));
  loaded.add("a.b", Matrix::Zero(1, 5));
  loaded.add("z", Matrix::Zero(2, 2));
  ad::load_checkpoint(loaded, path);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    CHECK((loaded[i].value - ps[i].value).cwiseAbs().maxCoeff() == 0.0);
  }

  // Same values -> byte-identical file.
  const std::string path2 =
      (std::filesystem::temp_directory_path() / "wavediff_ckpt_test2.bin").string();
  ad::save_checkpoint(ps, path2);
  CHECK(ad::file_checksum_hex(path) == ad::file_checksum_hex(path2));

  // Shape/name mismatches and corruption are rejected.
  ad::ParameterSet wrong;
  wrong.add("a.w", Matrix::Zero(5, 3));
  wrong.add("a.b", Matrix::Zero(1, 5));
  wrong.add("z", Matrix::Zero(2, 2));
  CHECK_THROWS(ad::load_checkpoint(wrong, path));

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-1, std::ios::end);
    f.put('\x7f');
  }
  CHECK_THROWS(ad::load_checkpoint(loaded, path));
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("forward operations are deterministic") {
  std::mt19937_64 rng(10);
  ad::ParameterSet ps;
  const auto ffn = ad::add_ffn(ps, "f", 6, 16, 6, rng);
  const Matrix x = oracles::random_matrix(5, 6, rng);
  Tape t1, t2;
  const Matrix y1 = t1.value(ad::ffn_apply(t1, t1.input(x), ffn));
  const Matrix y2 = t2.value(ad::ffn_apply(t2, t2.input(x), ffn));
  CHECK((y1 - y2).cwiseAbs().maxCoeff() == 0.0);
}
