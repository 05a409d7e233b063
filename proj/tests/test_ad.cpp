#include "doctest.h"

#include "quadfit/ad.hpp"
#include "quadfit/dual.hpp"

#include <cmath>

using namespace quadfit;
using ad::Tape;
using ad::Var;

namespace {

Mat random_mat(Rng& rng, int r, int c, double lo = -1.0, double hi = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

}  // namespace

TEST_CASE("exp at zero") {
  Tape t;
  Var x = t.variable(Mat::Zero(1, 1));
  Var y = ad::exp(x);
  CHECK(y.item() == 1.0);
  t.backward(y);
  CHECK(t.grad(x)(0, 0) == 1.0);
}

TEST_CASE("matmul gradient of the sum is the transposed partner") {
  Rng rng(3);
  const Mat A = random_mat(rng, 2, 3);
  const Mat B = random_mat(rng, 3, 1);
  Tape t;
  Var a = t.variable(A);
  Var b = t.variable(B);
  Var y = ad::sum(ad::matmul(a, b));
  CHECK(ad::matmul(a, b).rows() == 2);
  t.backward(y);
  // d/dA sum(AB) = 1 B^T, d/dB = A^T 1
  const Mat gA = Mat::Ones(2, 1) * B.transpose();
  const Mat gB = A.transpose() * Mat::Ones(2, 1);
  CHECK((t.grad(a) - gA).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((t.grad(b) - gB).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("inactive hinge") {
  Tape t;
  Var x = t.variable(Mat::Constant(1, 1, -1.0));
  Var y = ad::relu(x);
  CHECK(y.item() == 0.0);
  t.backward(y);
  CHECK(t.grad(x)(0, 0) == 0.0);
}

TEST_CASE("backward examples") {
  {
    Tape t;
    Var x = t.variable(Mat::Constant(1, 1, 3.0));
    Var y = x * x;
    t.backward(y);
    CHECK(t.grad(x)(0, 0) == 6.0);
  }
  {
    Tape t;
    Var x = t.variable(Mat::Constant(1, 1, 2.0));
    Var y = t.variable(Mat::Constant(1, 1, 5.0));
    Var f = x * y + x;
    t.backward(f);
    CHECK(t.grad(x)(0, 0) == 6.0);
    CHECK(t.grad(y)(0, 0) == 2.0);
  }
  {
    // diamond: f = g(x) + g(x), g = sin-free smooth map x -> x^3
    Tape t;
    Var x = t.variable(Mat::Constant(1, 1, 1.5));
    Var g = ad::pow(x, 3.0);
    Var f = g + g;
    t.backward(f);
    CHECK(t.grad(x)(0, 0) == doctest::Approx(6.0 * 1.5 * 1.5).epsilon(1e-14));
  }
}

TEST_CASE("off-path leaves get zero and non-scalar outputs are rejected") {
  Tape t;
  Var x = t.variable(Mat::Ones(2, 2));
  Var unused = t.variable(Mat::Ones(3, 1));
  t.backward(ad::sum(x));
  CHECK(t.grad(unused).isZero(0.0));
  CHECK_THROWS_AS(t.backward(x), Error);
}

TEST_CASE("shape and domain errors") {
  Tape t;
  Var a = t.variable(Mat::Ones(2, 3));
  Var b = t.variable(Mat::Ones(3, 2));
  CHECK_THROWS_AS(a + b, Error);
  CHECK_THROWS_AS(ad::matmul(a, a), Error);
  CHECK_THROWS_AS(ad::log(t.constant(Mat::Zero(1, 1))), Error);
  CHECK_THROWS_AS(a / t.constant(Mat::Zero(1, 1)), Error);
}

TEST_CASE("every primitive matches central differences at random points") {
  Rng rng(11);
  struct Case {
    const char* name;
    ad::VarFunction f;
    double lo, hi;
  };
  const Mat W = random_mat(rng, 3, 4);
  const std::vector<Case> cases = {
      {"add", [](Tape& t, const Var& x) { return ad::sum(ad::square(x + t.constant(Mat::Ones(1, 4)))); }, -1, 1},
      {"sub", [](Tape&, const Var& x) { return ad::sum(ad::square(x - x * 0.3)); }, -1, 1},
      {"mul", [](Tape&, const Var& x) { return ad::sum(x * ad::tanh(x)); }, -1, 1},
      {"div", [](Tape&, const Var& x) { return ad::sum(ad::square(x) / (ad::square(x) + 1.0)); }, -1, 1},
      {"matmul", [W](Tape& t, const Var& x) { return ad::sum(ad::tanh(ad::matmul(t.constant(W), ad::transpose(x)))); }, -1, 1},
      {"exp", [](Tape&, const Var& x) { return ad::sum(ad::exp(x)); }, -1, 1},
      {"log", [](Tape&, const Var& x) { return ad::sum(ad::log(x)); }, 0.5, 2},
      {"tanh", [](Tape&, const Var& x) { return ad::sum(ad::tanh(x)); }, -2, 2},
      {"sigmoid", [](Tape&, const Var& x) { return ad::sum(ad::sigmoid(x)); }, -3, 3},
      {"relu", [](Tape&, const Var& x) { return ad::sum(ad::square(ad::relu(x))); }, 0.1, 1},
      {"softplus", [](Tape&, const Var& x) { return ad::sum(ad::softplus(x)); }, -3, 3},
      {"pow", [](Tape&, const Var& x) { return ad::sum(ad::pow(x, 2.5)); }, 0.5, 2},
      {"sqrt", [](Tape&, const Var& x) { return ad::sum(ad::sqrt(x)); }, 0.5, 2},
      {"sum_mean", [](Tape&, const Var& x) { return ad::mean(ad::square(x)) + ad::sum(x); }, -1, 1},
      {"sum_rows", [](Tape&, const Var& x) { return ad::sum(ad::square(ad::sum_rows(ad::reshape(x, 2, 2)))); }, -1, 1},
      {"sum_cols", [](Tape&, const Var& x) { return ad::sum(ad::square(ad::sum_cols(ad::reshape(x, 2, 2)))); }, -1, 1},
      {"concat", [](Tape&, const Var& x) { return ad::sum(ad::square(ad::concat_rows({x, x * 2.0}))); }, -1, 1},
      {"concat_cols", [](Tape&, const Var& x) { return ad::sum(ad::exp(ad::concat_cols({x, ad::tanh(x)}))); }, -1, 1},
      {"gather", [](Tape&, const Var& x) {
         static const int idx[] = {3, 0, 0, 2};
         return ad::sum(ad::square(ad::gather_cols(x, idx)));
       }, -1, 1},
      {"gather_rows", [](Tape&, const Var& x) {
         static const int idx[] = {1, 1, 0};
         return ad::sum(ad::exp(ad::gather_rows(ad::reshape(x, 2, 2), idx)));
       }, -1, 1},
      {"element", [](Tape&, const Var& x) { return ad::square(ad::element(x, 0, 2)); }, -1, 1},
      {"row_norms", [](Tape&, const Var& x) { return ad::sum(ad::row_norms(ad::reshape(x, 2, 2))); }, 0.2, 1},
      {"norm", [](Tape&, const Var& x) { return ad::norm(x); }, 0.2, 1},
      {"dot_rows", [](Tape&, const Var& x) {
         Var m = ad::reshape(x, 2, 2);
         return ad::sum(ad::dot_rows(m, ad::tanh(m)));
       }, -1, 1},
      {"softmax", [](Tape&, const Var& x) { return ad::sum(ad::square(ad::softmax_rows(x))); }, -2, 2},
      {"log_softmax", [](Tape&, const Var& x) { return ad::element(ad::log_softmax_rows(x), 0, 1); }, -2, 2},
      {"clamp", [](Tape&, const Var& x) { return ad::sum(ad::square(ad::clamp_min(x, 0.0))); }, 0.1, 1},
      {"soft_clamp", [](Tape&, const Var& x) { return ad::sum(ad::soft_clamp(x, 0.7)); }, -1, 1},
      {"neg_broadcast", [](Tape& t, const Var& x) {
         return ad::sum(ad::square(-x * t.constant(Mat::Constant(3, 1, 0.5))));
       }, -1, 1},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    for (int trial = 0; trial < 10; ++trial) {
      const Mat x = random_mat(rng, 1, 4, c.lo, c.hi);
      CHECK(ad::grad_check(c.f, x, 1e-6) < 1e-6);
    }
  }
}

TEST_CASE("grad_check on a sum of squares is exact up to rounding") {
  Rng rng(2);
  const Mat x = random_mat(rng, 1, 6);
  const double err = ad::grad_check([](Tape&, const Var& v) { return ad::sum(ad::square(v)); }, x, 1e-5);
  CHECK(err < 1e-8);
}

TEST_CASE("backward is deterministic and linear") {
  Rng rng(5);
  const Mat x0 = random_mat(rng, 3, 3);
  auto f = [](Tape&, const Var& x) { return ad::sum(ad::tanh(ad::matmul(x, x))); };
  auto g = [](Tape&, const Var& x) { return ad::sum(ad::exp(x * 0.5)); };
  const Mat a1 = ad::gradient(f, x0);
  const Mat a2 = ad::gradient(f, x0);
  CHECK(a1 == a2);
  const Mat sum_grad = ad::gradient([&](Tape& t, const Var& x) { return f(t, x) + g(t, x); }, x0);
  CHECK((sum_grad - a1 - ad::gradient(g, x0)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("map_rows gives the exact Jacobian") {
  Rng rng(8);
  const Mat x = random_mat(rng, 3, 2);
  auto f = [](Tape&, const Var& v) {
    Var y = ad::map_rows<2, 2>(v, [](const auto& in, auto& out) {
      using std::sin;
      out[0] = in[0] * in[1];
      out[1] = sin(in[0]) + in[1] * in[1];
    });
    return ad::sum(ad::square(y));
  };
  CHECK(ad::grad_check(f, x) < 1e-8);
}
