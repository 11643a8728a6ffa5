#include <doctest.h>

#include "gradcheck.hpp"
#include "onh/tensor.hpp"

#include <random>

using namespace onh;
using namespace onh::tensor;

namespace {

Matrix random_matrix(Index r, Index c, std::mt19937_64& rng, double sd = 1) {
  std::normal_distribution<double> n(0, sd);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

std::string code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.module() + "." + e.code();
  }
  return "";
}

}  // namespace

TEST_CASE("identity, relu, constant batchnorm") {
  std::mt19937_64 rng(1);
  Tape t;
  const Matrix B = random_matrix(4, 3, rng);
  CHECK(matmul(t.constant(Matrix::Identity(4, 4)), t.constant(B)).value() == B);

  Matrix x(1, 4);
  x << -2, -0.5, 0.5, 3;
  const Matrix r = relu(t.constant(x)).value();
  CHECK(r(0, 0) == 0);
  CHECK(r(0, 1) == 0);
  CHECK(r(0, 2) == 0.5);
  CHECK(r(0, 3) == 3);

  BatchNormState st(3);
  Matrix c(5, 3);
  c.rowwise() = Eigen::RowVector3d(2, -1, 7);
  const Matrix out = batchnorm(t.constant(c), t.constant(Matrix::Ones(1, 3)), t.constant(Matrix::Zero(1, 3)), st,
                               Mode::Train)
                         .value();
  CHECK(out.cwiseAbs().maxCoeff() == 0);
  CHECK(st.running_mean(0, 0) == doctest::Approx(0.2));
}

TEST_CASE("max over a set") {
  Matrix one(1, 3);
  one << 1, -2, 3;
  MaxOverSet m = max_over_set(one);
  CHECK(m.pooled == one);
  CHECK(m.argmax == std::vector<Index>{0, 0, 0});

  std::mt19937_64 rng(2);
  const Matrix x = random_matrix(5, 3, rng);
  m = max_over_set(x);
  for (Index j = 0; j < 3; ++j) {
    Index best = 0;
    for (Index i = 0; i < 5; ++i)
      if (x(i, j) > x(best, j)) best = i;
    CHECK(m.argmax[std::size_t(j)] == best);
    CHECK(m.pooled(0, j) == x(best, j));
  }

  Matrix dup(10, 3);
  dup << x, x;
  const MaxOverSet md = max_over_set(dup);
  CHECK(md.pooled == m.pooled);
  CHECK(md.argmax == m.argmax);
  CHECK(code_of([] { max_over_set(Matrix(0, 3)); }) == "tensor_core.EMPTY_SET");
}

TEST_CASE("gradient of a plain sum is one everywhere") {
  std::mt19937_64 rng(3);
  Parameter a("a", random_matrix(3, 4, rng)), b("b", random_matrix(1, 2, rng));
  Tape t;
  Var loss = add(sum(t.param(a)), sum(t.param(b)));
  t.backward(loss);
  CHECK(a.grad == Matrix::Ones(3, 4));
  CHECK(b.grad == Matrix::Ones(1, 2));
}

TEST_CASE("segment max routes each gradient to one row") {
  std::mt19937_64 rng(4);
  Parameter x("x", random_matrix(7, 5, rng));
  Segments seg;
  seg.push(3);
  seg.push(4);
  Tape t;
  SegmentMax sm = segment_max(t.param(x), seg);
  t.backward(sum(sm.pooled));
  for (Index s = 0; s < 2; ++s)
    for (Index j = 0; j < 5; ++j) {
      int ones = 0;
      for (Index r = seg.begin(s); r < seg.end(s); ++r) ones += x.grad(r, j) == 1.0;
      CHECK(ones == 1);
      CHECK(x.grad(sm.argmax[std::size_t(s * 5 + j)], j) == 1.0);
    }
  CHECK(x.grad.sum() == 10.0);
}

TEST_CASE("two-layer net against central differences") {
  std::mt19937_64 rng(5);
  Parameter W1("W1", random_matrix(3, 3, rng)), b1("b1", random_matrix(1, 3, rng));
  Parameter W2("W2", random_matrix(3, 2, rng)), b2("b2", random_matrix(1, 2, rng));
  const Matrix x = random_matrix(6, 3, rng);
  const std::vector<int> y{0, 1, 1, 0, 1, 0};
  std::vector<Parameter*> ps{&W1, &b1, &W2, &b2};
  auto run = [&](bool grad) {
    Tape t;
    Var h = relu(add_bias(matmul(t.constant(x), t.param(W1)), t.param(b1)));
    Var loss = softmax_cross_entropy(add_bias(matmul(h, t.param(W2)), t.param(b2)), y);
    if (grad) t.backward(loss);
    return loss.value()(0, 0);
  };
  const auto res = testing::check_gradients(ps, run);
  CHECK(res.checked == 20);
  CHECK(res.max_rel < 1e-4);
}

TEST_CASE("every operation against central differences") {
  std::mt19937_64 rng(6);
  Parameter x("x", random_matrix(6, 3, rng)), g("g", random_matrix(1, 3, rng)), be("be", random_matrix(1, 3, rng));
  Parameter T("T", random_matrix(2, 9, rng, 0.5)), w("w", random_matrix(5, 2, rng));
  Segments seg;
  seg.push(2);
  seg.push(4);
  const Matrix row = random_matrix(1, 5, rng);
  std::vector<Parameter*> ps{&x, &g, &be, &T, &w};

  for (Mode mode : {Mode::Train, Mode::Infer}) {
    BatchNormState st(3);
    st.running_mean = random_matrix(1, 3, rng);
    st.running_var = random_matrix(1, 3, rng).cwiseAbs().array() + 0.5;
    auto run = [&](bool grad) {
      BatchNormState local = st;
      std::mt19937_64 drop(9);
      Tape t;
      Var xs = segment_transform(t.param(x), t.param(T), seg, 3);
      Var bn = batchnorm(xs, t.param(g), t.param(be), local, mode);
      Var cat = concat_cols(slice_cols(bn, 1, 2), scale(bn, 0.5));
      Var h = add_row_constant(dropout(cat, 0.25, drop, Mode::Train), row);
      SegmentMax pooled = segment_max(h, seg);
      Var logits = matmul(pooled.pooled, t.param(w));
      Var loss = add(softmax_cross_entropy(logits, {1, 0}), scale(orthogonality_penalty(t.param(T), 3), 0.1));
      if (grad) t.backward(loss);
      return loss.value()(0, 0);
    };
    const auto res = testing::check_gradients(ps, run);
    CHECK(res.max_rel < 1e-4);
  }
}

TEST_CASE("shape and loss checks") {
  Tape t;
  CHECK(code_of([&] { matmul(t.constant(Matrix::Ones(2, 3)), t.constant(Matrix::Ones(2, 3))); }) ==
        "tensor_core.SHAPE_MISMATCH");
  CHECK(code_of([&] { t.backward(t.constant(Matrix::Ones(2, 2))); }) == "tensor_core.NOT_SCALAR_LOSS");
  Tape other;
  CHECK(code_of([&] { add(t.constant(Matrix::Ones(1, 1)), other.constant(Matrix::Ones(1, 1))); }) ==
        "tensor_core.TAPE_MISMATCH");
}

TEST_CASE("dropout at inference is the identity") {
  std::mt19937_64 rng(7);
  Tape t;
  const Matrix x = random_matrix(4, 4, rng);
  CHECK(dropout(t.constant(x), 0.5, rng, Mode::Infer).value() == x);
  const Matrix d = dropout(t.constant(x), 0.5, rng, Mode::Train).value();
  for (Index i = 0; i < x.size(); ++i) CHECK((d.data()[i] == 0 || d.data()[i] == doctest::Approx(2 * x.data()[i])));
}

TEST_CASE("Adam reduces a quadratic") {
  Parameter p("p", Matrix::Constant(1, 3, 5.0));
  Adam opt;
  opt.lr = 0.1;
  for (int it = 0; it < 300; ++it) {
    p.grad = 2 * p.value;
    opt.step({&p});
  }
  CHECK(opt.steps() == 300);
  CHECK(p.value.cwiseAbs().maxCoeff() < 0.1);
}
