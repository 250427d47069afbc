#include <stdexcept>

#include "doctest.h"
#include "test_support.hpp"

using namespace refil;
using refil::test::dense_from;
using refil::test::fd_jvp;
using refil::test::rel_error;
using refil::test::rel_scalar;

namespace {

Model w1234() { return Model({2}, {dense_from(2, 2, {1, 2, 3, 4})}); }

Model random_mlp(Rng& rng) {
  return Model({6}, {make_dense(6, 8, rng), Relu{}, make_dense(8, 4, rng)});
}

Model random_cnn(Rng& rng) {
  Standardize st{Tensor::vec({0.5f, 0.4f}), Tensor::vec({0.25f, 0.3f})};
  LayerList body{make_conv2d(3, 3, 3, 1, 1, rng), Relu{}, make_conv2d(3, 3, 3, 1, 1, rng)};
  return Model({2, 8, 8},
               {st, make_conv2d(2, 3, 3, 1, 1, rng), Relu{}, Residual{body}, AvgPool{2},
                make_conv2d(3, 2, 1, 1, 0, rng), make_conv2d(2, 4, 3, 2, 1, rng), Flatten{}, make_dense(16, 5, rng)});
}

Tensor input_for(const Model& m, Rng& rng) { return refil::test::smooth_input(m, rng); }

Tensor unit(Tensor v) { return v * static_cast<float>(1.0 / std::sqrt(squared_norm(v))); }

}  // namespace

TEST_CASE("forward examples") {
  Model id({2}, {});
  CHECK(forward(id, Tensor::vec({0.5f, 0.5f})) == Tensor::vec({0.5f, 0.5f}));
  CHECK(forward(w1234(), Tensor::vec({1, 1})) == Tensor::vec({3, 7}));
  CHECK(forward(Model({2}, {Relu{}}), Tensor::vec({-1, 2})) == Tensor::vec({0, 2}));
}

TEST_CASE("forward rejects shape mismatch and names the layer") {
  CHECK_THROWS_AS(forward(w1234(), Tensor::vec({1, 1, 1})), ShapeError);
  try {
    Model({3}, {Relu{}, dense_from(2, 2, {1, 2, 3, 4})});
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("Dense") != std::string::npos);
    CHECK(msg.find('1') != std::string::npos);
  }
}

TEST_CASE("vjp and jvp examples") {
  Model id({2}, {});
  CHECK(vjp(id, Tensor::vec({3, 4}), Tensor::vec({1, 0})) == Tensor::vec({1, 0}));
  CHECK(jvp(id, Tensor::vec({3, 4}), Tensor::vec({0, 1})) == Tensor::vec({0, 1}));
  CHECK(vjp(w1234(), Tensor::vec({1, 1}), Tensor::vec({1, 0})) == Tensor::vec({1, 2}));
  CHECK(jvp(w1234(), Tensor::vec({1, 1}), Tensor::vec({1, 0})) == Tensor::vec({1, 3}));
  CHECK_THROWS_AS(vjp(w1234(), Tensor::vec({1, 1}), Tensor::vec({1, 0, 0})), ShapeError);
  CHECK_THROWS_AS(jvp(w1234(), Tensor::vec({1, 1}), Tensor::vec({1})), ShapeError);
}

TEST_CASE("relu derivative at exactly zero is zero") {
  Model r({3}, {Relu{}});
  const Tensor x = Tensor::vec({0, -1, 1});
  CHECK(jvp(r, x, Tensor::vec({1, 1, 1})) == Tensor::vec({0, 0, 1}));
  CHECK(vjp(r, x, Tensor::vec({1, 1, 1})) == Tensor::vec({0, 0, 1}));
}

TEST_CASE("jvp matches central differences on a random MLP and CNN") {
  Rng rng(11);
  for (const Model& m : {random_mlp(rng), random_cnn(rng)}) {
    const Tensor x = input_for(m, rng);
    for (int t = 0; t < 5; ++t) {
      Tensor v = unit(rng.normal_tensor(m.input_shape()));
      while (!refil::test::same_region(m, x, v)) v = unit(rng.normal_tensor(m.input_shape()));
      CHECK(rel_error(jvp(m, x, v), fd_jvp(m, x, v)) < 1e-3);
    }
  }
}

TEST_CASE("reference interpreter agrees with the library forward") {
  Rng rng(21);
  for (const Model& m : {random_mlp(rng), random_cnn(rng)}) {
    const Tensor x = rng.uniform_tensor(m.input_shape(), 0, 1);
    const auto ref = reference::forward(m, refil::test::to_double(x));
    const Tensor y = forward(m, x);
    Tensor r(y.shape());
    for (std::size_t i = 0; i < ref.size(); ++i) r[i] = static_cast<float>(ref[i]);
    CHECK(rel_error(y, r) < 1e-5);
  }
}

TEST_CASE("vjp matches finite-difference directional derivatives") {
  Rng rng(12);
  for (const Model& m : {random_mlp(rng), random_cnn(rng)}) {
    const Tensor x = input_for(m, rng);
    const Tensor u = rng.normal_tensor(m.output_shape());
    const Tensor g = vjp(m, x, u);
    // (J^T u)_i = u^T J e_i, checked through central differences along e_i.
    Tensor fd(m.input_shape());
    for (std::size_t i = 0; i < m.input_size(); ++i) {
      fd[i] = static_cast<float>(dot(u, fd_jvp(m, x, basis(m.input_shape(), i))));
    }
    CHECK(rel_error(g, fd) < 1e-3);
  }
}

TEST_CASE("linearity of jvp and vjp") {
  Rng rng(13);
  const Model m = random_cnn(rng);
  const Tensor x = input_for(m, rng);
  const float alpha = 1.7f;
  const Tensor v1 = rng.normal_tensor(m.input_shape()), v2 = rng.normal_tensor(m.input_shape());
  const Tensor u1 = rng.normal_tensor(m.output_shape()), u2 = rng.normal_tensor(m.output_shape());
  CHECK(rel_error(jvp(m, x, v1 * alpha + v2), jvp(m, x, v1) * alpha + jvp(m, x, v2)) < 1e-5);
  CHECK(rel_error(vjp(m, x, u1 * alpha + u2), vjp(m, x, u1) * alpha + vjp(m, x, u2)) < 1e-5);
}

TEST_CASE("adjoint identity u.(Jv) == (J^T u).v") {
  Rng rng(14);
  for (const Model& m : {random_mlp(rng), random_cnn(rng)}) {
    const Tensor x = input_for(m, rng);
    for (int t = 0; t < 10; ++t) {
      const Tensor v = rng.normal_tensor(m.input_shape());
      const Tensor u = rng.normal_tensor(m.output_shape());
      CHECK(rel_scalar(dot(u, jvp(m, x, v)), dot(vjp(m, x, u), v)) < 1e-5);
    }
  }
}

TEST_CASE("full jacobian examples and finite-difference oracle") {
  const Tensor j = full_jacobian(w1234(), Tensor::vec({5, -3}));
  CHECK(j == Tensor(Shape{2, 2}, std::vector<float>{1, 2, 3, 4}));
  CHECK(full_jacobian(Model({2}, {Relu{}}), Tensor::vec({-1, 2})) ==
        Tensor(Shape{2, 2}, std::vector<float>{0, 0, 0, 1}));

  Rng rng(15);
  const Model m = random_mlp(rng);
  const Tensor x = input_for(m, rng);
  const Tensor jac = full_jacobian(m, x);
  Tensor fd(Shape{m.output_size(), m.input_size()});
  for (std::size_t c = 0; c < m.input_size(); ++c) {
    const Tensor col = fd_jvp(m, x, basis(m.input_shape(), c));
    for (std::size_t r = 0; r < m.output_size(); ++r) fd[r * m.input_size() + c] = col[r];
  }
  for (std::size_t i = 0; i < jac.size(); ++i) CHECK(std::abs(jac[i] - fd[i]) < 1e-3);
}

TEST_CASE("full jacobian refuses above the cap") {
  Rng rng(16);
  const Model m({64}, {make_dense(64, 64, rng)});
  CHECK_THROWS_AS(full_jacobian(m, Tensor(Shape{64}), 64 * 64 - 1), std::length_error);
  CHECK_NOTHROW(full_jacobian(m, Tensor(Shape{64}), 64 * 64));
}

TEST_CASE("exact trace examples") {
  CHECK(trace_jtj_exact(Model({3}, {}), Tensor::vec({1, 2, 3})) == 3.0);
  CHECK(trace_jtj_exact(w1234(), Tensor::vec({0, 0})) == 30.0);
  const Model scaler({1}, {dense_from(1, 1, {2}), Relu{}});
  CHECK(trace_jtj_exact(scaler, Tensor::vec({-1})) == 0.0);
}

TEST_CASE("exact trace equals the squared Frobenius norm of the full jacobian") {
  Rng rng(17);
  // Both sweep directions: d < m and d > m.
  const Model wide({4}, {make_dense(4, 12, rng), Relu{}, make_dense(12, 9, rng)});
  for (const Model& m : {random_mlp(rng), random_cnn(rng), wide}) {
    const Tensor x = input_for(m, rng);
    CHECK(rel_scalar(trace_jtj_exact(m, x), squared_norm(full_jacobian(m, x))) < 1e-5);
  }
}

TEST_CASE("hutchinson examples") {
  const Model id({5}, {});
  for (std::uint64_t seed : {1u, 2u, 99u}) {
    Rng rng(seed);
    CHECK(trace_jtj_hutchinson(id, Tensor(Shape{5}), 3, rng) == 5.0);
  }
  const Model diag({2}, {dense_from(2, 2, {1, 0, 0, 2})});
  Rng rng(3);
  CHECK(trace_jtj_hutchinson(diag, Tensor(Shape{2}), 20000, rng) == doctest::Approx(5.0).epsilon(0.02));

  Rng init(4);
  const Model mlp = random_mlp(init);
  const Tensor x = input_for(mlp, init);
  Rng r42(42);
  const double exact = trace_jtj_exact(mlp, x);
  CHECK(rel_scalar(trace_jtj_hutchinson(mlp, x, 1000, r42), exact) < 0.05);
}

TEST_CASE("hutchinson averaged over 10 seeds is within 3 percent") {
  Rng init(5);
  const Model m = random_cnn(init);
  const Tensor x = input_for(m, init);
  const double exact = trace_jtj_exact(m, x);
  double mean = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    Rng rng(1000 + s);
    mean += trace_jtj_hutchinson(m, x, 1000, rng) / 10.0;
  }
  CHECK(rel_scalar(mean, exact) < 0.03);
}

TEST_CASE("hutchinson is deterministic for a fixed seed") {
  Rng init(6);
  const Model m = random_mlp(init);
  const Tensor x = input_for(m, init);
  Rng a(7), b(7);
  CHECK(trace_jtj_hutchinson(m, x, 10, a) == trace_jtj_hutchinson(m, x, 10, b));
}

TEST_CASE("forward is pure") {
  Rng rng(18);
  const Model m = random_cnn(rng);
  const Tensor x = input_for(m, rng);
  const Tensor y = forward(m, x);
  for (int i = 0; i < 3; ++i) CHECK(forward(m, x) == y);
  CHECK(all_finite(y));
  CHECK(y.shape() == m.output_shape());
}

TEST_CASE("linearization reuses one forward pass") {
  Rng rng(19);
  const Model m = random_cnn(rng);
  const Tensor x = input_for(m, rng);
  const Linearization lin(m, x);
  const Tensor v = rng.normal_tensor(m.input_shape());
  const Tensor u = rng.normal_tensor(m.output_shape());
  CHECK(lin.output() == forward(m, x));
  CHECK(lin.jvp(v) == jvp(m, x, v));
  CHECK(lin.vjp(u) == vjp(m, x, u));
}

TEST_CASE("parameter gradients match finite differences") {
  Rng rng(20);
  Model m = random_cnn(rng);
  const Tensor x = input_for(m, rng);
  const Tensor u = rng.normal_tensor(m.output_shape());
  auto grads = zero_param_grads(m);
  {
    const Linearization lin(m, x);
    lin.vjp(u, grads);
  }
  auto params = m.parameters();
  REQUIRE(params.size() == grads.size());
  const float h = 1e-3f;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& w = *params[p];
    for (std::size_t i : {std::size_t{0}, w.size() / 2, w.size() - 1}) {
      const float saved = w[i];
      w[i] = saved + h;
      const double fp = dot(u, forward(m, x));
      w[i] = saved - h;
      const double fm = dot(u, forward(m, x));
      w[i] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      CHECK(std::abs(grads[p][i] - fd) < 2e-3 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("embedding lookup and concat branches") {
  EmbeddingLookup a{Tensor(Shape{3, 2}, std::vector<float>{0, 1, 2, 3, 4, 5}), 0};
  EmbeddingLookup b{Tensor(Shape{2, 2}, std::vector<float>{10, 11, 12, 13}), 1};
  const Model m({2}, {Concat{0, {{a}, {b}}}, dense_from(1, 4, {1, 1, 1, 1})});
  const Tensor x = Tensor::vec({2, 1});
  CHECK(forward(m.prefix(1), x) == Tensor::vec({4, 5, 12, 13}));
  CHECK(forward(m, x)[0] == 34.0f);
  CHECK(m.lookup_prefix_length() == 1);
  // Index inputs carry no input derivative.
  CHECK(vjp(m, x, Tensor::vec({1})) == Tensor(Shape{2}));
  CHECK_THROWS(forward(m, Tensor::vec({3, 0})));
}
