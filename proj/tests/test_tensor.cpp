#include <catch2/catch_amalgamated.hpp>

#include "rtta/tensor.hpp"
#include "test_util.hpp"

using namespace rtta;
using rtta::testing::GraphFn;
using rtta::testing::grad_vs_fd;
using rtta::testing::random_tensor;
using rtta::testing::random_tensor_off_kink;

TEST_CASE("affine identity map") {
  Tape tape;
  auto x = tape.variable({1, 2}, {1.0, 2.0});
  auto w = Tape::constant({2, 2}, {1.0, 0.0, 0.0, 1.0});
  auto b = Tape::constant({2}, {0.0, 0.0});
  auto y = tape.affine(x, w, b);
  REQUIRE(y.values == std::vector<double>{1.0, 2.0});
}

TEST_CASE("relu definition") {
  Tape tape;
  auto y = tape.relu(Tape::constant({3}, {-1.0, 0.0, 3.0}));
  REQUIRE(y.values == std::vector<double>{0.0, 0.0, 3.0});
}

TEST_CASE("log_softmax on equal logits") {
  Tape tape;
  auto y = tape.log_softmax(Tape::constant({1, 2}, {0.0, 0.0}));
  REQUIRE(y.values[0] == Catch::Approx(-std::log(2.0)).epsilon(1e-14));
  REQUIRE(y.values[1] == Catch::Approx(-std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("log_softmax is stable for large logits") {
  Tape tape;
  auto y = tape.log_softmax(Tape::constant({1, 2}, {1000.0, 1000.0 + std::log(3.0)}));
  REQUIRE(std::exp(y.values[0]) == Catch::Approx(0.25).margin(1e-12));
  REQUIRE(std::exp(y.values[1]) == Catch::Approx(0.75).margin(1e-12));
}

TEST_CASE("backprop of sum is ones") {
  Tape tape;
  auto x = tape.variable({3}, {4.0, -2.0, 7.0});
  auto gm = tape.backprop(tape.sum_all(x));
  REQUIRE(gm.at(x) == std::vector<double>{1.0, 1.0, 1.0});
}

TEST_CASE("backprop of sum of squares") {
  Tape tape;
  auto x = tape.variable({2}, {1.0, 2.0});
  auto gm = tape.backprop(tape.sum_all(tape.mul(x, x)));
  REQUIRE(gm.at(x)[0] == Catch::Approx(2.0));
  REQUIRE(gm.at(x)[1] == Catch::Approx(4.0));
}

TEST_CASE("backprop rejects non-scalar loss") {
  Tape tape;
  auto x = tape.variable({2}, {1.0, 2.0});
  REQUIRE_THROWS_AS(tape.backprop(x), Error);
}

TEST_CASE("unreachable leaves get zero gradients, not errors") {
  Tape tape;
  auto x = tape.variable({2}, {1.0, 2.0});
  auto y = tape.variable({2}, {3.0, 4.0});
  auto gm = tape.backprop(tape.sum_all(x));
  REQUIRE_FALSE(gm.reached(y));
  REQUIRE(gm.at(y) == std::vector<double>{0.0, 0.0});
}

TEST_CASE("detach preserves values and severs gradients") {
  Tape tape;
  auto x = tape.variable({3}, {0.5, -1.5, 2.0});
  auto d = Tape::detach(x);
  REQUIRE(d.values == x.values);
  REQUIRE(d.node == -1);

  auto y = tape.variable({3}, {1.0, 1.0, 1.0});
  auto gm = tape.backprop(tape.sum_all(tape.mul(d, y)));
  REQUIRE(gm.at(x) == std::vector<double>{0.0, 0.0, 0.0});
  REQUIRE(gm.at(y) == x.values);
}

TEST_CASE("finite differences: quadratic, sine, constant") {
  auto square = [](std::span<const double> v) { return v[0] * v[0]; };
  auto g = finite_difference_grad(square, std::vector<double>{3.0}, 1e-5);
  REQUIRE(g[0] == Catch::Approx(6.0).margin(1e-6));

  auto sine = [](std::span<const double> v) { return std::sin(v[0]); };
  g = finite_difference_grad(sine, std::vector<double>{0.0}, 1e-5);
  REQUIRE(g[0] == Catch::Approx(1.0).margin(1e-9));

  auto constant = [](std::span<const double>) { return 42.0; };
  g = finite_difference_grad(constant, std::vector<double>{1.0, -2.0}, 1e-5);
  REQUIRE(g == std::vector<double>{0.0, 0.0});
}

TEST_CASE("shape mismatch names the primitive and dims") {
  Tape tape;
  auto x = Tape::constant({2, 3}, std::vector<double>(6, 1.0));
  auto w = Tape::constant({2, 4}, std::vector<double>(8, 1.0));
  auto b = Tape::constant({4}, std::vector<double>(4, 0.0));
  try {
    tape.affine(x, w, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    REQUIRE(std::string(e.what()).find("affine") != std::string::npos);
    REQUIRE(std::string(e.what()).find("3") != std::string::npos);
  }
}

TEST_CASE("non-finite forward values are a hard error") {
  Tape tape;
  auto x = Tape::constant({1}, {1e308});
  REQUIRE_THROWS_AS(tape.exp(x), NumericError);
  auto big = Tape::constant({1}, {1e308});
  REQUIRE_THROWS_AS(tape.mul(big, big), NumericError);
}

TEST_CASE("every primitive matches central finite differences") {
  Rng rng(20240811);
  const double tol = 1e-4;

  SECTION("affine") {
    for (int c = 0; c < 20; ++c) {
      std::vector<Tensor> in = {random_tensor({3, 4}, rng), random_tensor({4, 5}, rng),
                                random_tensor({5}, rng)};
      GraphFn f = [](Tape& t, const std::vector<Tensor>& v) {
        return t.mean_all(t.mul(t.affine(v[0], v[1], v[2]), t.affine(v[0], v[1], v[2])));
      };
      REQUIRE(grad_vs_fd(f, in) < tol);
    }
  }

  SECTION("conv2d") {
    for (int c = 0; c < 10; ++c) {
      std::vector<Tensor> in = {random_tensor({2, 2, 4, 4}, rng), random_tensor({3, 2, 3, 3}, rng),
                                random_tensor({3}, rng)};
      GraphFn f = [](Tape& t, const std::vector<Tensor>& v) {
        auto y = t.conv2d(v[0], v[1], v[2]);
        return t.mean_all(t.mul(y, y));
      };
      REQUIRE(grad_vs_fd(f, in) < tol);
    }
  }

  SECTION("relu") {
    for (int c = 0; c < 20; ++c) {
      std::vector<Tensor> in = {random_tensor_off_kink({4, 5}, rng)};
      GraphFn f = [](Tape& t, const std::vector<Tensor>& v) {
        return t.sum_all(t.mul(t.relu(v[0]), v[0]));
      };
      REQUIRE(grad_vs_fd(f, in) < tol);
    }
  }

  SECTION("elementwise add sub mul scale") {
    for (int c = 0; c < 20; ++c) {
      std::vector<Tensor> in = {random_tensor({6}, rng), random_tensor({6}, rng)};
      GraphFn f = [](Tape& t, const std::vector<Tensor>& v) {
        auto s = t.add(v[0], v[1]);
        auto d = t.sub(v[0], v[1]);
        return t.sum_all(t.mul(t.scale(s, 0.75), d));
      };
      REQUIRE(grad_vs_fd(f, in) < tol);
    }
  }

  SECTION("exp and log_softmax") {
    for (int c = 0; c < 20; ++c) {
      std::vector<Tensor> in = {random_tensor({3, 4}, rng, -2.0, 2.0)};
      GraphFn f = [](Tape& t, const std::vector<Tensor>& v) {
        auto ls = t.log_softmax(v[0]);
        return t.sum_all(t.mul(t.exp(ls), ls));
      };
      REQUIRE(grad_vs_fd(f, in) < tol);
    }
  }

  SECTION("batch_norm_eval") {
    for (int c = 0; c < 10; ++c) {
      std::vector<double> mean = {0.2, -0.4, 0.1};
      std::vector<double> var = {1.3, 0.6, 2.0};
      std::vector<Tensor> in = {random_tensor({4, 3}, rng), random_tensor({3}, rng, 0.5, 1.5),
                                random_tensor({3}, rng)};
      GraphFn f = [mean, var](Tape& t, const std::vector<Tensor>& v) {
        auto y = t.batch_norm_eval(v[0], v[1], v[2], mean, var);
        return t.mean_all(t.mul(y, y));
      };
      REQUIRE(grad_vs_fd(f, in) < tol);
    }
  }

  SECTION("batch_norm_batch rank 2 and rank 4") {
    for (int c = 0; c < 10; ++c) {
      std::vector<Tensor> in2 = {random_tensor({5, 3}, rng), random_tensor({3}, rng, 0.5, 1.5),
                                 random_tensor({3}, rng)};
      GraphFn f2 = [](Tape& t, const std::vector<Tensor>& v) {
        auto y = t.batch_norm_batch(v[0], v[1], v[2]);
        return t.mean_all(t.mul(y, y));
      };
      REQUIRE(grad_vs_fd(f2, in2) < tol);

      std::vector<Tensor> in4 = {random_tensor({2, 2, 3, 3}, rng), random_tensor({2}, rng, 0.5, 1.5),
                                 random_tensor({2}, rng)};
      REQUIRE(grad_vs_fd(f2, in4) < tol);
    }
  }

  SECTION("global_avg_pool, pick_class, reshape") {
    for (int c = 0; c < 10; ++c) {
      std::vector<int> labels = {1, 0, 2};
      std::vector<Tensor> in = {random_tensor({3, 2, 2, 3}, rng)};
      GraphFn f = [labels](Tape& t, const std::vector<Tensor>& v) {
        auto pooled = t.global_avg_pool(v[0]);                // [3,2]
        auto wide = t.reshape(v[0], {3, 12});                 // [3,12]
        auto z = t.add(pooled, t.global_avg_pool(t.reshape(wide, {3, 2, 2, 3})));
        auto three = t.reshape(t.mul(z, z), {3, 2});
        auto scores = t.affine(three, Tape::constant({2, 3}, {1, 2, 3, 4, 5, 6}),
                               Tape::constant({3}, {0, 0, 0}));
        return t.sum_all(t.pick_class(scores, labels));
      };
      REQUIRE(grad_vs_fd(f, in) < tol);
    }
  }
}

TEST_CASE("backprop is linear in the loss") {
  Rng rng(7);
  Tape tape;
  auto x = tape.variable(random_tensor({4}, rng));
  auto l1 = tape.sum_all(tape.mul(x, x));
  auto l2 = tape.sum_all(tape.exp(tape.scale(x, 0.3)));
  const double a = 2.5, b = -1.25;
  auto combined = tape.add(tape.scale(l1, a), tape.scale(l2, b));

  auto g1 = tape.backprop(l1).at(x);
  auto g2 = tape.backprop(l2).at(x);
  auto gc = tape.backprop(combined).at(x);
  for (int i = 0; i < 4; ++i) REQUIRE(gc[i] == Catch::Approx(a * g1[i] + b * g2[i]).margin(1e-10));
}

TEST_CASE("gradients accumulate across shared leaves") {
  // d/dx of x*x via two separate uses of the same leaf.
  Tape tape;
  auto x = tape.variable({1}, {3.0});
  auto y = tape.mul(x, x);
  auto gm = tape.backprop(tape.sum_all(y));
  REQUIRE(gm.at(x)[0] == Catch::Approx(6.0));
}
