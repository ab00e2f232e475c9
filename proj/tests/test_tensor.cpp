#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cadre/checkpoint.hpp"
#include "cadre/common.hpp"
#include "cadre/nn.hpp"
#include "cadre/tensor.hpp"
#include "fd_check.hpp"

using namespace cadre;
using namespace cadre::nn;

namespace {

Tensor random_param(Tape& tape, Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t = tape.parameter(std::move(shape));
  for (double& v : t.value()) v = rng.uniform(-scale, scale);
  return t;
}

}  // namespace

TEST_CASE("matmul frozen example") {
  Tape tape;
  Tensor a = Tensor::from({1, 2}, {1.0, 2.0});
  Tensor b = Tensor::from({2, 1}, {3.0, 4.0});
  Tensor c = matmul(a, b);
  REQUIRE(c.shape() == Shape{1, 1});
  REQUIRE(c.item() == 11.0);
}

TEST_CASE("matmul shape mismatch raises") {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from({2, 2}, {1, 2, 3, 4});
  REQUIRE_THROWS_AS(matmul(a, b), DimensionError);
}

TEST_CASE("softmax is shift stable on large inputs") {
  Tensor big = Tensor::from({3}, {1000.0, 1001.0, 1002.0});
  Tensor small = Tensor::from({3}, {0.0, 1.0, 2.0});
  Tensor sb = softmax(big);
  Tensor ss = softmax(small);
  double sum = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    REQUIRE(std::isfinite(sb.at(i)));
    REQUIRE(sb.at(i) == Catch::Approx(ss.at(i)).epsilon(1e-12));
    sum += sb.at(i);
  }
  REQUIRE(sum == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("cross entropy of uniform logits is ln 2") {
  Tensor logits = Tensor::from({2}, {0.0, 0.0});
  Tensor loss = cross_entropy_logits(logits, 0);
  REQUIRE(loss.item() == Catch::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("mse of identical tensors is zero with zero gradient") {
  Tape tape;
  Tensor pred = tape.parameter_from({4}, {0.5, -1.0, 2.0, 0.0});
  Tensor target = Tensor::from({4}, {0.5, -1.0, 2.0, 0.0});
  Tensor loss = mse_loss(pred, target);
  REQUIRE(loss.item() == 0.0);
  tape.backward(loss);
  for (double g : pred.grad()) REQUIRE(g == 0.0);
}

TEST_CASE("adam first step on constant gradient moves by about -lr") {
  Tape tape;
  ParamRegistry reg;
  Tensor p = reg.add("p", tape.parameter_from({1}, {0.0}));
  Adam adam(reg, AdamConfig{/*lr=*/0.1});
  p.grad()[0] = 1.0;
  adam.step(reg);
  REQUIRE(std::abs(p.value()[0] + 0.1) < 1e-6);
}

TEST_CASE("backward visits every recorded node exactly once") {
  Tape tape;
  Rng rng(11);
  Tensor a = random_param(tape, {3, 3}, rng);
  Tensor b = random_param(tape, {3, 3}, rng);
  Tensor c = relu(matmul(a, b));
  Tensor loss = mean_all(mul(c, c));
  const std::size_t n_ops = tape.recorded_ops();
  REQUIRE(n_ops > 0);
  tape.backward(loss);
  REQUIRE(tape.last_backward_visits() == n_ops);
  bool any_nonzero = false;
  for (double g : a.grad()) any_nonzero |= (g != 0.0);
  REQUIRE(any_nonzero);
}

TEST_CASE("gradients accumulate until zeroed") {
  Tape tape;
  Tensor p = tape.parameter_from({1}, {2.0});
  for (int i = 0; i < 3; ++i) {
    tape.clear();
    Tensor loss = mul(p, p);
    tape.backward(loss);
  }
  REQUIRE(p.grad()[0] == Catch::Approx(12.0));  // 3 passes of d(p^2) = 4
  p.zero_grad();
  REQUIRE(p.grad()[0] == 0.0);
}

TEST_CASE("no-grad evaluation records nothing") {
  Tape tape;
  Tensor p = tape.parameter_from({2}, {1.0, 2.0});
  {
    NoGradGuard guard(&tape);
    Tensor y = relu(scale(p, 3.0));
    REQUIRE(y.at(1) == 6.0);
  }
  REQUIRE(tape.recorded_ops() == 0);
}

TEST_CASE("clamp passes gradient only inside the active region") {
  Tape tape;
  Tensor p = tape.parameter_from({3}, {-2.0, 0.5, 2.0});
  Tensor y = clamp_op(p, -1.0, 1.0);
  Tensor loss = sum_all(y);
  tape.backward(loss);
  REQUIRE(p.grad()[0] == 0.0);
  REQUIRE(p.grad()[1] == 1.0);
  REQUIRE(p.grad()[2] == 0.0);
}

TEST_CASE("finite differences: dense and shape ops") {
  Tape tape;
  Rng rng(101);
  Rng idx(5);

  SECTION("matmul") {
    Tensor a = random_param(tape, {3, 4}, rng);
    Tensor b = random_param(tape, {4, 2}, rng);
    auto rep = fdcheck::check_gradients(
        tape, {a, b}, [&] { return mean_all(mul(matmul(a, b), matmul(a, b))); },
        idx, 16);
    INFO("max rel " << rep.max_rel);
    REQUIRE(rep.max_rel < 1e-6);
  }

  SECTION("linear") {
    Tensor w = random_param(tape, {5, 7}, rng);
    Tensor x = random_param(tape, {7}, rng);
    Tensor b = random_param(tape, {5}, rng);
    auto rep = fdcheck::check_gradients(
        tape, {w, x, b},
        [&] { return mean_all(mul(linear(w, x, b), linear(w, x, b))); }, idx,
        16);
    REQUIRE(rep.max_rel < 1e-6);
  }

  SECTION("transpose reshape concat slice pick") {
    Tensor a = random_param(tape, {3, 4}, rng);
    Tensor b = random_param(tape, {5}, rng);
    auto loss = [&] {
      Tensor t = transpose(a);                       // [4,3]
      Tensor flat = reshape(t, {12});
      Tensor joined = concat(flat, b);               // [17]
      Tensor cut = slice(joined, 2, 9);
      Tensor picked = pick(joined, 14);
      return add(mean_all(mul(cut, cut)), picked);
    };
    auto rep = fdcheck::check_gradients(tape, {a, b}, loss, idx, 17);
    REQUIRE(rep.max_rel < 1e-6);
  }

  SECTION("activations") {
    Tensor x = random_param(tape, {9}, rng, 2.0);
    auto loss = [&] {
      Tensor y = add(tanh_op(x), add(sigmoid(x), relu(x)));
      return mean_all(mul(y, y));
    };
    auto rep = fdcheck::check_gradients(tape, {x}, loss, idx, 9);
    REQUIRE(rep.max_rel < 1e-6);
  }

  SECTION("exp and min") {
    Tensor x = random_param(tape, {6}, rng);
    Tensor y = random_param(tape, {6}, rng);
    auto loss = [&] { return mean_all(min_op(exp_op(x), exp_op(y))); };
    auto rep = fdcheck::check_gradients(tape, {x, y}, loss, idx, 12);
    REQUIRE(rep.max_rel < 1e-6);
  }
}

TEST_CASE("finite differences: softmax family") {
  Tape tape;
  Rng rng(202);
  Rng idx(6);

  SECTION("softmax jacobian on a length-5 vector") {
    Tensor x = random_param(tape, {5}, rng, 2.0);
    // Probe the full Jacobian row by row through weighted sums.
    for (std::size_t row = 0; row < 5; ++row) {
      auto rep = fdcheck::check_gradients(
          tape, {x}, [&] { return pick(softmax(x), row); }, idx, 5);
      REQUIRE(rep.max_rel < 1e-6);
    }
  }

  SECTION("softmax_rows") {
    Tensor x = random_param(tape, {4, 6}, rng, 2.0);
    Tensor wsum = Tensor::from({4, 6}, [] {
      std::vector<double> v(24);
      for (std::size_t i = 0; i < 24; ++i) v[i] = 0.1 * double(i) - 1.0;
      return v;
    }());
    auto rep = fdcheck::check_gradients(
        tape, {x}, [&] { return sum_all(mul(softmax_rows(x), wsum)); }, idx,
        24);
    REQUIRE(rep.max_rel < 1e-6);
  }

  SECTION("log_softmax and cross_entropy_logits") {
    Tensor x = random_param(tape, {7}, rng, 3.0);
    auto rep1 = fdcheck::check_gradients(
        tape, {x}, [&] { return pick(log_softmax(x), 3); }, idx, 7);
    REQUIRE(rep1.max_rel < 1e-6);
    auto rep2 = fdcheck::check_gradients(
        tape, {x}, [&] { return cross_entropy_logits(x, 2); }, idx, 7);
    REQUIRE(rep2.max_rel < 1e-6);
  }

  SECTION("cross_entropy_map") {
    Tensor logits = random_param(tape, {3, 4, 5}, rng, 2.0);
    std::vector<std::uint8_t> target(20);
    for (std::size_t i = 0; i < 20; ++i)
      target[i] = static_cast<std::uint8_t>(i % 3);
    auto rep = fdcheck::check_gradients(
        tape, {logits}, [&] { return cross_entropy_map(logits, target); }, idx,
        20);
    REQUIRE(rep.max_rel < 1e-6);
  }
}

TEST_CASE("finite differences: convolutions and pooling") {
  Tape tape;
  Rng rng(303);
  Rng idx(7);

  SECTION("conv2d stride 2 pad 1") {
    Tensor x = random_param(tape, {3, 8, 8}, rng);
    Tensor w = random_param(tape, {4, 3, 3, 3}, rng, 0.5);
    Tensor b = random_param(tape, {4}, rng, 0.1);
    auto loss = [&] {
      Tensor y = conv2d(x, w, b, 2, 1);
      return mean_all(mul(y, y));
    };
    auto rep = fdcheck::check_gradients(tape, {x, w, b}, loss, idx, 12);
    INFO("max rel " << rep.max_rel);
    REQUIRE(rep.max_rel < 1e-5);
  }

  SECTION("conv2d output geometry") {
    Tensor x = Tensor::zeros({3, 8, 8});
    Tensor w = Tensor::zeros({4, 3, 3, 3});
    Tensor b = Tensor::zeros({4});
    Tensor y = conv2d(x, w, b, 2, 1);
    REQUIRE(y.shape() == Shape{4, 4, 4});
  }

  SECTION("conv_transpose2d doubles the grid") {
    Tensor x = random_param(tape, {4, 3, 5}, rng);
    Tensor w = random_param(tape, {4, 2, 2, 2}, rng, 0.5);
    Tensor b = random_param(tape, {2}, rng, 0.1);
    Tensor y = conv_transpose2d(x, w, b, 2);
    REQUIRE(y.shape() == Shape{2, 6, 10});
    auto loss = [&] {
      Tensor out = conv_transpose2d(x, w, b, 2);
      return mean_all(mul(out, out));
    };
    auto rep = fdcheck::check_gradients(tape, {x, w, b}, loss, idx, 12);
    REQUIRE(rep.max_rel < 1e-5);
  }

  SECTION("global_avg_pool") {
    Tensor x = random_param(tape, {5, 4, 4}, rng);
    auto rep = fdcheck::check_gradients(
        tape, {x},
        [&] {
          Tensor p = global_avg_pool(x);
          return mean_all(mul(p, p));
        },
        idx, 16);
    REQUIRE(rep.max_rel < 1e-6);
  }
}

TEST_CASE("finite differences: lstm cell") {
  Tape tape;
  ParamRegistry reg;
  Rng rng(404);
  Rng idx(8);
  LstmCell cell = LstmCell::make(tape, reg, "lstm", 6, 5, rng);
  Tensor x0 = random_param(tape, {6}, rng);
  Tensor x1 = random_param(tape, {6}, rng);
  auto loss = [&] {
    LstmState s = cell.zero_state();
    s = cell(x0, s);
    s = cell(x1, s);
    return mean_all(mul(s.h, s.h));
  };
  auto rep = fdcheck::check_gradients(
      tape, {cell.wx, cell.wh, cell.b, x0, x1}, loss, idx, 10);
  INFO("max rel " << rep.max_rel);
  REQUIRE(rep.max_rel < 1e-5);
}

TEST_CASE("registry flatten and load round trip") {
  Tape tape;
  ParamRegistry reg;
  Rng rng(17);
  Tensor a = reg.add("a", tape.parameter({3, 2}));
  Tensor b = reg.add("b", tape.parameter({4}));
  init_uniform_fanin(a, 2, rng);
  init_uniform_fanin(b, 4, rng);
  auto flat = reg.flatten_values();
  REQUIRE(flat.size() == 10);

  ParamRegistry reg2;
  Tape tape2;
  reg2.add("a", tape2.parameter({3, 2}));
  reg2.add("b", tape2.parameter({4}));
  reg2.load_values(flat);
  REQUIRE(reg2.flatten_values() == flat);
  REQUIRE(reg2.value_hash() == reg.value_hash());
}

TEST_CASE("identical seeds give identical initialization") {
  auto build = [](std::uint64_t seed) {
    Tape tape;
    ParamRegistry reg;
    Rng rng(seed);
    LinearLayer::make(tape, reg, "l1", 16, 8, rng);
    Conv2dLayer::make(tape, reg, "c1", 4, 3, 3, 2, 1, rng);
    return reg.flatten_values();
  };
  REQUIRE(build(99) == build(99));
  REQUIRE(build(99) != build(100));
}

TEST_CASE("checkpoint round trip is bit exact") {
  const std::string base = "pytest_ckpt_roundtrip";
  Tape tape;
  ParamRegistry reg;
  Rng rng(7);
  Tensor a = reg.add("layer.w", tape.parameter({4, 3}));
  Tensor b = reg.add("layer.b", tape.parameter({4}));
  init_uniform_fanin(a, 3, rng);
  // A few values that stress exact round-tripping.
  b.value() = {1e-308, -0.0, 3.141592653589793, 1e300};

  nlohmann::json meta;
  meta["arch"] = "unit-test";
  save_checkpoint(reg, base, 42, meta);

  Tape tape2;
  ParamRegistry reg2;
  reg2.add("layer.w", tape2.parameter({4, 3}));
  reg2.add("layer.b", tape2.parameter({4}));
  CheckpointInfo info = load_checkpoint(reg2, base);
  REQUIRE(info.global_step == 42);
  REQUIRE(info.meta.at("arch") == "unit-test");

  auto f1 = reg.flatten_values();
  auto f2 = reg2.flatten_values();
  REQUIRE(f1.size() == f2.size());
  for (std::size_t i = 0; i < f1.size(); ++i) {
    REQUIRE(std::memcmp(&f1[i], &f2[i], sizeof(double)) == 0);
  }
  REQUIRE(std::signbit(reg2.find("layer.b").value()[1]));
}

TEST_CASE("checkpoint refuses a mismatched architecture") {
  const std::string base = "pytest_ckpt_mismatch";
  Tape tape;
  ParamRegistry reg;
  reg.add("w", tape.parameter({2, 2}));
  save_checkpoint(reg, base, 0);

  Tape tape2;
  ParamRegistry wrong_shape;
  wrong_shape.add("w", tape2.parameter({2, 3}));
  REQUIRE_THROWS_AS(load_checkpoint(wrong_shape, base), LoadError);

  ParamRegistry wrong_name;
  wrong_name.add("v", tape2.parameter({2, 2}));
  REQUIRE_THROWS_AS(load_checkpoint(wrong_name, base), LoadError);
}

TEST_CASE("rng streams are deterministic and seed sensitive") {
  Rng a(123), b(123), c(124);
  for (int i = 0; i < 100; ++i) {
    const double x = a.uniform01();
    REQUIRE(x == b.uniform01());
    REQUIRE(x >= 0.0);
    REQUIRE(x < 1.0);
  }
  bool differs = false;
  Rng a2(123);
  for (int i = 0; i < 10; ++i) differs |= (a2.uniform01() != c.uniform01());
  REQUIRE(differs);
  REQUIRE(derive_seed(1, "worker", 0) != derive_seed(1, "worker", 1));
  REQUIRE(derive_seed(1, "worker", 0) == derive_seed(1, "worker", 0));
  REQUIRE(derive_seed(1, "worker", 0) != derive_seed(1, "shuffle", 0));
}
