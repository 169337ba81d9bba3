#include <cmath>
#include <cstring>
#include <functional>
#include <string>

#include "doctest.h"
#include "tsm/gradcheck.hpp"
#include "tsm/rng.hpp"
#include "tsm/tensor.hpp"

using namespace tsm;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = scale * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), true);
}

// A fixed random projection turns any tensor into a scalar whose gradient
// is dense and O(1).
Tensor probe(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed ^ 0xabcdefULL);
  std::vector<double> w(y.numel());
  for (double& x : w) x = rng.normal();
  return sum(mul(y, Tensor::from(y.shape(), w)));
}

void check_primitive(const std::string& name, const std::function<Tensor(std::vector<Tensor>&)>& body,
                     const std::vector<Shape>& shapes, double scale = 1.0) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    std::vector<Tensor> inputs;
    for (const Shape& s : shapes) inputs.push_back(random_tensor(rng, s, scale));
    auto fn = [&] { return probe(body(inputs), seed); };
    const GradCheckReport r = grad_check(fn, inputs, 1e-4, 1e-4);
    INFO(name << " seed " << seed << " max_rel_err " << r.max_rel_err);
    CHECK(r.pass);
  }
}

bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("matmul examples") {
  const Tensor id = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(bitwise_equal(matmul(id, m).data(), m.data()));

  const Tensor col = Tensor::from({2, 1}, {0, 1});
  const Tensor r = matmul(m, col);
  CHECK(r.shape() == Shape{2, 1});
  CHECK(r[0] == 2.0);
  CHECK(r[1] == 4.0);

  const Tensor z = matmul(m, Tensor::zeros({2, 3}));
  for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({2, 3});
  try {
    (void)matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
  }
}

TEST_CASE("softmax examples") {
  const Tensor u = softmax(Tensor::from({3}, {0, 0, 0}), 0);
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  const Tensor p = softmax(Tensor::from({2}, {0, std::log(2.0)}), 0);
  CHECK(p[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));

  Rng rng(3);
  const Tensor x = random_tensor(rng, {4, 5});
  const Tensor a = softmax(x, 1);
  const Tensor b = softmax(add_scalar(x, 17.25), 1);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("softmax slices sum to one for large magnitudes") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor(rng, {6, 7}, 1e4);
    for (std::size_t axis : {0u, 1u}) {
      const Tensor s = sum(softmax(x, axis), axis);
      for (double v : s.data()) CHECK(std::abs(v - 1.0) <= 1e-6);
      CHECK(all_finite(softmax(x, axis).data()));
    }
  }
}

TEST_CASE("softmax rejects NaN") {
  const Tensor x = Tensor::from({2}, {0.0, std::nan("")});
  CHECK_THROWS_AS((void)softmax(x, 0), NumericError);
  CHECK_THROWS_AS((void)softmax(Tensor::zeros({2}), 1), ShapeError);
}

TEST_CASE("backward examples") {
  const Tensor x = Tensor::from({2, 3}, {1, -2, 3, 4, 5, -6}, true);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  const Tensor y = Tensor::from({3}, {1, 2, 3}, true);
  backward(sum(mul(y, y)));
  CHECK(y.grad()[0] == 2.0);
  CHECK(y.grad()[1] == 4.0);
  CHECK(y.grad()[2] == 6.0);

  const Tensor unused = Tensor::from({2}, {5, 7}, true);
  const Tensor w = Tensor::from({2}, {1, 1}, true);
  backward(sum(exp(w)));
  for (double g : unused.grad()) CHECK(g == 0.0);
}

TEST_CASE("backward errors") {
  const Tensor x = Tensor::from({2}, {1, 2}, true);
  CHECK_THROWS_AS(backward(mul_scalar(x, 2.0)), ShapeError);

  const Tensor l1 = sum(x);
  const Tensor l2 = sum(exp(x));
  const auto rec = ComputationRecord::trace(l1);
  CHECK_THROWS_AS(backward(rec, l2), std::invalid_argument);
}

TEST_CASE("record is topologically ordered and replays bit-identically") {
  Rng rng(5);
  const Tensor a = random_tensor(rng, {3, 4});
  const Tensor b = random_tensor(rng, {4, 2});
  const Tensor loss = sum(softmax(gelu(matmul(a, b)), 1) * 3.0);
  const auto rec = ComputationRecord::trace(loss);
  for (Node* n : rec.nodes()) {
    for (const NodePtr& in : n->inputs) {
      const auto& nodes = rec.nodes();
      const auto pos_in = std::find(nodes.begin(), nodes.end(), in.get());
      const auto pos_n = std::find(nodes.begin(), nodes.end(), n);
      CHECK(pos_in < pos_n);
    }
  }
  CHECK(rec.replay_matches());
}

TEST_CASE("determinism: identical inputs give identical values and gradients") {
  auto run = [] {
    Rng rng(42);
    Tensor a = random_tensor(rng, {5, 6});
    Tensor g = random_tensor(rng, {6});
    Tensor b = random_tensor(rng, {6});
    Tensor y = layer_norm(a, g, b);
    Tensor loss = probe(softmax(y, 1), 9);
    backward(loss);
    std::vector<double> out(a.grad().begin(), a.grad().end());
    out.push_back(loss.item());
    return out;
  };
  CHECK(bitwise_equal(run(), run()));
}

TEST_CASE("grad_check examples") {
  Rng rng(1);
  Tensor x = random_tensor(rng, {4, 3});
  const auto sq = grad_check([&] { return sum(mul(x, x)); }, {x}, 1e-4, 1e-4);
  CHECK(sq.pass);
  CHECK(sq.max_rel_err < 1e-6);

  Tensor c = random_tensor(rng, {3});
  const auto constant = grad_check([&] { return mul_scalar(sum(mul_scalar(c, 0.0)), 1.0); }, {c});
  CHECK(constant.pass);
  CHECK(constant.max_rel_err == 0.0);
  for (double g : c.grad()) CHECK(g == 0.0);

  // f is constant, so the central difference only sees rounding noise of
  // order ulp(f)/eps; eps = 1e-2 keeps that under the 1e-8 floor.
  Tensor s = random_tensor(rng, {3, 5});
  const auto conserved = grad_check([&] { return sum(softmax(s, 1)); }, {s}, 1e-2, 1e-4);
  INFO("conserved max_rel_err " << conserved.max_rel_err);
  CHECK(conserved.pass);
  for (double g : s.grad()) CHECK(std::abs(g) < 1e-12);
}

TEST_CASE("grad_check rejects bad eps and nondeterministic functions") {
  Tensor x = Tensor::from({2}, {1, 2});
  CHECK_THROWS_AS(grad_check([&] { return sum(x); }, {x}, 0.0, 1e-4), std::invalid_argument);
  int calls = 0;
  CHECK_THROWS_AS(grad_check([&] { return add_scalar(sum(x), 1e-3 * ++calls); }, {x}), NumericError);
}

TEST_CASE("grad_check detects a corrupted backward rule") {
  Rng rng(2);
  Tensor x = random_tensor(rng, {3, 3});
  const auto r = grad_check([&] { return probe(scale_grad(tanh(x), 1.5), 3); }, {x});
  CHECK_FALSE(r.pass);
}

TEST_CASE("gradient fidelity of every primitive over ten seeds") {
  check_primitive("matmul", [](auto& in) { return matmul(in[0], in[1]); }, {{3, 4}, {4, 5}});
  check_primitive("transpose", [](auto& in) { return transpose(in[0]); }, {{3, 4}});
  check_primitive("reshape", [](auto& in) { return reshape(in[0], {6, 2}); }, {{3, 4}});
  check_primitive("add_bias", [](auto& in) { return add(in[0], in[1]); }, {{3, 4}, {4}});
  check_primitive("sub_scalar", [](auto& in) { return sub(in[0], in[1]); }, {{3, 4}, {1}});
  check_primitive("mul", [](auto& in) { return mul(in[0], in[1]); }, {{3, 4}, {3, 4}});
  check_primitive("div", [](auto& in) { return div(in[0], add_scalar(mul(in[1], in[1]), 1.0)); }, {{3, 4}, {3, 4}});
  check_primitive("scalar_ops", [](auto& in) { return add_scalar(mul_scalar(in[0], -1.7), 0.3); }, {{5}});
  check_primitive("exp", [](auto& in) { return exp(in[0]); }, {{3, 4}});
  check_primitive("log", [](auto& in) { return log(add_scalar(mul(in[0], in[0]), 0.5)); }, {{3, 4}});
  check_primitive("sqrt", [](auto& in) { return sqrt(add_scalar(mul(in[0], in[0]), 0.5)); }, {{3, 4}});
  check_primitive("pow", [](auto& in) { return pow(add_scalar(mul(in[0], in[0]), 0.5), 1.5); }, {{3, 4}});
  check_primitive("sigmoid", [](auto& in) { return sigmoid(in[0]); }, {{3, 4}});
  check_primitive("tanh", [](auto& in) { return tanh(in[0]); }, {{3, 4}});
  check_primitive("gelu", [](auto& in) { return gelu(in[0]); }, {{3, 4}});
  check_primitive("sum", [](auto& in) { return sum(in[0]); }, {{3, 4}});
  check_primitive("sum_axis0", [](auto& in) { return sum(in[0], 0); }, {{3, 4, 2}});
  check_primitive("mean_axis1", [](auto& in) { return mean(in[0], 1); }, {{3, 4, 2}});
  check_primitive("concat", [](auto& in) { return concat({in[0], in[1]}, 1); }, {{3, 2}, {3, 4}});
  check_primitive("slice", [](auto& in) { return slice(in[0], 1, 1, 2); }, {{3, 4}});
  check_primitive("repeat_last", [](auto& in) { return repeat_last(in[0], 3); }, {{4, 1}});
  check_primitive("softmax_axis0", [](auto& in) { return softmax(in[0], 0); }, {{3, 4}});
  check_primitive("softmax_axis1", [](auto& in) { return softmax(in[0], 1); }, {{3, 4}});
  check_primitive("log_softmax", [](auto& in) { return log_softmax(in[0], 1); }, {{3, 4}});
  check_primitive("layer_norm", [](auto& in) { return layer_norm(in[0], in[1], in[2]); }, {{3, 6}, {6}, {6}});
  check_primitive("l2_normalize", [](auto& in) { return l2_normalize(in[0], 1); }, {{3, 5}});
  check_primitive("l2_normalize_axis0", [](auto& in) { return l2_normalize(in[0], 0); }, {{3, 5}});
  check_primitive("upsample", [](auto& in) { return upsample_nearest(in[0], 2, 2, 2); }, {{4, 3}});
  check_primitive("space_to_depth", [](auto& in) { return space_to_depth(in[0], 4, 4, 2); }, {{16, 3}});
  check_primitive("space_to_depth_pad", [](auto& in) { return space_to_depth(in[0], 3, 1, 2); }, {{3, 2}});
  check_primitive("weighted_row_sum", [](auto& in) { return weighted_row_sum(in[0], in[1]); }, {{4, 3}, {3, 5}});
}

TEST_CASE("gather and pick accumulate gradients") {
  Tensor table = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  const std::vector<std::size_t> ids{2, 0, 2};
  backward(sum(gather_rows(table, ids)));
  CHECK(table.grad()[4] == 2.0);
  CHECK(table.grad()[0] == 1.0);
  CHECK(table.grad()[2] == 0.0);

  Tensor m = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  const std::vector<std::size_t> rows{0, 1}, cols{2, 0};
  const Tensor p = pick(m, rows, cols);
  CHECK(p[0] == 3.0);
  CHECK(p[1] == 4.0);
}

TEST_CASE("broadcasting is limited to suffix and scalar cases") {
  CHECK_NOTHROW((void)add(Tensor::zeros({2, 3}), Tensor::zeros({3})));
  CHECK_NOTHROW((void)add(Tensor::zeros({2, 3}), Tensor::zeros({1})));
  CHECK_THROWS_AS((void)add(Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeError);
  CHECK_THROWS_AS((void)add(Tensor::zeros({2, 3}), Tensor::zeros({2, 1})), ShapeError);
}

TEST_CASE("l2_normalize is exact under power-of-two rescaling and safe at zero") {
  Rng rng(8);
  const Tensor x = random_tensor(rng, {4, 6});
  const Tensor a = l2_normalize(x, 1);
  const Tensor b = l2_normalize(mul_scalar(x, 8.0), 1);
  const Tensor c = l2_normalize(mul_scalar(x, 0.0625), 1);
  CHECK(bitwise_equal(a.data(), b.data()));
  CHECK(bitwise_equal(a.data(), c.data()));
  for (std::size_t r = 0; r < 4; ++r) {
    double n = 0.0;
    for (std::size_t j = 0; j < 6; ++j) n += a[r * 6 + j] * a[r * 6 + j];
    CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-9));
  }
  const Tensor z = l2_normalize(Tensor::zeros({2, 3}), 1);
  CHECK(all_finite(z.data()));
  for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("weighted_row_sum is bitwise invariant to permuting k") {
  Rng rng(21);
  const Tensor w = random_tensor(rng, {5, 4});
  const Tensor r = random_tensor(rng, {4, 3});
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  std::vector<double> wp(20), rp(12);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t k = 0; k < 4; ++k) wp[i * 4 + k] = w[i * 4 + perm[k]];
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t j = 0; j < 3; ++j) rp[k * 3 + j] = r[perm[k] * 3 + j];
  const Tensor a = weighted_row_sum(w, r);
  const Tensor b = weighted_row_sum(Tensor::from({5, 4}, wp), Tensor::from({4, 3}, rp));
  CHECK(bitwise_equal(a.data(), b.data()));
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  NoGradGuard guard;
  const Tensor y = exp(x);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->inputs.empty());
}
