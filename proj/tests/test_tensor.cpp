#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>

#include "opa/rng.hpp"
#include "opa/tensor.hpp"

using namespace opa;
using namespace opa::ad;

namespace {

Tensor rand_tensor(int r, int c, Rng& rng, double scale = 1.0) {
  Tensor t(r, c);
  for (auto& x : t.v) x = rng.uniform(-scale, scale);
  return t;
}

// Central finite differences on one parameter coordinate.
double fd_grad(Network& net, const std::string& name, std::size_t coord,
               const std::function<double()>& loss, double h = 1e-5) {
  double& w = net.find(name)->value.v[coord];
  const double saved = w;
  w = saved + h;
  const double up = loss();
  w = saved - h;
  const double down = loss();
  w = saved;
  return (up - down) / (2 * h);
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

}  // namespace

TEST_CASE("relu forward") {
  Graph g;
  Tensor t(1, 2);
  t.v = {-1, 2};
  const auto& out = g.value(g.relu(g.constant(t)));
  CHECK(out.v[0] == 0);
  CHECK(out.v[1] == 2);
}

TEST_CASE("softmax symmetry") {
  Graph g;
  const auto& out = g.value(g.softmax(g.constant(Tensor(1, 2))));
  CHECK(out.v[0] == doctest::Approx(0.5));
  CHECK(out.v[1] == doctest::Approx(0.5));
}

TEST_CASE("huber at zero residual") {
  Graph g;
  Tensor target(1, 1);
  target.v = {0.3};
  Tensor value(1, 1);
  value.v = {0.3};
  CHECK(g.value(g.huber(g.constant(value), target, 1.0)).v[0] == 0.0);
}

TEST_CASE("shape mismatch errors name both shapes") {
  Graph g;
  const int a = g.constant(Tensor(2, 3));
  const int b = g.constant(Tensor(3, 3));
  CHECK_THROWS_WITH_AS(g.add(a, b), doctest::Contains("(2,3)"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(g.add(a, b), doctest::Contains("(3,3)"),
                       std::invalid_argument);
}

TEST_CASE("backward of sum gives ones") {
  Network net;
  net.add("w", Tensor(1, 3));
  Graph g;
  g.backward(g.sum(g.param(*net.find("w"))));
  g.flush_param_grads();
  for (double gr : net.find("w")->grad.v) CHECK(gr == 1.0);
}

TEST_CASE("backward of mean of squares") {
  Network net;
  Tensor w(1, 2);
  w.v = {1, 2};
  net.add("w", std::move(w));
  Graph g;
  const int p = g.param(*net.find("w"));
  g.backward(g.mean(g.mul(p, p)));
  g.flush_param_grads();
  CHECK(net.find("w")->grad.v[0] == doctest::Approx(1.0));
  CHECK(net.find("w")->grad.v[1] == doctest::Approx(2.0));
}

TEST_CASE("non-scalar loss is rejected") {
  Graph g;
  CHECK_THROWS_AS(g.backward(g.constant(Tensor(1, 2))), std::invalid_argument);
}

TEST_CASE("repeated backward accumulates") {
  Network net;
  net.add("w", Tensor(1, 1));
  Graph g;
  const int loss = g.sum(g.param(*net.find("w")));
  g.backward(loss);
  g.backward(loss);
  g.flush_param_grads();
  CHECK(net.find("w")->grad.v[0] == 2.0);
}

TEST_CASE("gradients distribute over addition across graphs") {
  Rng rng(1);
  Network net;
  net.add("w", rand_tensor(2, 2, rng));
  auto grad_of = [&](bool both) {
    net.zero_grads();
    Graph g;
    const int p = g.param(*net.find("w"));
    const int a = g.sum(g.mul(p, p));
    const int b = g.sum(g.relu(p));
    g.backward(both ? g.add(a, b) : a);
    if (!both) {
      Graph g2;
      const int p2 = g2.param(*net.find("w"));
      g2.backward(g2.sum(g2.relu(p2)));
      g2.flush_param_grads();
    }
    g.flush_param_grads();
    return net.find("w")->grad.v;
  };
  const auto joint = grad_of(true);
  const auto split = grad_of(false);
  for (std::size_t i = 0; i < joint.size(); ++i)
    CHECK(joint[i] == doctest::Approx(split[i]).epsilon(1e-12));
}

TEST_CASE("log and cross_entropy never produce NaN on probabilities") {
  Graph g;
  Tensor probs(1, 3);
  probs.v = {0.0, 0.5, 1.0};
  const auto& lg = g.value(g.log_(g.constant(probs)));
  for (double x : lg.v) CHECK(std::isfinite(x));

  Tensor logits(2, 3);
  logits.v = {1000, -1000, 0, 0, 0, 0};
  const auto& ce = g.value(g.cross_entropy(g.constant(logits), {0, 2}));
  for (double x : ce.v) CHECK(std::isfinite(x));
}

TEST_CASE("finite-difference check on random mixed graphs") {
  Rng rng(99);
  for (int trial = 0; trial < 60; ++trial) {
    Network net;
    const int in = 2 + static_cast<int>(rng.uniform_index(3));
    const int hid = 2 + static_cast<int>(rng.uniform_index(4));
    net.add("w1", rand_tensor(in, hid, rng));
    net.add("b1", rand_tensor(1, hid, rng, 0.2));
    net.add("w2", rand_tensor(hid, 3, rng));
    const Tensor x = rand_tensor(4, in, rng);
    const int variant = static_cast<int>(rng.uniform_index(6));

    auto forward = [&]() {
      Graph g;
      const int h =
          g.add(g.matmul(g.constant(x), g.param(*net.find("w1"))),
                g.param(*net.find("b1")));
      int a;
      switch (variant) {
        case 0: a = g.relu(h); break;
        case 1: a = g.tanh_(h); break;
        case 2: a = g.sigmoid(h); break;
        case 3: a = g.exp_(g.scale(h, 0.3)); break;
        case 4: a = g.abs_(h); break;
        default: a = g.clamp_(h, -0.5, 0.5); break;
      }
      int out = g.matmul(a, g.param(*net.find("w2")));
      if (variant % 2 == 0) out = g.softmax(out);
      if (variant == 1) out = g.max_pool(out, 0);
      if (variant == 4) out = g.log_(g.add_scalar(g.mul(out, out), 1.0));
      const int last = out;
      return std::pair<Graph, int>(std::move(g), last);
    };

    auto loss_value = [&]() {
      auto [g, last] = forward();
      return g.value(g.mean(last)).scalar();
    };

    net.zero_grads();
    {
      auto [g, last] = forward();
      g.backward(g.mean(last));
      g.flush_param_grads();
    }

    for (const char* name : {"w1", "b1", "w2"}) {
      Parameter* p = net.find(name);
      for (int probe = 0; probe < 4; ++probe) {
        const std::size_t coord = rng.uniform_index(p->value.v.size());
        const double fd = fd_grad(net, name, coord, loss_value);
        CHECK(rel_err(p->grad.v[coord], fd) < 1e-4);
      }
    }
  }
}

TEST_CASE("structured ops: gather, concat, pool, scatter, select") {
  Rng rng(5);
  Network net;
  net.add("w", rand_tensor(4, 3, rng));

  auto loss = [&]() {
    Graph g;
    const int p = g.param(*net.find("w"));
    const int gathered = g.gather(p, {0, 2, 2});
    const int pooled = g.pool_rows_mean(p, {{0, 1}, {2, 3}});
    const int trimmed = g.select_cols(g.concat(gathered, g.gather(pooled, {0, 1, 1}), 1), 0, 3);
    const int scat = g.scatter_rows(p, {1, 3}, g.gather(trimmed, {0, 1}));
    const int final_ = g.mean(g.mul(scat, scat));
    return std::pair<Graph, int>{std::move(g), final_};
  };

  net.zero_grads();
  {
    auto [g, l] = loss();
    g.backward(l);
    g.flush_param_grads();
  }
  Parameter* p = net.find("w");
  for (std::size_t coord = 0; coord < p->value.v.size(); ++coord) {
    const double fd = fd_grad(net, "w", coord, [&]() {
      auto [g, l] = loss();
      return g.value(l).scalar();
    });
    CHECK(rel_err(p->grad.v[coord], fd) < 1e-4);
  }
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  Network net;
  Tensor w(1, 2);
  w.v = {0.5, -0.5};
  net.add("w", w);
  Graph g;
  g.backward(g.scale(g.sum(g.param(*net.find("w"))), 0.0));
  g.flush_param_grads();
  adam_step(net, 0.001);
  CHECK(net.find("w")->value.v[0] == 0.5);
  CHECK(net.find("w")->value.v[1] == -0.5);
}

TEST_CASE("adam: unit gradient first step moves by about -lr") {
  // bias-corrected first step: m_hat = 1, v_hat = 1, delta = -lr/(1+eps)
  Network net;
  net.add("w", Tensor(1, 1));
  Graph g;
  g.backward(g.sum(g.param(*net.find("w"))));
  g.flush_param_grads();
  adam_step(net, 0.001);
  CHECK(net.find("w")->value.v[0] == doctest::Approx(-0.001).epsilon(1e-6));
}

TEST_CASE("adam without gradients errors") {
  Network net;
  net.add("w", Tensor(1, 1));
  CHECK_THROWS_WITH_AS(adam_step(net, 0.001), doctest::Contains("no gradient"),
                       std::invalid_argument);
}

TEST_CASE("adam is deterministic") {
  auto run = []() {
    Rng rng(77);
    Network net;
    net.add("w", rand_tensor(2, 2, rng));
    for (int step = 0; step < 5; ++step) {
      Graph g;
      const int p = g.param(*net.find("w"));
      g.backward(g.mean(g.mul(p, p)));
      g.flush_param_grads();
      adam_step(net, 0.01);
    }
    return net.find("w")->value.v;
  };
  CHECK(run() == run());
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  Rng rng(13);
  Network net;
  net.add("a", rand_tensor(3, 4, rng));
  net.add("b", rand_tensor(1, 4, rng));
  const auto path = (std::filesystem::temp_directory_path() / "opa_ckpt_test.json").string();
  save_checkpoint(net, path);

  Network loaded;
  loaded.add("a", Tensor(3, 4));
  loaded.add("b", Tensor(1, 4));
  load_checkpoint(loaded, path);
  CHECK(loaded.find("a")->value.v == net.find("a")->value.v);
  CHECK(loaded.find("b")->value.v == net.find("b")->value.v);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint load errors: missing parameter and shape mismatch") {
  Rng rng(13);
  Network net;
  net.add("a", rand_tensor(2, 2, rng));
  const auto path = (std::filesystem::temp_directory_path() / "opa_ckpt_err.json").string();
  save_checkpoint(net, path);

  Network missing;
  missing.add("a", Tensor(2, 2));
  missing.add("extra", Tensor(1, 1));
  CHECK_THROWS_WITH_AS(load_checkpoint(missing, path),
                       doctest::Contains("extra"), std::runtime_error);

  Network mismatched;
  mismatched.add("a", Tensor(3, 2));
  CHECK_THROWS_WITH_AS(load_checkpoint(mismatched, path),
                       doctest::Contains("shape"), std::runtime_error);

  std::ofstream(path) << "{ not json";
  Network corrupt;
  corrupt.add("a", Tensor(2, 2));
  CHECK_THROWS_AS(load_checkpoint(corrupt, path), std::runtime_error);
  std::filesystem::remove(path);
}
