#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "codecsep/losses.hpp"
#include "codecsep/separator.hpp"
#include "helpers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace codecsep;

namespace {

std::vector<double> vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& order) {
  const std::size_t w = x.dim(1);
  std::vector<double> v(x.numel());
  for (std::size_t t = 0; t < order.size(); ++t)
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(order[t] * w), w, v.begin() + static_cast<std::ptrdiff_t>(t * w));
  return Tensor::from(x.shape(), std::move(v));
}

}  // namespace

TEST_CASE("forward shape contract") {
  const Separator sep(SeparatorConfig{});
  std::mt19937_64 rng(1);
  for (std::size_t T : {1u, 2u, 10u, 37u}) {
    const auto out = sep.forward(testing::random_tensor(rng, {T, 64}, false));
    REQUIRE(out.size() == 2);
    for (const auto& e : out) CHECK(e.shape() == Shape{T, 64});
  }
  CHECK_THROWS_AS(sep.forward(Tensor::zeros({10, 32})), ShapeError);
  CHECK_THROWS_AS(sep.forward(Tensor::zeros({10, 64}), Tensor::zeros({10, 64})), ShapeError);

  SeparatorConfig three;
  three.num_speakers = 3;
  CHECK(Separator(three).forward(Tensor::zeros({5, 64})).size() == 3);
}

TEST_CASE("zero mixture is annihilated for any parameters") {
  for (std::uint64_t seed = 0; seed < 5; ++seed)
    for (Activation act : {Activation::snake, Activation::elu}) {
      SeparatorConfig c;
      c.seed = seed;
      c.gating_activation = act;
      for (const auto& e : Separator(c).forward(Tensor::zeros({8, 64})))
        for (double v : e.data()) CHECK(v == 0.0);
    }
}

TEST_CASE("config validation") {
  SeparatorConfig c;
  c.n_heads = 5;
  CHECK_THROWS(c.validate());
  c = SeparatorConfig{};
  c.num_speakers = 1;
  CHECK_THROWS(c.validate());
  c = SeparatorConfig{};
  CHECK(SeparatorConfig::from_json(c.to_json()).to_json() == c.to_json());
}

TEST_CASE("parameter count") {
  const Separator sep(SeparatorConfig{});
  const auto params = sep.parameters();
  CHECK(params[0].value.numel() + params[1].value.numel() == 64 * 32 + 32);
  CHECK(params[0].value.numel() + params[1].value.numel() == 2080);

  std::size_t manual = 0;
  for (const auto& p : params) manual += p.value.numel();
  CHECK(param_count(sep.config()) == manual);

  SeparatorConfig mask_only;
  mask_only.n_blocks = 0;
  const std::size_t adapters = (64 * 32 + 32) + (32 * 64 + 64);
  const std::size_t mask_gen = 64 * 128 + 128;
  CHECK(param_count(mask_only) == adapters + mask_gen);
  CHECK(Separator(mask_only).num_parameters() == adapters + mask_gen);

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    SeparatorConfig c;
    c.n_heads = 1 + static_cast<int>(rng() % 4);
    c.d_model = c.n_heads * (1 + static_cast<int>(rng() % 8));
    c.n_blocks = static_cast<int>(rng() % 3);
    c.ffn_dim = 1 + static_cast<int>(rng() % 40);
    c.codec_dim = 1 + static_cast<int>(rng() % 20);
    c.num_speakers = 2 + static_cast<int>(rng() % 2);
    c.seed = rng();
    std::size_t total = 0;
    for (const auto& p : Separator(c).parameters()) total += p.value.numel();
    CHECK(param_count(c) == total);
    SeparatorConfig reseeded = c;
    reseeded.seed = c.seed + 1;
    CHECK(param_count(reseeded) == param_count(c));
  }
}

TEST_CASE("gating is linear in the mixture under fixed logits") {
  std::mt19937_64 rng(4);
  for (Activation act : {Activation::snake, Activation::elu}) {
    SeparatorConfig c;
    c.gating_activation = act;
    const Separator sep(c);
    const Tensor mix = testing::random_tensor(rng, {9, 64}, false);
    const Tensor logits = testing::random_tensor(rng, {9, 128}, false, -3.0, 3.0);
    const auto a = sep.forward(mix, logits);
    const auto b = sep.forward(mul_scalar(mix, 2.0), logits);
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t i = 0; i < a[k].numel(); ++i) CHECK(b[k].data()[i] == 2.0 * a[k].data()[i]);
  }
}

TEST_CASE("elu gating approaches identity masks for large logits") {
  SeparatorConfig c;
  c.gating_activation = Activation::elu;
  const Separator sep(c);
  std::mt19937_64 rng(5);
  const Tensor mix = testing::random_tensor(rng, {6, 64}, false);
  const auto out = sep.forward(mix, Tensor::full({6, 128}, 20.0));
  for (const auto& e : out)
    for (std::size_t i = 0; i < e.numel(); ++i) {
      const double expected = 20.0 * mix.data()[i];
      CHECK(std::abs(e.data()[i] - expected) <= 1e-6 * std::abs(expected));
    }
}

TEST_CASE("attention rows sum to one") {
  const Separator sep(SeparatorConfig{});
  std::mt19937_64 rng(6);
  AttentionTrace trace;
  (void)sep.forward(testing::random_tensor(rng, {12, 64}, false), std::nullopt, &trace);
  CHECK(trace.weights.size() == 2 * 4);
  for (const auto& w : trace.weights) {
    REQUIRE(w.shape() == Shape{12, 12});
    for (std::size_t r = 0; r < 12; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 12; ++c) s += w.data()[r * 12 + c];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("time-permutation equivariance without positional encoding") {
  SeparatorConfig c;
  c.positional_encoding = false;
  c.seed = 7;
  const Separator sep(c);
  std::mt19937_64 rng(7);
  const Tensor mix = testing::random_tensor(rng, {11, 64}, false);
  std::vector<std::size_t> order(11);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto direct = sep.forward(mix);
  const auto shuffled = sep.forward(permute_rows(mix, order));
  for (std::size_t k = 0; k < 2; ++k) {
    const Tensor expected = permute_rows(direct[k], order);
    for (std::size_t i = 0; i < expected.numel(); ++i)
      CHECK(std::abs(shuffled[k].data()[i] - expected.data()[i]) < 1e-10);
  }

  c.positional_encoding = true;
  const Separator with_pe(c);
  const auto p1 = with_pe.forward(mix);
  const auto p2 = with_pe.forward(permute_rows(mix, order));
  const Tensor expected = permute_rows(p1[0], order);
  double diff = 0.0;
  for (std::size_t i = 0; i < expected.numel(); ++i) diff = std::max(diff, std::abs(p2[0].data()[i] - expected.data()[i]));
  CHECK(diff > 1e-6);
}

TEST_CASE("gradients reach every parameter from both loss types") {
  CodecConfig cc;
  CodecModel codec(cc);
  codec.freeze();
  const Separator sep(SeparatorConfig{});
  std::mt19937_64 rng(8);
  for (int loss_kind = 0; loss_kind < 2; ++loss_kind) {
    std::vector<double> seen(sep.parameters().size(), 0.0);
    for (int batch = 0; batch < 10; ++batch) {
      for (auto& p : sep.parameters()) p.value.zero_grad();
      const Tensor mix = testing::random_tensor(rng, {6, 64}, false, -0.5, 0.5);
      std::vector<Tensor> targets{testing::random_tensor(rng, {6, 64}, false, -0.5, 0.5),
                                  testing::random_tensor(rng, {6, 64}, false, -0.5, 0.5)};
      Tape tape;
      TapeScope scope(tape);
      const auto est = sep.forward(mix);
      Tensor loss;
      if (loss_kind == 0) {
        loss = pit(mse_embedding_loss, est, targets).loss_tensor;
      } else {
        std::vector<Tensor> we, wt;
        for (std::size_t k = 0; k < 2; ++k) {
          we.push_back(codec.decode_tensor(est[k]));
          wt.push_back(codec.decode_tensor(targets[k]));
        }
        loss = pit([](const Tensor& a, const Tensor& b) { return neg(si_sdr(a, b)); }, we, wt).loss_tensor;
      }
      tape.backward(loss);
      const auto params = sep.parameters();
      for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i].value.has_grad())
          for (double g : params[i].value.grad()) seen[i] += std::abs(g);
    }
    const auto params = sep.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      INFO(std::string(params[i].name) << " loss " << loss_kind);
      CHECK(seen[i] > 0.0);
    }
  }
}

TEST_CASE("separator bundle round trip") {
  SeparatorConfig c;
  c.seed = 11;
  const Separator sep(c);
  const Separator back = Separator::from_bundle(decode_bundle(encode_bundle(sep.to_bundle(), Dtype::f64)));
  std::mt19937_64 rng(9);
  const Tensor mix = testing::random_tensor(rng, {5, 64}, false);
  const auto a = sep.forward(mix), b = back.forward(mix);
  for (std::size_t k = 0; k < 2; ++k) CHECK(vec(a[k]) == vec(b[k]));
  TensorBundle wrong = sep.to_bundle();
  wrong.config["kind"] = "codec";
  CHECK_THROWS_AS(Separator::from_bundle(wrong), FormatError);
}
