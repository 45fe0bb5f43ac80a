// Gradient-check cases covering every differentiable op.
#pragma once

#include "helpers.hpp"

#include <array>
#include <functional>

namespace testing {

using namespace codecsep;

// Scalarizes an op output against fixed random weights so every output
// element carries a distinct, non-degenerate gradient.
inline Tensor weighted(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed * 7 + 1);
  Tensor w = random_tensor(rng, y.shape(), false);
  return sum(mul(y, w));
}

struct OpCase {
  const char* name;
  std::function<double(std::mt19937_64&, double eps)> check;
};

inline double unary_check(std::mt19937_64& rng, Shape shape, double lo, double hi, double eps,
                          const std::function<Tensor(const Tensor&)>& op) {
  Tensor x = random_tensor(rng, shape, true, lo, hi);
  const auto seed = rng();
  return grad_check([&](const Tensor& v) { return weighted(op(v), seed); }, x, eps);
}

inline double multi_check(std::vector<Tensor> leaves, double eps, const std::function<Tensor(std::span<Tensor>)>& op,
                   std::uint64_t seed) {
  return grad_check([&] { return weighted(op(leaves), seed); }, leaves, eps);
}

inline std::vector<OpCase> op_cases() {
  return {
      {"add", [](auto& r, double e) {
         return multi_check({random_tensor(r, {3, 4}), random_tensor(r, {4})}, e,
                            [](auto l) { return add(l[0], l[1]); }, r());
       }},
      {"sub", [](auto& r, double e) {
         return multi_check({random_tensor(r, {3, 4}), random_tensor(r, {3, 1})}, e,
                            [](auto l) { return sub(l[0], l[1]); }, r());
       }},
      {"mul", [](auto& r, double e) {
         return multi_check({random_tensor(r, {2, 5}), random_tensor(r, {2, 5})}, e,
                            [](auto l) { return mul(l[0], l[1]); }, r());
       }},
      {"add_scalar", [](auto& r, double e) { return unary_check(r, {6}, -1, 1, e, [](auto& x) { return add_scalar(x, 0.7); }); }},
      {"mul_scalar", [](auto& r, double e) { return unary_check(r, {6}, -1, 1, e, [](auto& x) { return mul_scalar(x, -1.3); }); }},
      {"neg", [](auto& r, double e) { return unary_check(r, {6}, -1, 1, e, [](auto& x) { return neg(x); }); }},
      {"square", [](auto& r, double e) { return unary_check(r, {6}, -2, 2, e, [](auto& x) { return square(x); }); }},
      {"sin", [](auto& r, double e) { return unary_check(r, {7}, -3, 3, e, [](auto& x) { return sin(x); }); }},
      {"exp", [](auto& r, double e) { return unary_check(r, {7}, -2, 2, e, [](auto& x) { return exp(x); }); }},
      {"log", [](auto& r, double e) { return unary_check(r, {7}, 0.5, 3, e, [](auto& x) { return log(x); }); }},
      {"reciprocal", [](auto& r, double e) { return unary_check(r, {7}, 0.5, 2, e, [](auto& x) { return reciprocal(x); }); }},
      {"sqrt", [](auto& r, double e) { return unary_check(r, {7}, 0.5, 3, e, [](auto& x) { return sqrt(x); }); }},
      {"sum", [](auto& r, double e) { return unary_check(r, {3, 3}, -1, 1, e, [](auto& x) { return mul(sum(x), sum(x)); }); }},
      {"mean", [](auto& r, double e) { return unary_check(r, {3, 3}, -1, 1, e, [](auto& x) { return exp(mean(x)); }); }},
      {"matmul", [](auto& r, double e) {
         return multi_check({random_tensor(r, {3, 4}), random_tensor(r, {4, 2})}, e,
                            [](auto l) { return matmul(l[0], l[1]); }, r());
       }},
      {"conv1d", [](auto& r, double e) {
         return multi_check({random_tensor(r, {2, 11}), random_tensor(r, {3, 2, 3})}, e,
                            [](auto l) { return conv1d(l[0], l[1], 2); }, r());
       }},
      {"conv_transpose1d", [](auto& r, double e) {
         return multi_check({random_tensor(r, {2, 5}), random_tensor(r, {2, 3, 4})}, e,
                            [](auto l) { return conv_transpose1d(l[0], l[1], 2); }, r());
       }},
      {"layer_norm", [](auto& r, double e) {
         return multi_check({random_tensor(r, {3, 5}), random_tensor(r, {5}), random_tensor(r, {5})}, e,
                            [](auto l) { return layer_norm(l[0], l[1], l[2]); }, r());
       }},
      {"softmax", [](auto& r, double e) { return unary_check(r, {3, 4}, -2, 2, e, [](auto& x) { return softmax(x); }); }},
      {"transpose", [](auto& r, double e) { return unary_check(r, {2, 3}, -1, 1, e, [](auto& x) { return transpose(x); }); }},
      {"reshape", [](auto& r, double e) { return unary_check(r, {2, 3}, -1, 1, e, [](auto& x) { return reshape(x, {3, 2}); }); }},
      {"slice", [](auto& r, double e) { return unary_check(r, {2, 6}, -1, 1, e, [](auto& x) { return slice_last(x, 1, 4); }); }},
      {"concat", [](auto& r, double e) {
         return multi_check({random_tensor(r, {2, 3}), random_tensor(r, {2, 2})}, e,
                            [](auto l) { return concat_last(l); }, r());
       }},
      {"pad", [](auto& r, double e) { return unary_check(r, {2, 3}, -1, 1, e, [](auto& x) { return pad_last(x, 2, 1); }); }},
      {"gather_rows", [](auto& r, double e) {
         const std::array<std::size_t, 4> rows{2, 0, 2, 1};
         return unary_check(r, {3, 2}, -1, 1, e, [&](auto& x) { return gather_rows(x, rows); });
       }},
      {"elu", [](auto& r, double e) { return unary_check(r, {9}, -2, 2, e, [](auto& x) { return elu(x); }); }},
      {"snake", [](auto& r, double e) { return unary_check(r, {9}, -2, 2, e, [](auto& x) { return snake(x, 0.8); }); }},
      {"linear", [](auto& r, double e) {
         return multi_check({random_tensor(r, {4, 3}), random_tensor(r, {3, 2}), random_tensor(r, {2})}, e,
                            [](auto l) { return linear(l[0], l[1], l[2]); }, r());
       }},
  };
}

}  // namespace testing
