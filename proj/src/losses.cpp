#include "codecsep/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace codecsep {

Tensor mse_embedding_loss(const Tensor& estimate, const Tensor& target) {
  if (estimate.shape() != target.shape()) throw ShapeError("mse_embedding_loss: shapes differ");
  return mean(square(sub(estimate, target)));
}

Tensor batch_mse_embedding_loss(std::span<const Tensor> estimates, std::span<const Tensor> targets) {
  if (estimates.size() != targets.size() || estimates.empty())
    throw std::invalid_argument("batch_mse_embedding_loss: need equal, non-zero item counts");
  Tensor total;
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    Tensor item = mse_embedding_loss(estimates[i], targets[i]);
    total = total.defined() ? add(total, item) : item;
  }
  return mul_scalar(total, 1.0 / static_cast<double>(estimates.size()));
}

Tensor si_sdr(const Tensor& estimate, const Tensor& reference) {
  if (estimate.numel() != reference.numel()) throw ShapeError("si_sdr: signals differ in length");
  const Tensor est = estimate.rank() == 1 ? estimate : reshape(estimate, {estimate.numel()});
  const Tensor ref = reference.rank() == 1 ? reference : reshape(reference, {reference.numel()});

  const auto rv = ref.data();
  const double ref_mean = std::accumulate(rv.begin(), rv.end(), 0.0) / static_cast<double>(rv.size());
  double ref_energy = 0.0;
  for (double v : rv) ref_energy += (v - ref_mean) * (v - ref_mean);
  if (!(ref_energy > 0.0)) throw std::invalid_argument("si_sdr: reference has zero energy after mean removal");

  Tensor e = sub(est, mean(est));
  Tensor r = sub(ref, mean(ref));
  Tensor scale = mul(sum(mul(e, r)), reciprocal(sum(square(r))));
  Tensor target = mul(r, scale);
  Tensor noise = sub(e, target);
  Tensor ratio = mul(add_scalar(sum(square(target)), kSiSdrEps), reciprocal(add_scalar(sum(square(noise)), kSiSdrEps)));
  return mul_scalar(log(ratio), 10.0 / std::numbers::ln10);
}

Tensor neg_sisdr_loss(std::span<const Tensor> estimates, std::span<const Tensor> references) {
  if (estimates.size() != references.size() || estimates.empty())
    throw std::invalid_argument("neg_sisdr_loss: need equal, non-zero signal counts");
  Tensor total;
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    Tensor v = si_sdr(estimates[i], references[i]);
    total = total.defined() ? add(total, v) : v;
  }
  return mul_scalar(total, -1.0 / static_cast<double>(estimates.size()));
}

namespace {

// Correctly rounded sum (Shewchuk partials with half-even final rounding).
double exact_sum(const std::vector<double>& xs) {
  std::vector<double> p;
  for (double x : xs) {
    std::size_t i = 0;
    for (double y : p) {
      if (std::abs(x) < std::abs(y)) std::swap(x, y);
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) p[i++] = lo;
      x = hi;
    }
    p.resize(i);
    p.push_back(x);
  }
  std::size_t n = p.size();
  if (n == 0) return 0.0;
  double hi = p[--n], lo = 0.0;
  while (n > 0) {
    const double x = hi, y = p[--n];
    hi = x + y;
    lo = y - (hi - x);
    if (lo != 0.0) break;
  }
  if (n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0))) {
    const double y = lo * 2.0, x = hi + y;
    if (y == x - hi) hi = x;
  }
  return hi;
}

void check_square(const std::vector<std::vector<double>>& m) {
  if (m.empty()) throw std::invalid_argument("assignment: empty matrix");
  for (const auto& row : m)
    if (row.size() != m.size()) throw std::invalid_argument("assignment: matrix must be square");
}

}  // namespace

Assignment best_permutation(const std::vector<std::vector<double>>& matrix) {
  check_square(matrix);
  const std::size_t n = matrix.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Assignment best;
  double best_sum = std::numeric_limits<double>::infinity();
  std::vector<double> chosen(n);
  do {
    for (std::size_t k = 0; k < n; ++k) chosen[k] = matrix[k][perm[k]];
    const double s = exact_sum(chosen);
    if (s < best_sum) {
      best_sum = s;
      best.perm = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  best.cost = best_sum / static_cast<double>(n);
  return best;
}

Assignment hungarian_assignment(const std::vector<std::vector<double>>& matrix) {
  check_square(matrix);
  const std::size_t n = matrix.size();
  constexpr double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials; p[j] is the row matched to column j.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = matrix[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  Assignment a;
  a.perm.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) a.perm[p[j] - 1] = j - 1;
  std::vector<double> chosen;
  for (std::size_t k = 0; k < n; ++k) chosen.push_back(matrix[k][a.perm[k]]);
  a.cost = exact_sum(chosen) / static_cast<double>(n);
  return a;
}

PitResult pit(const PairLoss& pair_loss, std::span<const Tensor> estimates, std::span<const Tensor> targets,
              PitSolver solver) {
  if (estimates.size() != targets.size()) throw std::invalid_argument("pit: estimate and target counts differ");
  if (estimates.empty()) throw std::invalid_argument("pit: no speakers");
  const std::size_t n = estimates.size();
  std::vector<std::vector<Tensor>> pairs(n, std::vector<Tensor>(n));
  PitResult r;
  r.pair_matrix.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      pairs[i][j] = pair_loss(estimates[i], targets[j]);
      r.pair_matrix[i][j] = pairs[i][j].item();
    }
  const Assignment a = solver == PitSolver::enumerate ? best_permutation(r.pair_matrix) : hungarian_assignment(r.pair_matrix);
  r.best_perm = a.perm;

  // Sum the chosen pairs in ascending value order so the result does not
  // depend on how estimates or targets were ordered.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return r.pair_matrix[x][a.perm[x]] < r.pair_matrix[y][a.perm[y]];
  });
  Tensor total;
  for (std::size_t k : order) {
    const Tensor& t = pairs[k][a.perm[k]];
    total = total.defined() ? add(total, t) : t;
  }
  r.loss_tensor = n == 1 ? total : mul_scalar(total, 1.0 / static_cast<double>(n));
  r.loss = a.cost;
  return r;
}

}  // namespace codecsep
