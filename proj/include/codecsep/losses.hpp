// Embedding MSE, negative SI-SDR and permutation-invariant wrappers.
#pragma once

#include "codecsep/tensor.hpp"

#include <functional>
#include <span>
#include <vector>

namespace codecsep {

/// Mean of squared differences over all elements of two equally shaped tensors.
Tensor mse_embedding_loss(const Tensor& estimate, const Tensor& target);

/// Mean over batch items of the per-item elementwise mean.
Tensor batch_mse_embedding_loss(std::span<const Tensor> estimates, std::span<const Tensor> targets);

inline constexpr double kSiSdrEps = 1e-8;

/// Differentiable SI-SDR in dB of 1-D (or any-shape, flattened) signals.
Tensor si_sdr(const Tensor& estimate, const Tensor& reference);

/// -mean SI-SDR over matched pairs.
Tensor neg_sisdr_loss(std::span<const Tensor> estimates, std::span<const Tensor> references);

using PairLoss = std::function<Tensor(const Tensor& estimate, const Tensor& target)>;

struct Assignment {
  std::vector<std::size_t> perm;  // estimate k -> target perm[k]
  double cost = 0.0;              // correctly rounded sum of matrix[k][perm[k]], divided by N
};

/// Exhaustive search over all permutations; ties go to the lexicographically
/// smallest permutation.
Assignment best_permutation(const std::vector<std::vector<double>>& matrix);

/// Kuhn-Munkres assignment minimizing the same mean cost.
Assignment hungarian_assignment(const std::vector<std::vector<double>>& matrix);

enum class PitSolver { enumerate, hungarian };

struct PitResult {
  std::vector<std::size_t> best_perm;
  double loss = 0.0;  // equals the chosen Assignment::cost
  std::vector<std::vector<double>> pair_matrix;  // [estimate][target]
  Tensor loss_tensor;                            // differentiable mean over the chosen pairs
};

/// Evaluates the N^2 pair losses once and picks the minimizing assignment.
PitResult pit(const PairLoss& pair_loss, std::span<const Tensor> estimates, std::span<const Tensor> targets,
              PitSolver solver = PitSolver::enumerate);

}  // namespace codecsep
