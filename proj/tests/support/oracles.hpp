#pragma once

// Independent reference implementations used by the unit tests and the
// acceptance binary.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mococxr/diffcore/tensor.hpp"

namespace oracle {

using mococxr::diffcore::Tensor64;

// ||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-12) for one input.
struct GradError {
  std::string op;
  std::uint64_t seed = 0;
  std::size_t input = 0;
  double rel_error = 0.0;
};

// Central differences with step h on every element of every input; the
// function must return a scalar and be deterministic.
std::vector<GradError> check_gradients(const std::string& op, std::uint64_t seed,
                                       const std::function<Tensor64(const std::vector<Tensor64>&)>& f,
                                       std::vector<Tensor64> inputs, double h = 1e-5);

// Every differentiable primitive and the composite encoder on `seeds` seeds.
std::vector<GradError> gradient_suite(std::size_t seeds);

// Pair counting over all positive/negative pairs.
double brute_auroc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels);
// For each distinct threshold t (descending), classify score >= t positive and
// accumulate (recall_k - recall_{k-1}) * precision_k.
double brute_auprc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels);

// Queue contents implied by a write history: slot r holds the most recent key
// whose absolute write index a satisfies a mod K == r, or its initial row.
struct QueueModel {
  std::size_t queue_size = 0;
  std::size_t dim = 0;
  std::vector<std::vector<float>> initial;  // K rows
  std::vector<std::vector<float>> written;  // every key row in write order

  std::vector<float> row(std::size_t r) const;
  std::size_t pointer() const { return written.size() % queue_size; }
};

}  // namespace oracle
