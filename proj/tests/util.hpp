#pragma once

#include <torch/torch.h>

#include "oracles.hpp"

inline torch::Tensor to_tensor(const oracle::Matrix& m) {
  auto t = torch::empty({static_cast<long>(m.size()), static_cast<long>(m[0].size())}, torch::kFloat64);
  auto a = t.accessor<double, 2>();
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[0].size(); ++j) a[static_cast<long>(i)][static_cast<long>(j)] = m[i][j];
  return t;
}

inline oracle::Matrix to_matrix(const torch::Tensor& t) {
  auto c = t.to(torch::kFloat64).contiguous();
  auto a = c.accessor<double, 2>();
  oracle::Matrix m(static_cast<std::size_t>(c.size(0)), std::vector<double>(static_cast<std::size_t>(c.size(1))));
  for (long i = 0; i < c.size(0); ++i)
    for (long j = 0; j < c.size(1); ++j) m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = a[i][j];
  return m;
}

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().max().item<double>();
}
