#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sal_lab/core/autograd.hpp"
#include "sal_lab/core/gradcheck.hpp"
#include "sal_lab/core/ops.hpp"

namespace sal_lab::testing {

inline Tensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0,
                                    double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<double> t(shape);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

using VarOp = std::function<Var<double>(const std::vector<Var<double>>&)>;

/// Largest relative error between backward() and central differences over all
/// coordinates of all inputs. The op output is contracted with a fixed random
/// tensor so every output element contributes.
inline double max_gradient_error(const VarOp& op, const std::vector<Tensor<double>>& inputs,
                                 std::uint64_t seed = 1, double h = 1e-4, double floor = 1e-6) {
  std::mt19937_64 rng(seed);
  std::vector<Var<double>> params;
  for (const auto& t : inputs) params.push_back(Var<double>::parameter(t));
  const Var<double> probe_out = op(params);
  const auto weights = Var<double>::constant(random_tensor(probe_out.shape(), rng));
  auto loss_of = [&](const std::vector<Var<double>>& vs) {
    return ops::sum(ops::mul(op(vs), weights));
  };
  const auto grads = backward(loss_of(params));

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor<double> analytic = grads.of(params[k]);
    ScalarFunction<double> f = [&](const Tensor<double>& x) {
      NoGradGuard guard;
      std::vector<Var<double>> vs;
      for (std::size_t j = 0; j < inputs.size(); ++j) {
        vs.push_back(Var<double>::constant(j == k ? x : inputs[j]));
      }
      return loss_of(vs).item();
    };
    const Tensor<double> numeric = finite_difference_gradient(f, inputs[k], h);
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      worst = std::max(worst, relative_error(analytic[i], numeric[i], floor));
    }
  }
  return worst;
}

/// Naive block mean of W* [R, C, d_h, d_v] onto an r x c grid, laid out as
/// [(j*c + l)*d_h + m, n]. Deliberately loop-based and independent of the library.
inline Tensor<double> brute_adapt(const Tensor<double>& w_star, std::size_t r, std::size_t c) {
  const std::size_t R = w_star.shape()[0], C = w_star.shape()[1];
  const std::size_t dh = w_star.shape()[2], dv = w_star.shape()[3];
  const std::size_t dr = R / r, dc = C / c;
  Tensor<double> w(Shape{r * c * dh, dv});
  for (std::size_t j = 0; j < r; ++j)
    for (std::size_t l = 0; l < c; ++l)
      for (std::size_t m = 0; m < dh; ++m)
        for (std::size_t n = 0; n < dv; ++n) {
          double acc = 0.0;
          for (std::size_t p = j * dr; p < (j + 1) * dr; ++p)
            for (std::size_t q = l * dc; q < (l + 1) * dc; ++q) acc += w_star.at({p, q, m, n});
          w[((j * c + l) * dh + m) * dv + n] = acc / static_cast<double>(dr * dc);
        }
  return w;
}

/// Dense W^T g + b with W [rows, cols], g [rows].
inline std::vector<double> brute_affine(const Tensor<double>& w, std::span<const double> g,
                                        std::span<const double> b) {
  const std::size_t rows = w.shape()[0], cols = w.shape()[1];
  std::vector<double> out(cols, 0.0);
  for (std::size_t n = 0; n < cols; ++n) {
    double acc = b.empty() ? 0.0 : b[n];
    for (std::size_t i = 0; i < rows; ++i) acc += w[i * cols + n] * g[i];
    out[n] = acc;
  }
  return out;
}

/// Fresh scratch directory under the system temp directory, emptied on creation.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("sal_lab_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace sal_lab::testing
