#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>

#include <Eigen/Dense>

namespace lensdyn {

using TokenId = std::int32_t;

template <typename S>
using MatrixT = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using RowVectorT = Eigen::Matrix<S, 1, Eigen::Dynamic>;

using Matrix = MatrixT<float>;
using RowVector = RowVectorT<float>;

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

/// Row-wise softmax with max subtraction. Works on any dense expression.
template <typename S>
MatrixT<S> softmax_rows(const MatrixT<S>& logits) {
  MatrixT<S> out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const S mx = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - mx).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

/// Index of the largest entry; ties resolve to the lowest index.
template <typename Derived>
Eigen::Index argmax_lowest(const Eigen::DenseBase<Derived>& row) {
  Eigen::Index best = 0;
  auto best_value = row(0);
  for (Eigen::Index j = 1; j < row.size(); ++j) {
    if (row(j) > best_value) {
      best_value = row(j);
      best = j;
    }
  }
  return best;
}

/// KL(p || q) accumulated in double. Terms with p == 0 contribute nothing.
template <typename DerivedP, typename DerivedQ>
double kl_divergence(const Eigen::DenseBase<DerivedP>& p, const Eigen::DenseBase<DerivedQ>& q) {
  double kl = 0.0;
  for (Eigen::Index j = 0; j < p.size(); ++j) {
    const double pj = static_cast<double>(p(j));
    if (pj <= 0.0) continue;
    const double qj = std::max(static_cast<double>(q(j)), std::numeric_limits<double>::min());
    kl += pj * (std::log(pj) - std::log(qj));
  }
  return kl;
}

}  // namespace lensdyn
