// SPDX-License-Identifier: Apache-2.0
// Double-precision helpers shared by kernels.cpp and metrics.cpp.
#pragma once

#include <Eigen/Dense>

namespace nextshot::detail {

/// Throws std::invalid_argument naming the violated property.
void check_symmetric_psd(const Eigen::MatrixXd& m, double sym_tol, double neg_tol);

/// Principal square root via symmetric eigendecomposition; eigenvalues below
/// zero (already within tolerance) are clamped.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m);

}  // namespace nextshot::detail
