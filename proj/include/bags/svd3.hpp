#pragma once

#include <Eigen/Core>

namespace bags {

struct SymmetricEigen3 {
    Eigen::Vector3d values;  // descending
    Eigen::Matrix3d vectors; // columns, det +1
    int sweeps = 0;
};

/// Cyclic Jacobi eigen-decomposition of a symmetric 3x3 matrix. Stops once the
/// off-diagonal Frobenius norm falls below `tolerance` times the matrix norm.
SymmetricEigen3 jacobi_eigen3(const Eigen::Matrix3d& s, double tolerance = 1e-12,
                              int max_sweeps = 30);

/// m = u * diag(sigma) * v^T with sigma non-negative and descending, u and v orthonormal.
struct Svd3 {
    Eigen::Matrix3d u;
    Eigen::Vector3d sigma;
    Eigen::Matrix3d v;
};

/// Throws NumericError on non-finite input.
Svd3 svd3(const Eigen::Matrix3d& m);

/// Closest proper rotation to `m` in the Frobenius sense (polar factor with the
/// reflection case folded into the smallest singular direction). Matrices that are
/// already rotations to within 1e-12 are returned unchanged.
Eigen::Matrix3d nearest_rotation(const Eigen::Matrix3d& m);

} // namespace bags
