#include "bags/svd3.hpp"

#include "bags/error.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>

namespace bags {

namespace {

double off_diagonal_norm(const Eigen::Matrix3d& a) {
    return std::sqrt(2.0 * (a(0, 1) * a(0, 1) + a(0, 2) * a(0, 2) + a(1, 2) * a(1, 2)));
}

// Any unit vector orthogonal to the unit vector `a`.
Eigen::Vector3d orthogonal_unit(const Eigen::Vector3d& a) {
    Eigen::Index axis = 0;
    a.cwiseAbs().minCoeff(&axis);
    Eigen::Vector3d e = Eigen::Vector3d::Zero();
    e[axis] = 1.0;
    return a.cross(e).normalized();
}

} // namespace

SymmetricEigen3 jacobi_eigen3(const Eigen::Matrix3d& s, double tolerance, int max_sweeps) {
    Eigen::Matrix3d a = 0.5 * (s + s.transpose());
    Eigen::Matrix3d v = Eigen::Matrix3d::Identity();
    const double scale = a.norm();
    SymmetricEigen3 out;

    constexpr std::array<std::array<int, 2>, 3> pairs{{{0, 1}, {0, 2}, {1, 2}}};
    int sweep = 0;
    while (sweep < max_sweeps && off_diagonal_norm(a) > tolerance * scale) {
        for (const auto& [p, q] : pairs) {
            const double apq = a(p, q);
            if (apq == 0.0) {
                continue;
            }
            const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
            const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                             (std::abs(theta) + std::sqrt(theta * theta + 1.0));
            const double c = 1.0 / std::sqrt(t * t + 1.0);
            const double sn = t * c;
            Eigen::Matrix3d rot = Eigen::Matrix3d::Identity();
            rot(p, p) = c;
            rot(q, q) = c;
            rot(p, q) = sn;
            rot(q, p) = -sn;
            a = rot.transpose() * a * rot;
            a(p, q) = 0.0;
            a(q, p) = 0.0;
            v = v * rot;
        }
        ++sweep;
    }
    out.sweeps = sweep;

    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(),
                     [&](int i, int j) { return a(i, i) > a(j, j); });
    for (int k = 0; k < 3; ++k) {
        out.values[k] = a(order[k], order[k]);
        out.vectors.col(k) = v.col(order[k]);
    }
    if (out.vectors.determinant() < 0.0) {
        out.vectors.col(2) = -out.vectors.col(2);
    }
    return out;
}

Svd3 svd3(const Eigen::Matrix3d& m) {
    if (!m.allFinite()) {
        throw NumericError("svd3: non-finite input");
    }
    const auto eig = jacobi_eigen3(m.transpose() * m);
    Svd3 out;
    out.v = eig.vectors;

    const Eigen::Vector3d m1 = m * out.v.col(0);
    const double s1 = m1.norm();
    if (s1 == 0.0) {
        out.u = out.v;
        out.sigma.setZero();
        return out;
    }
    const Eigen::Vector3d u1 = m1 / s1;

    const Eigen::Vector3d m2 = m * out.v.col(1);
    Eigen::Vector3d w2 = m2 - u1.dot(m2) * u1;
    w2 -= u1.dot(w2) * u1;
    double s2 = w2.norm();
    Eigen::Vector3d u2;
    if (s2 > 1e-300) {
        u2 = w2 / s2;
    } else {
        u2 = orthogonal_unit(u1);
        s2 = 0.0;
    }
    Eigen::Vector3d u3 = u1.cross(u2);
    double s3 = u3.dot(m * out.v.col(2));
    if (s3 < 0.0) {
        u3 = -u3;
        s3 = -s3;
    }

    out.u.col(0) = u1;
    out.u.col(1) = u2;
    out.u.col(2) = u3;
    s2 = std::min(s2, s1);
    s3 = std::min(s3, s2);
    out.sigma = Eigen::Vector3d(s1, s2, s3);
    return out;
}

Eigen::Matrix3d nearest_rotation(const Eigen::Matrix3d& m) {
    if (!m.allFinite()) {
        throw NumericError("nearest_rotation: non-finite input");
    }
    const double orth = (m.transpose() * m - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    if (orth <= 1e-12 && m.determinant() > 0.0) {
        return m;
    }
    auto svd = svd3(m);
    Eigen::Matrix3d r = svd.u * svd.v.transpose();
    if (r.determinant() < 0.0) {
        svd.u.col(2) = -svd.u.col(2);
        r = svd.u * svd.v.transpose();
    }
    return r;
}

} // namespace bags
