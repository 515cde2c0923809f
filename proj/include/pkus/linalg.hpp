#ifndef PKUS_LINALG_HPP
#define PKUS_LINALG_HPP

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace pkus {

/// Raised when a caller breaks a dimension or shape precondition.
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Row-major dense matrix; storage order matters for the wire format.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Vec = Vector<double>;
using Mat = Matrix<double>;

namespace detail {

inline void require(bool ok, const char* what, Eigen::Index lhs, Eigen::Index rhs) {
    if (!ok) {
        throw ContractViolation(std::string(what) + " (" + std::to_string(lhs) + " vs " +
                                std::to_string(rhs) + ")");
    }
}

}  // namespace detail

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
    return m.allFinite();
}

template <typename Scalar>
Vector<Scalar> matvec(const Matrix<Scalar>& m, const Vector<Scalar>& x) {
    detail::require(m.cols() == x.size(), "matvec: cols != dim", m.cols(), x.size());
    return m * x;
}

/// scale * a * (b * x), evaluated right to left so the d_out x d_in product is never formed.
template <typename Scalar>
Vector<Scalar> lowrank_delta(const Matrix<Scalar>& a, const Matrix<Scalar>& b,
                             const Vector<Scalar>& x, Scalar scale) {
    detail::require(a.cols() == b.rows(), "lowrank_delta: rank mismatch", a.cols(), b.rows());
    detail::require(a.cols() >= 1, "lowrank_delta: rank must be >= 1", a.cols(), 1);
    detail::require(b.cols() == x.size(), "lowrank_delta: b.cols != dim", b.cols(), x.size());
    Vector<Scalar> projected = b * x;
    Vector<Scalar> out = a * projected;
    out *= scale;
    return out;
}

template <typename Scalar>
Vector<Scalar> vec_add(const Vector<Scalar>& lhs, const Vector<Scalar>& rhs) {
    detail::require(lhs.size() == rhs.size(), "vec_add: dim mismatch", lhs.size(), rhs.size());
    return lhs + rhs;
}

template <typename Scalar>
Vector<Scalar> vec_scale(const Vector<Scalar>& v, Scalar alpha) {
    return v * alpha;
}

template <typename Scalar>
Matrix<Scalar> identity(Eigen::Index n) {
    return Matrix<Scalar>::Identity(n, n);
}

}  // namespace pkus

#endif  // PKUS_LINALG_HPP
