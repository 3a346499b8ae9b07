#pragma once

#include <Eigen/Dense>

namespace m2d {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

}  // namespace m2d
