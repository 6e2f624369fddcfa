#pragma once

#include <Eigen/Dense>

namespace fsqs {

// Rows are samples, columns are features.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

}  // namespace fsqs
