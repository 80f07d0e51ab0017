#pragma once

#include <Eigen/Core>

namespace rdperm {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

} // namespace rdperm
