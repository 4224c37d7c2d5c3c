#pragma once

#include <Eigen/Core>

namespace funnel {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Binary reward chain r_1..r_J; monotone non-increasing by construction.
using RewardVector = Eigen::VectorXi;

}  // namespace funnel
