#pragma once

#include <Eigen/Dense>
#include <limits>
#include <vector>

namespace sbir {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// Batches are row-major in meaning: row i of a ParameterBatch / DataBatch
// holds the i-th parameter vector / simulator output.
using ParameterBatch = Matrix;
using DataBatch = Matrix;

using IndexVec = std::vector<Index>;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kLogTwoPi = 1.8378770664093454836;

}  // namespace sbir
