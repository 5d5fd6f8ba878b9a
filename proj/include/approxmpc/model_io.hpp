#pragma once

#include <string>

#include "approxmpc/nn_model.hpp"
#include "approxmpc/pod.hpp"
#include "approxmpc/subspace_id.hpp"
#include "approxmpc/tpwl.hpp"

namespace approxmpc {

/// JSON model files. Matrices are stored as {"rows", "cols", "data"} with
/// row-major data; every file carries a "kind" tag checked on load.

void save_pod_basis(const std::string& path, const PodBasis& basis);
PodBasis load_pod_basis(const std::string& path);

/// The POD basis (if attached) is stored inline.
void save_tpwl(const std::string& path, const TpwlModel& model);
TpwlModel load_tpwl(const std::string& path);

void save_lti(const std::string& path, const LinearStateSpaceModel& model);
LinearStateSpaceModel load_lti(const std::string& path);

void save_nn(const std::string& path, const NNPredictor& model);
NNPredictor load_nn(const std::string& path);

/// "kind" field of a model file.
std::string model_file_kind(const std::string& path);

}  // namespace approxmpc
