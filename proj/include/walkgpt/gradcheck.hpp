#pragma once

// Central finite-difference verification of analytic gradients.

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "walkgpt/tensor.hpp"

namespace walkgpt::gradcheck {

struct Options {
  double step = 1e-5;
  double tolerance = 1e-4;
  int max_entries = 64;        // per parameter array; evenly strided beyond this
  double denominator_floor = 1e-6;
  std::string corrupt_group;   // test hook: perturbs the analytic gradient of this group ("all" for every group)
  uint64_t seed = 0;
};

struct ParamError {
  std::string name;
  double max_rel_error = 0.0;
  int checked = 0;
};

struct GroupResult {
  std::string group;
  std::vector<ParamError> params;
  double max_rel_error = 0.0;
  bool passed = true;
};

// |a - n| / max(|a|, |n|, floor)
double RelativeError(double analytic, double numeric, double floor);

// `loss` must rebuild the graph from the current parameter values on each call.
GroupResult CheckGroup(const std::string& group, const std::function<ad::Var()>& loss,
                       const std::vector<std::pair<std::string, ad::Var>>& params, const Options& options);

// Every check the artifact ships: msqp, ctp, region_alignment, masked_ce,
// span_ce, dice, bce, decoder, language_model.
std::vector<GroupResult> RunStandardSuite(const Options& options);

std::string FormatTable(const std::vector<GroupResult>& results);

}  // namespace walkgpt::gradcheck
