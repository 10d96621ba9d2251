#pragma once

#include <string>
#include <vector>

#include "ecm/config.hpp"
#include "ecm/training.hpp"

namespace ecm {

struct BudgetRow {
  double alpha = 0.0;
  double expected_tokens = 0.0;   // closed form
  double mc_tokens = 0.0;         // Monte-Carlo estimate of the same expectation
  double ratio_vs_full = 1.0;     // expected_tokens / expected_tokens(alpha = 0)
  double step_flops = 0.0;        // full-pass FLOPs scaled by the expected fraction
};

// One row per alpha, in the given order.
std::vector<BudgetRow> budget_report(const RunConfig& cfg, const std::vector<double>& alphas,
                                     int mc_draws = 20000);

// "alpha,expected_tokens,mc_tokens,ratio_vs_full,step_flops" plus one row each.
void write_budget_csv(const std::vector<BudgetRow>& rows, const std::string& path);

// Bar chart of ratio_vs_full per alpha; plain SVG 1.1, well-formed XML.
void write_budget_svg(const std::vector<BudgetRow>& rows, const std::string& path);

}  // namespace ecm
