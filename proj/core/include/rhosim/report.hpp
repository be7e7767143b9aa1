#pragma once

#include <iosfwd>
#include <string>

namespace rhosim {

/// Summarizes a completed run directory: parameter accounting (base versus
/// regularizer-head parameters and their overhead percentage), the gradient
/// norm trace extracted to trace.csv, and, when requested, per-block
/// 2-component feature projections of the tapped test-set features written as
/// pca_block<i>.csv.
void report_run(const std::string& run_dir, bool with_pca, std::ostream& out);

}  // namespace rhosim
