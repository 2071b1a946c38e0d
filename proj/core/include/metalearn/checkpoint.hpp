#pragma once

#include <limits>
#include <string>

#include "metalearn/model.hpp"
#include "metalearn/outer_loop.hpp"

namespace metalearn {

struct Checkpoint {
  MetaParams params;
  AdamState adam;
  long step = 0;
  double best_val = std::numeric_limits<double>::quiet_NaN();
};

// Single-file JSON snapshot of every parameter tensor (frozen ones included,
// so a load is runnable without the original pre-training), the optimizer
// moments, and enough of the model spec to rebuild the layout. Writes go
// through a temp file and rename.
void save_checkpoint(const std::string& path, MetaParams& params,
                     const AdamState& adam, long step, double best_val);

Checkpoint load_checkpoint(const std::string& path);

}  // namespace metalearn
