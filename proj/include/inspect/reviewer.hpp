#pragma once

#include <optional>
#include <string>

#include "inspect/model.hpp"
#include "inspect/sample.hpp"
#include "inspect/update.hpp"

namespace inspect {

// Stand-in for the human reviewer, answering from ground truth.
//
// A wrong prediction is relabeled. A correct NG prediction on a part with a
// known defect box is judged well explained when at least `mass_threshold`
// of the saliency mass falls inside the box; every other correct prediction
// is accepted as is.
inline ReviewDecision simulated_review(const std::string& sample_id, int y_pred, const Sample& truth,
                                       const std::optional<SaliencyMap>& map, double mass_threshold,
                                       std::uint64_t timestamp = 0) {
  ReviewDecision d;
  d.sample_id = sample_id;
  d.reviewer = "simulated";
  d.timestamp = timestamp;
  if (y_pred != truth.label) {
    d.stage1 = Stage1::label_wrong;
    d.y_gt = truth.label;
    return d;
  }
  d.stage1 = Stage1::label_right;
  d.g = 1;
  if (truth.label == 0 && truth.defect_box && map) d.g = map->mass_inside(*truth.defect_box) >= mass_threshold ? 1 : 0;
  return d;
}

}  // namespace inspect
