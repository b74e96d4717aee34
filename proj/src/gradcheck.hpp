#pragma once

#include <ostream>

namespace cprompt {

struct GradcheckResult {
    bool pass = false;
    double max_err = 0.0;  // worst scaled error (or gradient magnitude) observed
    double seconds = 0.0;
};

// The sharpening loss has the closed-form gradient softmax(l) - softmax(l/tau).
// Checked for 100 random logit vectors of dim 2..20 at three temperatures,
// against both the closed form and central finite differences (targets pinned
// at the base point, since the gradient is defined through the detached
// sharpened distribution). Threshold 1e-6.
GradcheckResult gradcheck_sharpening_identity();

// At tau = 1 the sharpened target equals the prediction and the gradient
// vanishes identically. Threshold 1e-12.
GradcheckResult gradcheck_tau1_nullity();

// Composed training objective on a two-task toy state (embed dim 8, two
// classes per task): autodiff gradients of every trainable parameter match
// central finite differences of the pinned-target loss. Threshold 1e-5.
GradcheckResult gradcheck_full_loss();

// Runs all three, one line each; true when everything passed.
bool run_gradcheck(std::ostream& out);

}  // namespace cprompt
