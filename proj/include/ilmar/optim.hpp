#pragma once

// Parameter updates.  sgd_step has a traced twin that emits tape nodes, so a
// lookahead step stays differentiable with respect to anything the gradient
// depends on; Adam is value-only and is never traced.

#include "ilmar/param.hpp"

namespace ilmar {

// theta - lr * g, plain values.
ParamVector sgd_step(const ParamVector& p, const ParamVector& g, double lr);

// Same update built from tape ops.  `grads` must come from backward() on the
// same tape; the result keeps every dependence of `grads` alive.
ParamNodes sgd_step_traced(ad::Tape& t, const ParamNodes& p,
                           const std::vector<ad::NodeRef>& grads, double lr);

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  ParamVector m;
  ParamVector v;
  long t = 0;

  static AdamState init(const ParamVector& like);
};

// Standard bias-corrected Adam; mutates `state`, returns updated params.
ParamVector adam_step(AdamState& state, const ParamVector& p,
                      const ParamVector& g, const AdamConfig& cfg);

}  // namespace ilmar
