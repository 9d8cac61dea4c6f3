#pragma once

// Gradient entry points over ParamVector-shaped losses, the mixed
// second-order vector-Jacobian product used by the bi-level update, and the
// central finite-difference oracles everything is checked against.

#include "ilmar/param.hpp"
#include "ilmar/tape.hpp"

#include <functional>

namespace ilmar {

// A scalar loss built on a tape from one parameter set.
using ScalarFn = std::function<ad::NodeRef(ad::Tape&, const ParamNodes&)>;
// A scalar loss over two parameter sets (policy theta, discriminator psi).
using ScalarFn2 =
    std::function<ad::NodeRef(ad::Tape&, const ParamNodes&, const ParamNodes&)>;

double eval_scalar(const ScalarFn& f, const ParamVector& at);
double eval_scalar2(const ScalarFn2& f, const ParamVector& theta,
                    const ParamVector& psi);

// d f / d at, reverse mode.
ParamVector grad(const ScalarFn& f, const ParamVector& at);

// d/dpsi [ v . grad_theta f(theta, psi) ]: builds grad_theta with graph
// nodes, contracts with constant v, then differentiates the contraction.
ParamVector mixed_second_vjp(const ScalarFn2& f, const ParamVector& theta,
                             const ParamVector& psi, const ParamVector& v);

// Central differences over the flattened parameters.
ParamVector finite_diff_grad(const ScalarFn& f, const ParamVector& at,
                             double step = 1e-5);

// Central differences of grad_theta f along each psi coordinate, contracted
// with v; the brute-force oracle for mixed_second_vjp.
ParamVector finite_diff_mixed_vjp(const ScalarFn2& f, const ParamVector& theta,
                                  const ParamVector& psi, const ParamVector& v,
                                  double step = 1e-5);

// Max-norm relative disagreement: ||a-b||_inf / max(||a||_inf, ||b||_inf, floor).
double rel_error(const ParamVector& a, const ParamVector& b,
                 double floor = 1e-10);

}  // namespace ilmar
