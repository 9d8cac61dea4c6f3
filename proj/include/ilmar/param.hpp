#pragma once

// Named, ordered parameter segments plus their tape-side mirror.
//
// ParamVector is the value-world object (what optimizers step and what
// checkpoints store); ParamNodes is the same segment list as tape leaves so
// losses can be built against it.  flatten()/unflatten() give a bit-exact
// round trip in row-major segment order, which the finite-difference oracles
// index into.

#include "ilmar/tape.hpp"

#include <string>
#include <utility>
#include <vector>

namespace ilmar {

struct ParamVector {
  std::vector<std::pair<std::string, ad::Mat>> segs;

  void add(const std::string& name, ad::Mat m);
  bool has(const std::string& name) const;
  const ad::Mat& at(const std::string& name) const;
  ad::Mat& at(const std::string& name);
  Eigen::Index total_size() const;
  std::size_t count() const { return segs.size(); }

  Eigen::VectorXd flatten() const;
  // Rebuilds a vector with this one's names/shapes from flat data.
  ParamVector unflatten_like(const Eigen::VectorXd& flat) const;

  bool same_layout(const ParamVector& other) const;
};

// Elementwise helpers over matching layouts.
ParamVector pv_zeros_like(const ParamVector& p);
ParamVector pv_add_scaled(const ParamVector& p, const ParamVector& g, double s);  // p + s*g
ParamVector pv_scale(const ParamVector& p, double s);
ParamVector pv_add(const ParamVector& a, const ParamVector& b);
double pv_dot(const ParamVector& a, const ParamVector& b);
double pv_sq_norm(const ParamVector& a);
double pv_max_abs(const ParamVector& a);

struct ParamNodes {
  std::vector<std::pair<std::string, ad::NodeRef>> segs;
  ad::NodeRef at(const std::string& name) const;
  std::vector<ad::NodeRef> refs() const;
};

// Inserts every segment as a leaf on the tape.
ParamNodes param_leaves(ad::Tape& t, const ParamVector& p);

// Reads the values of per-segment nodes back into a ParamVector with the
// same names (used to materialize gradients).
ParamVector read_values(const ad::Tape& t, const ParamNodes& nodes);

}  // namespace ilmar
