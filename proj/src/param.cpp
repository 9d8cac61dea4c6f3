#include "ilmar/param.hpp"

#include <cmath>
#include <stdexcept>

namespace ilmar {

void ParamVector::add(const std::string& name, ad::Mat m) {
  if (has(name)) throw std::invalid_argument("duplicate parameter segment: " + name);
  segs.emplace_back(name, std::move(m));
}

bool ParamVector::has(const std::string& name) const {
  for (const auto& [n, _] : segs)
    if (n == name) return true;
  return false;
}

const ad::Mat& ParamVector::at(const std::string& name) const {
  for (const auto& [n, m] : segs)
    if (n == name) return m;
  throw std::invalid_argument("no parameter segment named " + name);
}

ad::Mat& ParamVector::at(const std::string& name) {
  for (auto& [n, m] : segs)
    if (n == name) return m;
  throw std::invalid_argument("no parameter segment named " + name);
}

Eigen::Index ParamVector::total_size() const {
  Eigen::Index n = 0;
  for (const auto& [_, m] : segs) n += m.size();
  return n;
}

Eigen::VectorXd ParamVector::flatten() const {
  Eigen::VectorXd out(total_size());
  Eigen::Index k = 0;
  for (const auto& [_, m] : segs) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) out(k++) = m(r, c);
  }
  return out;
}

ParamVector ParamVector::unflatten_like(const Eigen::VectorXd& flat) const {
  if (flat.size() != total_size())
    throw std::invalid_argument("unflatten: length mismatch");
  ParamVector out;
  Eigen::Index k = 0;
  for (const auto& [n, m] : segs) {
    ad::Mat v(m.rows(), m.cols());
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) v(r, c) = flat(k++);
    out.add(n, std::move(v));
  }
  return out;
}

bool ParamVector::same_layout(const ParamVector& other) const {
  if (segs.size() != other.segs.size()) return false;
  for (std::size_t i = 0; i < segs.size(); ++i) {
    if (segs[i].first != other.segs[i].first) return false;
    if (segs[i].second.rows() != other.segs[i].second.rows()) return false;
    if (segs[i].second.cols() != other.segs[i].second.cols()) return false;
  }
  return true;
}

namespace {
void require_layout(const ParamVector& a, const ParamVector& b, const char* op) {
  if (!a.same_layout(b)) throw std::invalid_argument(std::string(op) + ": layout mismatch");
}
}  // namespace

ParamVector pv_zeros_like(const ParamVector& p) {
  ParamVector out;
  for (const auto& [n, m] : p.segs) out.add(n, ad::Mat::Zero(m.rows(), m.cols()));
  return out;
}

ParamVector pv_add_scaled(const ParamVector& p, const ParamVector& g, double s) {
  require_layout(p, g, "pv_add_scaled");
  ParamVector out;
  for (std::size_t i = 0; i < p.segs.size(); ++i)
    out.add(p.segs[i].first, p.segs[i].second + s * g.segs[i].second);
  return out;
}

ParamVector pv_scale(const ParamVector& p, double s) {
  ParamVector out;
  for (const auto& [n, m] : p.segs) out.add(n, s * m);
  return out;
}

ParamVector pv_add(const ParamVector& a, const ParamVector& b) {
  return pv_add_scaled(a, b, 1.0);
}

double pv_dot(const ParamVector& a, const ParamVector& b) {
  require_layout(a, b, "pv_dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.segs.size(); ++i)
    s += a.segs[i].second.cwiseProduct(b.segs[i].second).sum();
  return s;
}

double pv_sq_norm(const ParamVector& a) { return pv_dot(a, a); }

double pv_max_abs(const ParamVector& a) {
  double m = 0.0;
  for (const auto& [_, v] : a.segs)
    if (v.size() > 0) m = std::max(m, v.cwiseAbs().maxCoeff());
  return m;
}

ad::NodeRef ParamNodes::at(const std::string& name) const {
  for (const auto& [n, r] : segs)
    if (n == name) return r;
  throw std::invalid_argument("no parameter node named " + name);
}

std::vector<ad::NodeRef> ParamNodes::refs() const {
  std::vector<ad::NodeRef> out;
  out.reserve(segs.size());
  for (const auto& [_, r] : segs) out.push_back(r);
  return out;
}

ParamNodes param_leaves(ad::Tape& t, const ParamVector& p) {
  ParamNodes out;
  out.segs.reserve(p.segs.size());
  for (const auto& [n, m] : p.segs) out.segs.emplace_back(n, t.leaf(m));
  return out;
}

ParamVector read_values(const ad::Tape& t, const ParamNodes& nodes) {
  ParamVector out;
  for (const auto& [n, r] : nodes.segs) out.add(n, t.val(r));
  return out;
}

}  // namespace ilmar
