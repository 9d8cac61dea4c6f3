#include "ilmar/grad.hpp"

#include <cmath>

namespace ilmar {

double eval_scalar(const ScalarFn& f, const ParamVector& at) {
  ad::Tape t;
  ParamNodes p = param_leaves(t, at);
  return t.val(f(t, p))(0, 0);
}

double eval_scalar2(const ScalarFn2& f, const ParamVector& theta,
                    const ParamVector& psi) {
  ad::Tape t;
  ParamNodes pt = param_leaves(t, theta);
  ParamNodes pp = param_leaves(t, psi);
  return t.val(f(t, pt, pp))(0, 0);
}

ParamVector grad(const ScalarFn& f, const ParamVector& at) {
  ad::Tape t;
  ParamNodes p = param_leaves(t, at);
  ad::NodeRef loss = f(t, p);
  std::vector<ad::NodeRef> gs = t.backward(loss, p.refs());
  ParamVector out;
  for (std::size_t i = 0; i < p.segs.size(); ++i)
    out.add(p.segs[i].first, t.val(gs[i]));
  return out;
}

ParamVector mixed_second_vjp(const ScalarFn2& f, const ParamVector& theta,
                             const ParamVector& psi, const ParamVector& v) {
  if (!v.same_layout(theta))
    throw std::invalid_argument("mixed_second_vjp: v must match theta's layout");
  ad::Tape t;
  ParamNodes pt = param_leaves(t, theta);
  ParamNodes pp = param_leaves(t, psi);
  ad::NodeRef loss = f(t, pt, pp);
  std::vector<ad::NodeRef> gtheta = t.backward(loss, pt.refs());

  // s = sum_i v_i * (grad_theta f)_i with v held constant.
  ad::NodeRef s{-1};
  for (std::size_t i = 0; i < pt.segs.size(); ++i) {
    ad::NodeRef vi = t.leaf(v.segs[i].second);
    ad::NodeRef term = ad::sum_all(t, ad::mul(t, vi, gtheta[i]));
    s = s.valid() ? ad::add(t, s, term) : term;
  }
  std::vector<ad::NodeRef> gpsi = t.backward(s, pp.refs());
  ParamVector out;
  for (std::size_t i = 0; i < pp.segs.size(); ++i)
    out.add(pp.segs[i].first, t.val(gpsi[i]));
  return out;
}

ParamVector finite_diff_grad(const ScalarFn& f, const ParamVector& at,
                             double step) {
  Eigen::VectorXd flat = at.flatten();
  Eigen::VectorXd g(flat.size());
  for (Eigen::Index i = 0; i < flat.size(); ++i) {
    Eigen::VectorXd hi = flat, lo = flat;
    hi(i) += step;
    lo(i) -= step;
    g(i) = (eval_scalar(f, at.unflatten_like(hi)) -
            eval_scalar(f, at.unflatten_like(lo))) /
           (2.0 * step);
  }
  return at.unflatten_like(g);
}

ParamVector finite_diff_mixed_vjp(const ScalarFn2& f, const ParamVector& theta,
                                  const ParamVector& psi, const ParamVector& v,
                                  double step) {
  auto grad_theta_at = [&](const ParamVector& psi_pt) {
    ScalarFn g = [&](ad::Tape& t, const ParamNodes& pt) {
      ParamNodes pp = param_leaves(t, psi_pt);
      return f(t, pt, pp);
    };
    return grad(g, theta);
  };

  Eigen::VectorXd flat = psi.flatten();
  Eigen::VectorXd out(flat.size());
  for (Eigen::Index i = 0; i < flat.size(); ++i) {
    Eigen::VectorXd hi = flat, lo = flat;
    hi(i) += step;
    lo(i) -= step;
    ParamVector ghi = grad_theta_at(psi.unflatten_like(hi));
    ParamVector glo = grad_theta_at(psi.unflatten_like(lo));
    out(i) = pv_dot(v, pv_scale(pv_add_scaled(ghi, glo, -1.0), 1.0 / (2.0 * step)));
  }
  return psi.unflatten_like(out);
}

double rel_error(const ParamVector& a, const ParamVector& b, double floor) {
  const double diff = pv_max_abs(pv_add_scaled(a, b, -1.0));
  const double denom = std::max({pv_max_abs(a), pv_max_abs(b), floor});
  return diff / denom;
}

}  // namespace ilmar
