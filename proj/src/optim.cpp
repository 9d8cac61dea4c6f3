#include "ilmar/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace ilmar {

ParamVector sgd_step(const ParamVector& p, const ParamVector& g, double lr) {
  return pv_add_scaled(p, g, -lr);
}

ParamNodes sgd_step_traced(ad::Tape& t, const ParamNodes& p,
                           const std::vector<ad::NodeRef>& grads, double lr) {
  if (grads.size() != p.segs.size())
    throw std::invalid_argument("sgd_step_traced: gradient count mismatch");
  ParamNodes out;
  out.segs.reserve(p.segs.size());
  for (std::size_t i = 0; i < p.segs.size(); ++i) {
    ad::NodeRef stepped =
        ad::sub(t, p.segs[i].second, ad::scale(t, grads[i], lr));
    out.segs.emplace_back(p.segs[i].first, stepped);
  }
  return out;
}

AdamState AdamState::init(const ParamVector& like) {
  return AdamState{pv_zeros_like(like), pv_zeros_like(like), 0};
}

ParamVector adam_step(AdamState& state, const ParamVector& p,
                      const ParamVector& g, const AdamConfig& cfg) {
  if (!state.m.same_layout(p) || !p.same_layout(g))
    throw std::invalid_argument("adam_step: layout mismatch");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  ParamVector out;
  for (std::size_t i = 0; i < p.segs.size(); ++i) {
    ad::Mat& m = state.m.segs[i].second;
    ad::Mat& v = state.v.segs[i].second;
    const ad::Mat& gi = g.segs[i].second;
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * gi;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * gi.cwiseProduct(gi);
    ad::Mat mhat = m / bc1;
    ad::Mat vhat = v / bc2;
    out.add(p.segs[i].first,
            p.segs[i].second -
                cfg.lr * mhat.cwiseQuotient(
                             (vhat.cwiseSqrt().array() + cfg.eps).matrix()));
  }
  return out;
}

}  // namespace ilmar
