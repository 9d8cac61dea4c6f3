#include "ilmar/tape.hpp"

#include <cmath>

namespace ilmar::ad {

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::neg: return "neg";
    case Op::scale: return "scale";
    case Op::add_const: return "add_const";
    case Op::pow_const: return "pow_const";
    case Op::clamp: return "clamp";
    case Op::matmul_nn: return "matmul_nn";
    case Op::matmul_nt: return "matmul_nt";
    case Op::matmul_tn: return "matmul_tn";
    case Op::affine: return "affine";
    case Op::vtanh: return "tanh";
    case Op::vrelu: return "relu";
    case Op::vsigmoid: return "sigmoid";
    case Op::vexp: return "exp";
    case Op::vlog: return "log";
    case Op::sum_all: return "sum_all";
    case Op::row_sum: return "row_sum";
    case Op::col_sum: return "col_sum";
    case Op::logsumexp_rows: return "logsumexp_rows";
    case Op::broadcast_rows: return "broadcast_rows";
    case Op::broadcast_cols: return "broadcast_cols";
    case Op::concat_cols: return "concat_cols";
    case Op::slice_cols: return "slice_cols";
    case Op::pad_cols: return "pad_cols";
  }
  return "?";
}

const Tape::Node& Tape::node_at(NodeRef r) const {
  if (!r.valid() || static_cast<std::size_t>(r.i) >= nodes_.size())
    throw TapeError("invalid node reference");
  return nodes_[static_cast<std::size_t>(r.i)];
}

NodeRef Tape::push(Op op, std::int32_t a, std::int32_t b, std::int32_t c,
                   Mat val, double d0, double d1) {
  const auto idx = static_cast<std::int32_t>(nodes_.size());
  if (check_finite && !val.allFinite()) {
    throw NonFiniteError("non-finite value produced by node " +
                             std::to_string(idx) + " (" + op_name(op) + ")",
                         idx);
  }
  nodes_.push_back(Node{op, a, b, c, d0, d1, std::move(val)});
  return NodeRef{idx};
}

NodeRef Tape::leaf(Mat v) { return push(Op::leaf, -1, -1, -1, std::move(v)); }

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw TapeError(what);
}

void require_same_shape(const Tape& t, NodeRef x, NodeRef y, const char* op) {
  if (t.rows(x) != t.rows(y) || t.cols(x) != t.cols(y))
    throw TapeError(std::string(op) + ": shape mismatch");
}

}  // namespace

NodeRef add(Tape& t, NodeRef x, NodeRef y) {
  require_same_shape(t, x, y, "add");
  return t.push(Op::add, x.i, y.i, -1, t.val(x) + t.val(y));
}

NodeRef sub(Tape& t, NodeRef x, NodeRef y) {
  require_same_shape(t, x, y, "sub");
  return t.push(Op::sub, x.i, y.i, -1, t.val(x) - t.val(y));
}

NodeRef mul(Tape& t, NodeRef x, NodeRef y) {
  require_same_shape(t, x, y, "mul");
  return t.push(Op::mul, x.i, y.i, -1, t.val(x).cwiseProduct(t.val(y)));
}

NodeRef neg(Tape& t, NodeRef x) {
  return t.push(Op::neg, x.i, -1, -1, -t.val(x));
}

NodeRef scale(Tape& t, NodeRef x, double k) {
  return t.push(Op::scale, x.i, -1, -1, k * t.val(x), k);
}

NodeRef add_const(Tape& t, NodeRef x, double k) {
  return t.push(Op::add_const, x.i, -1, -1, t.val(x).array() + k, k);
}

NodeRef pow_const(Tape& t, NodeRef x, double p) {
  return t.push(Op::pow_const, x.i, -1, -1, t.val(x).array().pow(p), p);
}

NodeRef clamp(Tape& t, NodeRef x, double lo, double hi) {
  require(lo < hi, "clamp: lo must be < hi");
  return t.push(Op::clamp, x.i, -1, -1,
                t.val(x).array().max(lo).min(hi), lo, hi);
}

NodeRef matmul(Tape& t, NodeRef x, NodeRef y) {
  require(t.cols(x) == t.rows(y), "matmul: inner dimensions differ");
  return t.push(Op::matmul_nn, x.i, y.i, -1, t.val(x) * t.val(y));
}

NodeRef matmul_nt(Tape& t, NodeRef x, NodeRef y) {
  require(t.cols(x) == t.cols(y), "matmul_nt: inner dimensions differ");
  return t.push(Op::matmul_nt, x.i, y.i, -1, t.val(x) * t.val(y).transpose());
}

NodeRef matmul_tn(Tape& t, NodeRef x, NodeRef y) {
  require(t.rows(x) == t.rows(y), "matmul_tn: inner dimensions differ");
  return t.push(Op::matmul_tn, x.i, y.i, -1, t.val(x).transpose() * t.val(y));
}

NodeRef affine(Tape& t, NodeRef x, NodeRef w, NodeRef b) {
  require(t.cols(x) == t.rows(w), "affine: inner dimensions differ");
  require(t.rows(b) == 1 && t.cols(b) == t.cols(w), "affine: bias must be 1 x cols(w)");
  Mat v = t.val(x) * t.val(w);
  v.rowwise() += t.val(b).row(0);
  return t.push(Op::affine, x.i, w.i, b.i, std::move(v));
}

NodeRef vtanh(Tape& t, NodeRef x) {
  return t.push(Op::vtanh, x.i, -1, -1, t.val(x).array().tanh());
}

NodeRef vrelu(Tape& t, NodeRef x) {
  return t.push(Op::vrelu, x.i, -1, -1, t.val(x).cwiseMax(0.0));
}

NodeRef vsigmoid(Tape& t, NodeRef x) {
  // Stable in both tails.
  Mat v = t.val(x).unaryExpr([](double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
  });
  return t.push(Op::vsigmoid, x.i, -1, -1, std::move(v));
}

NodeRef vexp(Tape& t, NodeRef x) {
  return t.push(Op::vexp, x.i, -1, -1, t.val(x).array().exp());
}

NodeRef vlog(Tape& t, NodeRef x) {
  return t.push(Op::vlog, x.i, -1, -1, t.val(x).array().log());
}

NodeRef sum_all(Tape& t, NodeRef x) {
  Mat v(1, 1);
  v(0, 0) = t.val(x).sum();
  return t.push(Op::sum_all, x.i, -1, -1, std::move(v));
}

NodeRef row_sum(Tape& t, NodeRef x) {
  return t.push(Op::row_sum, x.i, -1, -1, t.val(x).rowwise().sum());
}

NodeRef col_sum(Tape& t, NodeRef x) {
  return t.push(Op::col_sum, x.i, -1, -1, t.val(x).colwise().sum());
}

NodeRef logsumexp_rows(Tape& t, NodeRef x) {
  const Mat& m = t.val(x);
  Mat v(m.rows(), 1);
  for (Index r = 0; r < m.rows(); ++r) {
    const double mx = m.row(r).maxCoeff();
    v(r, 0) = mx + std::log((m.row(r).array() - mx).exp().sum());
  }
  return t.push(Op::logsumexp_rows, x.i, -1, -1, std::move(v));
}

NodeRef broadcast_rows(Tape& t, NodeRef x, Index n) {
  require(t.rows(x) == 1, "broadcast_rows: input must have one row");
  return t.push(Op::broadcast_rows, x.i, -1, -1, t.val(x).replicate(n, 1));
}

NodeRef broadcast_cols(Tape& t, NodeRef x, Index n) {
  require(t.cols(x) == 1, "broadcast_cols: input must have one column");
  return t.push(Op::broadcast_cols, x.i, -1, -1, t.val(x).replicate(1, n));
}

NodeRef concat_cols(Tape& t, NodeRef x, NodeRef y) {
  require(t.rows(x) == t.rows(y), "concat_cols: row counts differ");
  Mat v(t.rows(x), t.cols(x) + t.cols(y));
  v << t.val(x), t.val(y);
  return t.push(Op::concat_cols, x.i, y.i, -1, std::move(v));
}

NodeRef slice_cols(Tape& t, NodeRef x, Index begin, Index n) {
  require(begin >= 0 && n > 0 && begin + n <= t.cols(x), "slice_cols: range out of bounds");
  return t.push(Op::slice_cols, x.i, -1, -1, t.val(x).middleCols(begin, n),
                static_cast<double>(begin), static_cast<double>(n));
}

NodeRef pad_cols(Tape& t, NodeRef x, Index total, Index begin) {
  require(begin >= 0 && begin + t.cols(x) <= total, "pad_cols: range out of bounds");
  Mat v = Mat::Zero(t.rows(x), total);
  v.middleCols(begin, t.cols(x)) = t.val(x);
  return t.push(Op::pad_cols, x.i, -1, -1, std::move(v),
                static_cast<double>(total), static_cast<double>(begin));
}

NodeRef mean_all(Tape& t, NodeRef x) {
  const double n = static_cast<double>(t.rows(x) * t.cols(x));
  return scale(t, sum_all(t, x), 1.0 / n);
}

// ---- backward --------------------------------------------------------------

std::vector<NodeRef> Tape::backward(NodeRef root, std::span<const NodeRef> wrt) {
  const Node& rn = node_at(root);
  require(rn.val.rows() == 1 && rn.val.cols() == 1, "backward: root must be 1x1");

  const std::int32_t n = root.i + 1;

  // Nodes that influence the root (walk parent links downward from root).
  std::vector<unsigned char> inf(static_cast<std::size_t>(n), 0);
  inf[static_cast<std::size_t>(root.i)] = 1;
  for (std::int32_t i = root.i; i >= 0; --i) {
    if (!inf[static_cast<std::size_t>(i)]) continue;
    const Node& nd = nodes_[static_cast<std::size_t>(i)];
    if (nd.a >= 0) inf[static_cast<std::size_t>(nd.a)] = 1;
    if (nd.b >= 0) inf[static_cast<std::size_t>(nd.b)] = 1;
    if (nd.c >= 0) inf[static_cast<std::size_t>(nd.c)] = 1;
  }

  // Nodes whose adjoint is needed: a wrt node or anything fed by one.
  std::vector<unsigned char> needs(static_cast<std::size_t>(n), 0);
  for (NodeRef w : wrt) {
    if (w.valid() && w.i < n) needs[static_cast<std::size_t>(w.i)] = 1;
  }
  for (std::int32_t i = 0; i < n; ++i) {
    if (needs[static_cast<std::size_t>(i)]) continue;
    const Node& nd = nodes_[static_cast<std::size_t>(i)];
    const bool hit = (nd.a >= 0 && needs[static_cast<std::size_t>(nd.a)]) ||
                     (nd.b >= 0 && needs[static_cast<std::size_t>(nd.b)]) ||
                     (nd.c >= 0 && needs[static_cast<std::size_t>(nd.c)]);
    if (hit) needs[static_cast<std::size_t>(i)] = 1;
  }

  std::vector<std::int32_t> adj(static_cast<std::size_t>(n), -1);
  Tape& t = *this;

  auto accumulate = [&](std::int32_t parent, NodeRef g) {
    auto& slot = adj[static_cast<std::size_t>(parent)];
    slot = slot < 0 ? g.i : add(t, NodeRef{slot}, g).i;
  };

  adj[static_cast<std::size_t>(root.i)] = leaf(Mat::Ones(1, 1)).i;

  for (std::int32_t i = root.i; i >= 0; --i) {
    if (!inf[static_cast<std::size_t>(i)] || adj[static_cast<std::size_t>(i)] < 0)
      continue;
    // Snapshot: the node vector may reallocate while we append vjp nodes.
    const Node nd = nodes_[static_cast<std::size_t>(i)];
    if (nd.op == Op::leaf) continue;

    const NodeRef g{adj[static_cast<std::size_t>(i)]};
    const NodeRef self{i};
    const NodeRef pa{nd.a}, pb{nd.b}, pc{nd.c};
    const bool na = nd.a >= 0 && needs[static_cast<std::size_t>(nd.a)];
    const bool nb = nd.b >= 0 && needs[static_cast<std::size_t>(nd.b)];
    const bool nc = nd.c >= 0 && needs[static_cast<std::size_t>(nd.c)];
    if (!na && !nb && !nc) continue;

    switch (nd.op) {
      case Op::add:
        if (na) accumulate(nd.a, g);
        if (nb) accumulate(nd.b, g);
        break;
      case Op::sub:
        if (na) accumulate(nd.a, g);
        if (nb) accumulate(nd.b, neg(t, g));
        break;
      case Op::mul:
        if (na) accumulate(nd.a, mul(t, g, pb));
        if (nb) accumulate(nd.b, mul(t, g, pa));
        break;
      case Op::neg:
        if (na) accumulate(nd.a, neg(t, g));
        break;
      case Op::scale:
        if (na) accumulate(nd.a, scale(t, g, nd.d0));
        break;
      case Op::add_const:
        if (na) accumulate(nd.a, g);
        break;
      case Op::pow_const:
        // d/dx x^p = p * x^(p-1); exact second order via the same op family.
        if (na) accumulate(nd.a, scale(t, mul(t, g, pow_const(t, pa, nd.d0 - 1.0)), nd.d0));
        break;
      case Op::clamp: {
        if (na) {
          Mat m = ((t.val(pa).array() > nd.d0) && (t.val(pa).array() < nd.d1))
                      .cast<double>();
          accumulate(nd.a, mul(t, g, leaf(std::move(m))));
        }
        break;
      }
      case Op::matmul_nn:
        if (na) accumulate(nd.a, matmul_nt(t, g, pb));
        if (nb) accumulate(nd.b, matmul_tn(t, pa, g));
        break;
      case Op::matmul_nt:
        if (na) accumulate(nd.a, matmul(t, g, pb));
        if (nb) accumulate(nd.b, matmul_tn(t, g, pa));
        break;
      case Op::matmul_tn:
        if (na) accumulate(nd.a, matmul_nt(t, pb, g));
        if (nb) accumulate(nd.b, matmul(t, pa, g));
        break;
      case Op::affine:
        if (na) accumulate(nd.a, matmul_nt(t, g, pb));
        if (nb) accumulate(nd.b, matmul_tn(t, pa, g));
        if (nc) accumulate(nd.c, col_sum(t, g));
        break;
      case Op::vtanh:
        // 1 - tanh^2, expressed through the output node so higher orders work.
        if (na) accumulate(nd.a, mul(t, g, add_const(t, neg(t, mul(t, self, self)), 1.0)));
        break;
      case Op::vrelu: {
        if (na) {
          Mat m = (t.val(pa).array() > 0.0).cast<double>();
          accumulate(nd.a, mul(t, g, leaf(std::move(m))));
        }
        break;
      }
      case Op::vsigmoid:
        if (na) accumulate(nd.a, mul(t, mul(t, g, self), add_const(t, neg(t, self), 1.0)));
        break;
      case Op::vexp:
        if (na) accumulate(nd.a, mul(t, g, self));
        break;
      case Op::vlog:
        if (na) accumulate(nd.a, mul(t, g, pow_const(t, pa, -1.0)));
        break;
      case Op::sum_all: {
        if (na) {
          NodeRef r1 = broadcast_cols(t, g, t.cols(pa));
          accumulate(nd.a, broadcast_rows(t, r1, t.rows(pa)));
        }
        break;
      }
      case Op::row_sum:
        if (na) accumulate(nd.a, broadcast_cols(t, g, t.cols(pa)));
        break;
      case Op::col_sum:
        if (na) accumulate(nd.a, broadcast_rows(t, g, t.rows(pa)));
        break;
      case Op::logsumexp_rows: {
        // softmax(x) recomputed stably from x - lse(x).
        if (na) {
          NodeRef sm = vexp(t, sub(t, pa, broadcast_cols(t, self, t.cols(pa))));
          accumulate(nd.a, mul(t, broadcast_cols(t, g, t.cols(pa)), sm));
        }
        break;
      }
      case Op::broadcast_rows:
        if (na) accumulate(nd.a, col_sum(t, g));
        break;
      case Op::broadcast_cols:
        if (na) accumulate(nd.a, row_sum(t, g));
        break;
      case Op::concat_cols:
        if (na) accumulate(nd.a, slice_cols(t, g, 0, t.cols(pa)));
        if (nb) accumulate(nd.b, slice_cols(t, g, t.cols(pa), t.cols(pb)));
        break;
      case Op::slice_cols:
        if (na)
          accumulate(nd.a, pad_cols(t, g, t.cols(pa),
                                    static_cast<Index>(nd.d0)));
        break;
      case Op::pad_cols:
        if (na)
          accumulate(nd.a, slice_cols(t, g, static_cast<Index>(nd.d1),
                                      t.cols(pa)));
        break;
      case Op::leaf:
        break;
    }
  }

  std::vector<NodeRef> out;
  out.reserve(wrt.size());
  for (NodeRef w : wrt) {
    const std::int32_t slot = (w.valid() && w.i < n)
                                  ? adj[static_cast<std::size_t>(w.i)]
                                  : -1;
    if (slot >= 0) {
      out.push_back(NodeRef{slot});
    } else {
      out.push_back(leaf(Mat::Zero(rows(w), cols(w))));
    }
  }
  return out;
}

}  // namespace ilmar::ad
