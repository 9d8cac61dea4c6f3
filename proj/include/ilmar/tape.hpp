#pragma once

// Reverse-mode autodiff over dense matrices.
//
// A Tape owns an append-ordered list of nodes; each node holds its operator,
// parent indices and the computed value (Eigen::MatrixXd, 64-bit floats).
// backward() walks the tape from a scalar root and *appends new nodes* for
// every adjoint it forms, so a gradient is itself a differentiable function
// of everything upstream.  Calling backward() on one of those gradient nodes
// yields second-order quantities; nothing special is needed for third order
// either (the gradient-penalty path relies on that).
//
// Every public op eagerly checks its freshly computed value for NaN/Inf and
// throws NonFiniteError naming the first offending node.

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ilmar::ad {

using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

enum class Op : std::uint8_t {
  leaf,
  add, sub, mul, neg, scale, add_const, pow_const, clamp,
  matmul_nn, matmul_nt, matmul_tn, affine,
  vtanh, vrelu, vsigmoid, vexp, vlog,
  sum_all, row_sum, col_sum, logsumexp_rows,
  broadcast_rows, broadcast_cols,
  concat_cols, slice_cols, pad_cols,
};

const char* op_name(Op op);

struct NodeRef {
  std::int32_t i = -1;
  bool valid() const { return i >= 0; }
};

struct TapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NonFiniteError : TapeError {
  NonFiniteError(const std::string& msg, std::int32_t node_index)
      : TapeError(msg), node(node_index) {}
  std::int32_t node;
};

class Tape {
public:
  // When true (default), every op validates its result with allFinite().
  bool check_finite = true;

  NodeRef leaf(Mat v);

  const Mat& val(NodeRef r) const { return node_at(r).val; }
  Index rows(NodeRef r) const { return node_at(r).val.rows(); }
  Index cols(NodeRef r) const { return node_at(r).val.cols(); }
  bool is_leaf(NodeRef r) const { return node_at(r).op == Op::leaf; }
  std::size_t size() const { return nodes_.size(); }

  // Drops all nodes but keeps the node vector's capacity for reuse.
  void reset() { nodes_.clear(); }

  // Adjoints of `root` (must be 1x1) with respect to each node in `wrt`.
  // Nodes that cannot influence the root yield zero matrices of their shape.
  // `wrt` entries may be leaves or intermediates.
  std::vector<NodeRef> backward(NodeRef root, std::span<const NodeRef> wrt);

  // Used by the free-function op builders; not intended for direct use.
  NodeRef push(Op op, std::int32_t a, std::int32_t b, std::int32_t c, Mat val,
               double d0 = 0.0, double d1 = 0.0);

private:
  struct Node {
    Op op;
    std::int32_t a, b, c;  // parent indices, -1 when unused
    double d0, d1;         // op constants (scale factor, clamp bounds, ...)
    Mat val;
  };

  const Node& node_at(NodeRef r) const;
  std::vector<Node> nodes_;
};

// ---- op builders ----------------------------------------------------------
// All builders validate shapes and push exactly one node.

NodeRef add(Tape& t, NodeRef x, NodeRef y);        // same shape
NodeRef sub(Tape& t, NodeRef x, NodeRef y);
NodeRef mul(Tape& t, NodeRef x, NodeRef y);        // elementwise
NodeRef neg(Tape& t, NodeRef x);
NodeRef scale(Tape& t, NodeRef x, double k);
NodeRef add_const(Tape& t, NodeRef x, double k);
NodeRef pow_const(Tape& t, NodeRef x, double p);   // elementwise x^p
NodeRef clamp(Tape& t, NodeRef x, double lo, double hi);

NodeRef matmul(Tape& t, NodeRef x, NodeRef y);     // x * y
NodeRef matmul_nt(Tape& t, NodeRef x, NodeRef y);  // x * y^T
NodeRef matmul_tn(Tape& t, NodeRef x, NodeRef y);  // x^T * y
NodeRef affine(Tape& t, NodeRef x, NodeRef w, NodeRef b);  // x*w + rowwise b (b is 1xK)

NodeRef vtanh(Tape& t, NodeRef x);
NodeRef vrelu(Tape& t, NodeRef x);
NodeRef vsigmoid(Tape& t, NodeRef x);
NodeRef vexp(Tape& t, NodeRef x);
NodeRef vlog(Tape& t, NodeRef x);

NodeRef sum_all(Tape& t, NodeRef x);               // -> 1x1
NodeRef row_sum(Tape& t, NodeRef x);               // NxD -> Nx1
NodeRef col_sum(Tape& t, NodeRef x);               // NxD -> 1xD
NodeRef logsumexp_rows(Tape& t, NodeRef x);        // NxK -> Nx1, max-shifted

NodeRef broadcast_rows(Tape& t, NodeRef x, Index n);  // 1xD -> nxD
NodeRef broadcast_cols(Tape& t, NodeRef x, Index n);  // Nx1 -> Nxn

NodeRef concat_cols(Tape& t, NodeRef x, NodeRef y);             // [x | y]
NodeRef slice_cols(Tape& t, NodeRef x, Index begin, Index n);
NodeRef pad_cols(Tape& t, NodeRef x, Index total, Index begin); // zeros around x

// Convenience: sum_all(x) / (rows*cols).
NodeRef mean_all(Tape& t, NodeRef x);

}  // namespace ilmar::ad
