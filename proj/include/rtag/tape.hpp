// include/rtag/tape.hpp
//
// Reverse-mode automatic differentiation on a per-sample tape.
//
// Every tape node holds a dense 64-bit matrix (scalars are 1x1, vectors n x 1,
// point clouds k x 3, image channels H x W).  Operations append nodes in
// topological order; Tape::backward sweeps the tape once in reverse order and
// accumulates gradients, including into long-lived Tensor parameters bound
// via Tape::param.
#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "rtag/common.hpp"

namespace rtag::ad {

using Eigen::MatrixXd;

class Tape;

// Lightweight handle to a tape node.
struct Value {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const MatrixXd& data() const;
  const MatrixXd& grad() const;
  Eigen::Index rows() const { return data().rows(); }
  Eigen::Index cols() const { return data().cols(); }
  double scalar() const;
};

// A named trainable parameter living outside any tape.  Gradients accumulate
// across samples until zero_grad().
struct Tensor {
  std::string name;
  MatrixXd value;
  MatrixXd grad;

  Tensor() = default;
  Tensor(std::string n, MatrixXd v) : name(std::move(n)), value(std::move(v)) {
    grad = MatrixXd::Zero(value.rows(), value.cols());
  }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

struct Node {
  MatrixXd data;
  MatrixXd grad;  // allocated lazily during backward
  std::function<void(Tape&, Node&)> back;
  std::vector<int> parents;
  const char* op = "";
  bool requires_grad = false;
  Tensor* bound = nullptr;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf holding fixed data; no gradient is tracked through it.
  Value constant(MatrixXd m, const char* op = "const");
  // Leaf for which gradients are requested (finite-difference probes, inputs).
  Value leaf(MatrixXd m, const char* op = "leaf");
  // Leaf bound to an external parameter; repeated binds of the same Tensor on
  // one tape return the same node.
  Value param(Tensor& t);

  Value make(MatrixXd data, const char* op, std::vector<int> parents,
             std::function<void(Tape&, Node&)> back);

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }

  // Accumulates d(loss)/d(node) into every reachable node's grad and
  // d(loss)/d(tensor) into every bound Tensor's grad.  `loss` must be a finite
  // 1x1 value; otherwise the first non-finite tape node is named.
  void backward(Value loss);

  // Resets every node's gradient accumulator (bound Tensor grads are not
  // touched), so one tape can serve several independent backward passes.
  void zero_node_grads();

  MatrixXd& grad_ref(int id);

 private:
  std::vector<Node> nodes_;
  std::unordered_map<Tensor*, int> bound_;
};

// ---------------- arithmetic ----------------
Value add(Value a, Value b);
Value sub(Value a, Value b);
Value neg(Value a);
Value mul(Value a, Value b);  // elementwise
Value div(Value a, Value b);  // elementwise
Value scale(Value a, double c);
Value offset(Value a, double c);
Value cmul(Value s, Value a);  // 1x1 scalar times matrix
Value cdiv(Value a, Value s);  // matrix over 1x1 scalar

// ---------------- linear algebra ----------------
Value matmul(Value a, Value b);
Value transpose(Value a);

// ---------------- elementwise functions ----------------
Value sin(Value a);
Value cos(Value a);
Value tanh(Value a);
Value softplus(Value a);  // log(1 + e^x), numerically stable

// ---------------- reductions ----------------
Value sum(Value a);
Value mean(Value a);
Value sum_squares(Value a);

// ---------------- structure ----------------
Value block(Value a, int i, int j, int p, int q);
Value concat_rows(const std::vector<Value>& parts);
Value concat_cols(const std::vector<Value>& parts);
Value gather_rows(Value a, std::vector<int> rows);
// Gathers pixels (y, x) of an H x W channel into a k x 1 column.
Value gather_pixels(Value a, std::vector<std::pair<int, int>> yx);
Value flatten(Value a);  // row-major H*W x 1
Value rowscale(Value a, Value s);           // out.row(i) = a.row(i) * s(i)
Value broadcast_add_row(Value a, Value t);  // adds t (c x 1) to every row of a (k x c)
Value stop_gradient(Value a);

// ---------------- image ops ----------------
Value avgpool(Value a, int f);
Value conv3x3(Value x, Value k);  // zero-padded same-size convolution

// ---------------- specials ----------------
// Scalar median as a single selected element (lower middle for even counts),
// so x / median_scalar(x) has median exactly 1; the gradient flows through
// the selected element.
Value median_scalar(Value a);
// Nearest rotation matrix to a 3x3 input (det +1), with analytic backward.
Value special_orthonormalize(Value a);
// Mean over rows of A of the squared distance to the nearest row of B.
Value chamfer_uni(Value a, Value b);

}  // namespace rtag::ad
