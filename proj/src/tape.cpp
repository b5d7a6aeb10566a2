// src/tape.cpp
#include "rtag/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rtag::ad {

namespace {

void check_same_shape(const char* op, const Value& a, const Value& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DomainError(cat(op, ": shape mismatch ", a.rows(), "x", a.cols(), " vs ", b.rows(), "x",
                          b.cols()));
}

void check_scalar(const char* op, const Value& s) {
  if (s.rows() != 1 || s.cols() != 1)
    throw DomainError(cat(op, ": expected 1x1 scalar, got ", s.rows(), "x", s.cols()));
}

void check_same_tape(const char* op, const Value& a, const Value& b) {
  if (a.tape != b.tape) throw DomainError(cat(op, ": operands live on different tapes"));
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---------------- Value ----------------

const MatrixXd& Value::data() const {
  if (!valid()) throw DomainError("Value::data: invalid handle");
  return tape->node(id).data;
}

const MatrixXd& Value::grad() const {
  if (!valid()) throw DomainError("Value::grad: invalid handle");
  return tape->grad_ref(id);
}

double Value::scalar() const {
  const MatrixXd& m = data();
  if (m.rows() != 1 || m.cols() != 1)
    throw DomainError(cat("Value::scalar: node is ", m.rows(), "x", m.cols()));
  return m(0, 0);
}

// ---------------- Tape ----------------

Value Tape::constant(MatrixXd m, const char* op) {
  nodes_.push_back(Node{std::move(m), {}, nullptr, {}, op, false, nullptr});
  return Value{this, static_cast<int>(nodes_.size()) - 1};
}

Value Tape::leaf(MatrixXd m, const char* op) {
  nodes_.push_back(Node{std::move(m), {}, nullptr, {}, op, true, nullptr});
  return Value{this, static_cast<int>(nodes_.size()) - 1};
}

Value Tape::param(Tensor& t) {
  auto it = bound_.find(&t);
  if (it != bound_.end()) return Value{this, it->second};
  nodes_.push_back(Node{t.value, {}, nullptr, {}, "param", true, &t});
  const int id = static_cast<int>(nodes_.size()) - 1;
  bound_.emplace(&t, id);
  return Value{this, id};
}

Value Tape::make(MatrixXd data, const char* op, std::vector<int> parents,
                 std::function<void(Tape&, Node&)> back) {
  bool req = false;
  for (int p : parents) req = req || node(p).requires_grad;
  Node n;
  n.data = std::move(data);
  n.parents = std::move(parents);
  n.op = op;
  n.requires_grad = req;
  if (req) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Value{this, static_cast<int>(nodes_.size()) - 1};
}

MatrixXd& Tape::grad_ref(int id) {
  Node& n = node(id);
  if (n.grad.rows() != n.data.rows() || n.grad.cols() != n.data.cols())
    n.grad = MatrixXd::Zero(n.data.rows(), n.data.cols());
  return n.grad;
}

void Tape::backward(Value loss) {
  if (loss.tape != this) throw DomainError("Tape::backward: loss from another tape");
  check_scalar("backward", loss);
  if (!std::isfinite(loss.scalar())) {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!nodes_[i].data.allFinite())
        throw NumericError(cat("non-finite loss; first non-finite tape node is #", i, " (op ",
                               nodes_[i].op, ")"));
    }
    throw NumericError("non-finite loss with no non-finite tape node (unexpected)");
  }

  // Mark ancestors of the loss so each relevant node is visited exactly once,
  // in reverse topological (= reverse creation) order.
  std::vector<char> reach(nodes_.size(), 0);
  std::vector<int> stack{loss.id};
  reach[static_cast<std::size_t>(loss.id)] = 1;
  while (!stack.empty()) {
    const int id = stack.back();
    stack.pop_back();
    for (int p : node(id).parents) {
      if (!reach[static_cast<std::size_t>(p)] && node(p).requires_grad) {
        reach[static_cast<std::size_t>(p)] = 1;
        stack.push_back(p);
      }
    }
  }

  grad_ref(loss.id)(0, 0) += 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = node(id);
    if (!reach[static_cast<std::size_t>(id)] || !n.requires_grad || !n.back) continue;
    grad_ref(id);  // ensure allocated even if all downstream grads were zero
    n.back(*this, n);
  }

  for (auto& [tensor, id] : bound_) {
    if (reach[static_cast<std::size_t>(id)]) tensor->grad += grad_ref(id);
  }
}

void Tape::zero_node_grads() {
  for (Node& n : nodes_)
    if (n.grad.size() > 0) n.grad.setZero();
}

// ---------------- arithmetic ----------------

Value add(Value a, Value b) {
  check_same_tape("add", a, b);
  check_same_shape("add", a, b);
  return a.tape->make(a.data() + b.data(), "add", {a.id, b.id}, [](Tape& t, Node& n) {
    t.grad_ref(n.parents[0]) += n.grad;
    t.grad_ref(n.parents[1]) += n.grad;
  });
}

Value sub(Value a, Value b) {
  check_same_tape("sub", a, b);
  check_same_shape("sub", a, b);
  return a.tape->make(a.data() - b.data(), "sub", {a.id, b.id}, [](Tape& t, Node& n) {
    t.grad_ref(n.parents[0]) += n.grad;
    t.grad_ref(n.parents[1]) -= n.grad;
  });
}

Value neg(Value a) {
  return a.tape->make(-a.data(), "neg", {a.id},
                      [](Tape& t, Node& n) { t.grad_ref(n.parents[0]) -= n.grad; });
}

Value mul(Value a, Value b) {
  check_same_tape("mul", a, b);
  check_same_shape("mul", a, b);
  return a.tape->make(a.data().cwiseProduct(b.data()), "mul", {a.id, b.id}, [](Tape& t, Node& n) {
    t.grad_ref(n.parents[0]) += n.grad.cwiseProduct(t.node(n.parents[1]).data);
    t.grad_ref(n.parents[1]) += n.grad.cwiseProduct(t.node(n.parents[0]).data);
  });
}

Value div(Value a, Value b) {
  check_same_tape("div", a, b);
  check_same_shape("div", a, b);
  return a.tape->make(a.data().cwiseQuotient(b.data()), "div", {a.id, b.id}, [](Tape& t, Node& n) {
    const MatrixXd& bd = t.node(n.parents[1]).data;
    t.grad_ref(n.parents[0]) += n.grad.cwiseQuotient(bd);
    t.grad_ref(n.parents[1]) -= n.grad.cwiseProduct(n.data).cwiseQuotient(bd);
  });
}

Value scale(Value a, double c) {
  return a.tape->make(c * a.data(), "scale", {a.id},
                      [c](Tape& t, Node& n) { t.grad_ref(n.parents[0]) += c * n.grad; });
}

Value offset(Value a, double c) {
  return a.tape->make(a.data().array() + c, "offset", {a.id},
                      [](Tape& t, Node& n) { t.grad_ref(n.parents[0]) += n.grad; });
}

Value cmul(Value s, Value a) {
  check_same_tape("cmul", s, a);
  check_scalar("cmul", s);
  return a.tape->make(s.scalar() * a.data(), "cmul", {s.id, a.id}, [](Tape& t, Node& n) {
    const MatrixXd& ad = t.node(n.parents[1]).data;
    t.grad_ref(n.parents[0])(0, 0) += n.grad.cwiseProduct(ad).sum();
    t.grad_ref(n.parents[1]) += t.node(n.parents[0]).data(0, 0) * n.grad;
  });
}

Value cdiv(Value a, Value s) {
  check_same_tape("cdiv", a, s);
  check_scalar("cdiv", s);
  return a.tape->make(a.data() / s.scalar(), "cdiv", {a.id, s.id}, [](Tape& t, Node& n) {
    const double sv = t.node(n.parents[1]).data(0, 0);
    t.grad_ref(n.parents[0]) += n.grad / sv;
    t.grad_ref(n.parents[1])(0, 0) -= n.grad.cwiseProduct(n.data).sum() / sv;
  });
}

// ---------------- linear algebra ----------------

Value matmul(Value a, Value b) {
  check_same_tape("matmul", a, b);
  if (a.cols() != b.rows())
    throw DomainError(cat("matmul: inner dimensions ", a.cols(), " vs ", b.rows()));
  return a.tape->make(a.data() * b.data(), "matmul", {a.id, b.id}, [](Tape& t, Node& n) {
    const MatrixXd& ad = t.node(n.parents[0]).data;
    const MatrixXd& bd = t.node(n.parents[1]).data;
    t.grad_ref(n.parents[0]) += n.grad * bd.transpose();
    t.grad_ref(n.parents[1]) += ad.transpose() * n.grad;
  });
}

Value transpose(Value a) {
  return a.tape->make(a.data().transpose(), "transpose", {a.id}, [](Tape& t, Node& n) {
    t.grad_ref(n.parents[0]) += n.grad.transpose();
  });
}

// ---------------- elementwise functions ----------------

Value sin(Value a) {
  return a.tape->make(a.data().array().sin(), "sin", {a.id}, [](Tape& t, Node& n) {
    t.grad_ref(n.parents[0]).array() +=
        n.grad.array() * t.node(n.parents[0]).data.array().cos();
  });
}

Value cos(Value a) {
  return a.tape->make(a.data().array().cos(), "cos", {a.id}, [](Tape& t, Node& n) {
    t.grad_ref(n.parents[0]).array() -=
        n.grad.array() * t.node(n.parents[0]).data.array().sin();
  });
}

Value tanh(Value a) {
  return a.tape->make(a.data().array().tanh(), "tanh", {a.id}, [](Tape& t, Node& n) {
    t.grad_ref(n.parents[0]).array() += n.grad.array() * (1.0 - n.data.array().square());
  });
}

Value softplus(Value a) {
  MatrixXd out = a.data().unaryExpr(
      [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); });
  return a.tape->make(std::move(out), "softplus", {a.id}, [](Tape& t, Node& n) {
    t.grad_ref(n.parents[0]).array() +=
        n.grad.array() * t.node(n.parents[0]).data.unaryExpr(&stable_sigmoid).array();
  });
}

// ---------------- reductions ----------------

Value sum(Value a) {
  MatrixXd out(1, 1);
  out(0, 0) = a.data().sum();
  return a.tape->make(std::move(out), "sum", {a.id}, [](Tape& t, Node& n) {
    t.grad_ref(n.parents[0]).array() += n.grad(0, 0);
  });
}

Value mean(Value a) {
  const double inv = 1.0 / static_cast<double>(a.rows() * a.cols());
  MatrixXd out(1, 1);
  out(0, 0) = a.data().sum() * inv;
  return a.tape->make(std::move(out), "mean", {a.id}, [inv](Tape& t, Node& n) {
    t.grad_ref(n.parents[0]).array() += n.grad(0, 0) * inv;
  });
}

Value sum_squares(Value a) {
  MatrixXd out(1, 1);
  out(0, 0) = a.data().squaredNorm();
  return a.tape->make(std::move(out), "sum_squares", {a.id}, [](Tape& t, Node& n) {
    t.grad_ref(n.parents[0]) += 2.0 * n.grad(0, 0) * t.node(n.parents[0]).data;
  });
}

// ---------------- structure ----------------

Value block(Value a, int i, int j, int p, int q) {
  if (i < 0 || j < 0 || p <= 0 || q <= 0 || i + p > a.rows() || j + q > a.cols())
    throw DomainError(cat("block: [", i, ",", j, ")+(", p, "x", q, ") out of ", a.rows(), "x",
                          a.cols()));
  return a.tape->make(a.data().block(i, j, p, q), "block", {a.id}, [i, j, p, q](Tape& t, Node& n) {
    t.grad_ref(n.parents[0]).block(i, j, p, q) += n.grad;
  });
}

Value concat_rows(const std::vector<Value>& parts) {
  if (parts.empty()) throw DomainError("concat_rows: empty part list");
  Tape* tape = parts[0].tape;
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  std::vector<int> ids;
  for (const Value& v : parts) {
    check_same_tape("concat_rows", parts[0], v);
    if (v.cols() != cols) throw DomainError("concat_rows: column count mismatch");
    rows += v.rows();
    ids.push_back(v.id);
  }
  MatrixXd out(rows, cols);
  Eigen::Index r = 0;
  for (const Value& v : parts) {
    out.middleRows(r, v.rows()) = v.data();
    r += v.rows();
  }
  return tape->make(std::move(out), "concat_rows", std::move(ids), [](Tape& t, Node& n) {
    Eigen::Index r = 0;
    for (int p : n.parents) {
      const Eigen::Index pr = t.node(p).data.rows();
      t.grad_ref(p) += n.grad.middleRows(r, pr);
      r += pr;
    }
  });
}

Value concat_cols(const std::vector<Value>& parts) {
  if (parts.empty()) throw DomainError("concat_cols: empty part list");
  Tape* tape = parts[0].tape;
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts[0].rows();
  std::vector<int> ids;
  for (const Value& v : parts) {
    check_same_tape("concat_cols", parts[0], v);
    if (v.rows() != rows) throw DomainError("concat_cols: row count mismatch");
    cols += v.cols();
    ids.push_back(v.id);
  }
  MatrixXd out(rows, cols);
  Eigen::Index c = 0;
  for (const Value& v : parts) {
    out.middleCols(c, v.cols()) = v.data();
    c += v.cols();
  }
  return tape->make(std::move(out), "concat_cols", std::move(ids), [](Tape& t, Node& n) {
    Eigen::Index c = 0;
    for (int p : n.parents) {
      const Eigen::Index pc = t.node(p).data.cols();
      t.grad_ref(p) += n.grad.middleCols(c, pc);
      c += pc;
    }
  });
}

Value gather_rows(Value a, std::vector<int> rows) {
  for (int r : rows)
    if (r < 0 || r >= a.rows()) throw DomainError(cat("gather_rows: row ", r, " out of range"));
  MatrixXd out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = a.data().row(rows[i]);
  return a.tape->make(std::move(out), "gather_rows", {a.id},
                      [rows = std::move(rows)](Tape& t, Node& n) {
                        MatrixXd& g = t.grad_ref(n.parents[0]);
                        for (std::size_t i = 0; i < rows.size(); ++i)
                          g.row(rows[i]) += n.grad.row(static_cast<Eigen::Index>(i));
                      });
}

Value gather_pixels(Value a, std::vector<std::pair<int, int>> yx) {
  for (auto [y, x] : yx)
    if (y < 0 || y >= a.rows() || x < 0 || x >= a.cols())
      throw DomainError(cat("gather_pixels: (", y, ",", x, ") out of ", a.rows(), "x", a.cols()));
  MatrixXd out(static_cast<Eigen::Index>(yx.size()), 1);
  for (std::size_t i = 0; i < yx.size(); ++i) out(static_cast<Eigen::Index>(i), 0) = a.data()(yx[i].first, yx[i].second);
  return a.tape->make(std::move(out), "gather_pixels", {a.id},
                      [yx = std::move(yx)](Tape& t, Node& n) {
                        MatrixXd& g = t.grad_ref(n.parents[0]);
                        for (std::size_t i = 0; i < yx.size(); ++i)
                          g(yx[i].first, yx[i].second) += n.grad(static_cast<Eigen::Index>(i), 0);
                      });
}

Value flatten(Value a) {
  const Eigen::Index h = a.rows(), w = a.cols();
  MatrixXd out(h * w, 1);
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index x = 0; x < w; ++x) out(y * w + x, 0) = a.data()(y, x);
  return a.tape->make(std::move(out), "flatten", {a.id}, [h, w](Tape& t, Node& n) {
    MatrixXd& g = t.grad_ref(n.parents[0]);
    for (Eigen::Index y = 0; y < h; ++y)
      for (Eigen::Index x = 0; x < w; ++x) g(y, x) += n.grad(y * w + x, 0);
  });
}

Value rowscale(Value a, Value s) {
  check_same_tape("rowscale", a, s);
  if (s.cols() != 1 || s.rows() != a.rows())
    throw DomainError(cat("rowscale: scale must be ", a.rows(), "x1, got ", s.rows(), "x", s.cols()));
  return a.tape->make(s.data().asDiagonal() * a.data(), "rowscale", {a.id, s.id},
                      [](Tape& t, Node& n) {
                        const MatrixXd& ad = t.node(n.parents[0]).data;
                        const MatrixXd& sd = t.node(n.parents[1]).data;
                        t.grad_ref(n.parents[0]) += sd.asDiagonal() * n.grad;
                        t.grad_ref(n.parents[1]) += n.grad.cwiseProduct(ad).rowwise().sum();
                      });
}

Value broadcast_add_row(Value a, Value t) {
  check_same_tape("broadcast_add_row", a, t);
  if (t.cols() != 1 || t.rows() != a.cols())
    throw DomainError(cat("broadcast_add_row: offset must be ", a.cols(), "x1"));
  MatrixXd out = a.data();
  out.rowwise() += t.data().col(0).transpose();
  return a.tape->make(std::move(out), "broadcast_add_row", {a.id, t.id}, [](Tape& tp, Node& n) {
    tp.grad_ref(n.parents[0]) += n.grad;
    tp.grad_ref(n.parents[1]) += n.grad.colwise().sum().transpose();
  });
}

Value stop_gradient(Value a) { return a.tape->constant(a.data(), "stop_gradient"); }

// ---------------- image ops ----------------

Value avgpool(Value a, int f) {
  if (f <= 0 || a.rows() % f != 0 || a.cols() % f != 0)
    throw DomainError(cat("avgpool: factor ", f, " does not divide ", a.rows(), "x", a.cols()));
  const Eigen::Index oh = a.rows() / f, ow = a.cols() / f;
  MatrixXd out(oh, ow);
  for (Eigen::Index y = 0; y < oh; ++y)
    for (Eigen::Index x = 0; x < ow; ++x) out(y, x) = a.data().block(y * f, x * f, f, f).mean();
  const double inv = 1.0 / (static_cast<double>(f) * f);
  return a.tape->make(std::move(out), "avgpool", {a.id}, [f, inv](Tape& t, Node& n) {
    MatrixXd& g = t.grad_ref(n.parents[0]);
    for (Eigen::Index y = 0; y < n.data.rows(); ++y)
      for (Eigen::Index x = 0; x < n.data.cols(); ++x)
        g.block(y * f, x * f, f, f).array() += n.grad(y, x) * inv;
  });
}

Value conv3x3(Value x, Value k) {
  check_same_tape("conv3x3", x, k);
  if (k.rows() != 3 || k.cols() != 3) throw DomainError("conv3x3: kernel must be 3x3");
  const Eigen::Index h = x.rows(), w = x.cols();
  const MatrixXd& in = x.data();
  const MatrixXd& kd = k.data();
  MatrixXd out = MatrixXd::Zero(h, w);
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index c = 0; c < w; ++c) {
      double acc = 0.0;
      for (int dy = 0; dy < 3; ++dy) {
        const Eigen::Index yy = y + dy - 1;
        if (yy < 0 || yy >= h) continue;
        for (int dx = 0; dx < 3; ++dx) {
          const Eigen::Index xx = c + dx - 1;
          if (xx < 0 || xx >= w) continue;
          acc += in(yy, xx) * kd(dy, dx);
        }
      }
      out(y, c) = acc;
    }
  return x.tape->make(std::move(out), "conv3x3", {x.id, k.id}, [h, w](Tape& t, Node& n) {
    const MatrixXd& in = t.node(n.parents[0]).data;
    const MatrixXd& kd = t.node(n.parents[1]).data;
    MatrixXd& gin = t.grad_ref(n.parents[0]);
    MatrixXd& gk = t.grad_ref(n.parents[1]);
    for (Eigen::Index y = 0; y < h; ++y)
      for (Eigen::Index c = 0; c < w; ++c) {
        const double g = n.grad(y, c);
        if (g == 0.0) continue;
        for (int dy = 0; dy < 3; ++dy) {
          const Eigen::Index yy = y + dy - 1;
          if (yy < 0 || yy >= h) continue;
          for (int dx = 0; dx < 3; ++dx) {
            const Eigen::Index xx = c + dx - 1;
            if (xx < 0 || xx >= w) continue;
            gin(yy, xx) += g * kd(dy, dx);
            gk(dy, dx) += g * in(yy, xx);
          }
        }
      }
  });
}

// ---------------- specials ----------------

Value median_scalar(Value a) {
  const Eigen::Index n = a.rows() * a.cols();
  if (n == 0) throw DomainError("median_scalar: empty input");
  // Single-element median (lower middle for even counts): dividing a map by
  // it then makes the map's median exactly 1 in IEEE arithmetic, which the
  // depth normalization relies on.
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  const MatrixXd& d = a.data();
  const auto at = [&d](Eigen::Index i) { return d(i % d.rows(), i / d.rows()); };
  const Eigen::Index rank = (n - 1) / 2;
  std::nth_element(idx.begin(), idx.begin() + rank, idx.end(),
                   [&](Eigen::Index x, Eigen::Index y) { return at(x) < at(y); });
  const Eigen::Index mid = idx[static_cast<std::size_t>(rank)];
  MatrixXd out(1, 1);
  out(0, 0) = at(mid);
  return a.tape->make(std::move(out), "median_scalar", {a.id}, [mid](Tape& t, Node& n) {
    MatrixXd& g = t.grad_ref(n.parents[0]);
    g(mid % g.rows(), mid / g.rows()) += n.grad(0, 0);
  });
}

Value special_orthonormalize(Value a) {
  if (a.rows() != 3 || a.cols() != 3) throw DomainError("special_orthonormalize: input must be 3x3");
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(a.data(), Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Matrix3d u = svd.matrixU();
  const Eigen::Matrix3d v = svd.matrixV();
  const Eigen::Vector3d sig = svd.singularValues();
  const double s = ((u * v.transpose()).determinant() < 0.0) ? -1.0 : 1.0;
  const Eigen::Vector3d c(1.0, 1.0, s);
  MatrixXd out = u * c.asDiagonal() * v.transpose();
  return a.tape->make(std::move(out), "special_orthonormalize", {a.id},
                      [u, v, sig, c](Tape& t, Node& n) {
                        // Adjoint of the Procrustes projection through the SVD
                        // basis: rotate the output gradient, solve the 2x2
                        // pair systems, rotate back.
                        const Eigen::Matrix3d gh = u.transpose() * n.grad * v;
                        Eigen::Matrix3d pbar = Eigen::Matrix3d::Zero();
                        const auto clamped = [](double x) {
                          const double eps = 1e-9;
                          if (std::abs(x) < eps) return x < 0.0 ? -eps : eps;
                          return x;
                        };
                        for (int i = 0; i < 3; ++i)
                          for (int j = i + 1; j < 3; ++j) {
                            if (c(i) * c(j) > 0.0) {
                              const double k = c(j) / clamped(sig(i) + sig(j));
                              const double w = k * (gh(i, j) - gh(j, i));
                              pbar(i, j) += w;
                              pbar(j, i) -= w;
                            } else {
                              const double k = 1.0 / clamped(sig(i) - sig(j));
                              const double w = k * (gh(i, j) + gh(j, i));
                              pbar(i, j) += w;
                              pbar(j, i) += w;
                            }
                          }
                        t.grad_ref(n.parents[0]) += u * pbar * v.transpose();
                      });
}

Value chamfer_uni(Value a, Value b) {
  check_same_tape("chamfer_uni", a, b);
  if (a.cols() != b.cols()) throw DomainError("chamfer_uni: point dimension mismatch");
  if (a.rows() == 0 || b.rows() == 0) throw DomainError("chamfer_uni: empty point cloud");
  const MatrixXd& pa = a.data();
  const MatrixXd& pb = b.data();
  const Eigen::Index ka = pa.rows(), kb = pb.rows();
  std::vector<Eigen::Index> nn(static_cast<std::size_t>(ka));
  double total = 0.0;
  for (Eigen::Index i = 0; i < ka; ++i) {
    double best = std::numeric_limits<double>::infinity();
    Eigen::Index arg = 0;
    for (Eigen::Index j = 0; j < kb; ++j) {
      const double d2 = (pa.row(i) - pb.row(j)).squaredNorm();
      if (d2 < best) {
        best = d2;
        arg = j;
      }
    }
    nn[static_cast<std::size_t>(i)] = arg;
    total += best;
  }
  MatrixXd out(1, 1);
  out(0, 0) = total / static_cast<double>(ka);
  return a.tape->make(std::move(out), "chamfer_uni", {a.id, b.id},
                      [nn = std::move(nn)](Tape& t, Node& n) {
                        const MatrixXd& pa = t.node(n.parents[0]).data;
                        const MatrixXd& pb = t.node(n.parents[1]).data;
                        MatrixXd& ga = t.grad_ref(n.parents[0]);
                        MatrixXd& gb = t.grad_ref(n.parents[1]);
                        const double w = 2.0 * n.grad(0, 0) / static_cast<double>(pa.rows());
                        for (Eigen::Index i = 0; i < pa.rows(); ++i) {
                          const Eigen::Index j = nn[static_cast<std::size_t>(i)];
                          const auto diff = (pa.row(i) - pb.row(j)).eval();
                          ga.row(i) += w * diff;
                          gb.row(j) -= w * diff;
                        }
                      });
}

}  // namespace rtag::ad
