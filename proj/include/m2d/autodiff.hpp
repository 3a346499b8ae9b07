#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "m2d/common.hpp"

namespace m2d {

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid only as long as the tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
};

// Reverse-mode autodiff over dense matrices. A tape is built fresh for every
// forward pass; backward() runs the recorded closures in reverse creation
// order. Parameter leaves are bound to caller-owned storage so gradients can
// be collected per parameter tensor after the sweep.
class Tape {
 public:
  Var input(const Matrix& value);
  // Binds caller storage; repeated registration of the same pointer returns
  // the same node so gradient contributions accumulate in one place.
  Var param(Matrix* storage);

  const Matrix& value(Var v) const;
  const Matrix& grad(Var v) const;
  // Gradient for a bound parameter after backward(); zero matrix if the
  // parameter never influenced the loss.
  Matrix param_grad(const Matrix* storage) const;

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var add_row(Var a, Var row);  // broadcast-add a 1 x D row
  Var transpose(Var a);
  Var gather_rows(Var a, const std::vector<int>& rows);
  Var concat_rows(Var a, Var b);
  Var concat_cols(Var a, Var b);
  Var slice_cols(Var a, int start, int count);
  Var repeat_row(Var row, int n);
  Var mean_rows(Var a);  // n x D -> 1 x D column means
  Var mean_all(Var a);   // -> 1 x 1
  Var sum_all(Var a);    // -> 1 x 1
  Var gelu(Var a);
  Var softmax_rows(Var a);
  Var layer_norm(Var x, Var gamma, Var beta, double eps);
  // Per-row (x - mean) / sqrt(var + eps) without affine terms.
  Var standardize_rows(Var x, double eps);
  // Value copy with gradient flow cut.
  Var detach(Var a);
  // Mean over row pairs of 2 - 2 * cosine(a_i, b_i); 1 x 1 output.
  Var cosine_mse_rows(Var a, Var b);
  // Mean elementwise binary cross-entropy between sigmoid(logits) and targets.
  Var bce_with_logits(Var logits, Var targets);

  void backward(Var loss);

  int size() const { return int(nodes_.size()); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void()> back;  // empty for leaves and detached nodes
  };

  Var make(Matrix value);
  Matrix& grad_ref(int id) { return nodes_[size_t(id)].grad; }
  const Matrix& val(int id) const { return nodes_[size_t(id)].value; }

  std::vector<Node> nodes_;
  std::unordered_map<const Matrix*, int> bound_;
};

}  // namespace m2d
