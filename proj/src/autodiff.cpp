#include "m2d/autodiff.hpp"

#include <cmath>

#include "m2d/errors.hpp"

namespace m2d {

namespace {
constexpr double kNormFloor = 1e-12;  // keeps cosine terms finite on zero rows
}

Var Tape::make(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  nodes_.push_back(std::move(n));
  return Var{this, int(nodes_.size()) - 1};
}

Var Tape::input(const Matrix& value) { return make(value); }

Var Tape::param(Matrix* storage) {
  auto it = bound_.find(storage);
  if (it != bound_.end()) return Var{this, it->second};
  Var v = make(*storage);
  bound_[storage] = v.id;
  return v;
}

const Matrix& Tape::value(Var v) const { return nodes_[size_t(v.id)].value; }
const Matrix& Tape::grad(Var v) const { return nodes_[size_t(v.id)].grad; }

Matrix Tape::param_grad(const Matrix* storage) const {
  auto it = bound_.find(storage);
  if (it == bound_.end())
    return Matrix::Zero(storage->rows(), storage->cols());
  return nodes_[size_t(it->second)].grad;
}

Var Tape::matmul(Var a, Var b) {
  if (val(a.id).cols() != val(b.id).rows())
    throw DimensionError("matmul inner dimensions disagree");
  Var out = make(val(a.id) * val(b.id));
  int ai = a.id, bi = b.id, oi = out.id;
  nodes_[size_t(oi)].back = [this, ai, bi, oi] {
    grad_ref(ai) += grad_ref(oi) * val(bi).transpose();
    grad_ref(bi) += val(ai).transpose() * grad_ref(oi);
  };
  return out;
}

Var Tape::add(Var a, Var b) {
  Var out = make(val(a.id) + val(b.id));
  int ai = a.id, bi = b.id, oi = out.id;
  nodes_[size_t(oi)].back = [this, ai, bi, oi] {
    grad_ref(ai) += grad_ref(oi);
    grad_ref(bi) += grad_ref(oi);
  };
  return out;
}

Var Tape::sub(Var a, Var b) {
  Var out = make(val(a.id) - val(b.id));
  int ai = a.id, bi = b.id, oi = out.id;
  nodes_[size_t(oi)].back = [this, ai, bi, oi] {
    grad_ref(ai) += grad_ref(oi);
    grad_ref(bi) -= grad_ref(oi);
  };
  return out;
}

Var Tape::mul(Var a, Var b) {
  Var out = make(val(a.id).cwiseProduct(val(b.id)));
  int ai = a.id, bi = b.id, oi = out.id;
  nodes_[size_t(oi)].back = [this, ai, bi, oi] {
    grad_ref(ai) += grad_ref(oi).cwiseProduct(val(bi));
    grad_ref(bi) += grad_ref(oi).cwiseProduct(val(ai));
  };
  return out;
}

Var Tape::scale(Var a, double s) {
  Var out = make(val(a.id) * s);
  int ai = a.id, oi = out.id;
  nodes_[size_t(oi)].back = [this, ai, oi, s] { grad_ref(ai) += grad_ref(oi) * s; };
  return out;
}

Var Tape::add_row(Var a, Var row) {
  if (val(row.id).rows() != 1 || val(row.id).cols() != val(a.id).cols())
    throw DimensionError("broadcast row must be 1 x cols(a)");
  Var out = make(val(a.id).rowwise() + val(row.id).row(0));
  int ai = a.id, ri = row.id, oi = out.id;
  nodes_[size_t(oi)].back = [this, ai, ri, oi] {
    grad_ref(ai) += grad_ref(oi);
    grad_ref(ri) += grad_ref(oi).colwise().sum();
  };
  return out;
}

Var Tape::transpose(Var a) {
  Var out = make(val(a.id).transpose());
  int ai = a.id, oi = out.id;
  nodes_[size_t(oi)].back = [this, ai, oi] {
    grad_ref(ai) += grad_ref(oi).transpose();
  };
  return out;
}

Var Tape::gather_rows(Var a, const std::vector<int>& rows) {
  Matrix v(long(rows.size()), val(a.id).cols());
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= val(a.id).rows())
      throw DimensionError("gather index out of range");
    v.row(long(i)) = val(a.id).row(rows[i]);
  }
  Var out = make(std::move(v));
  int ai = a.id, oi = out.id;
  std::vector<int> idx = rows;
  nodes_[size_t(oi)].back = [this, ai, oi, idx] {
    for (size_t i = 0; i < idx.size(); ++i)
      grad_ref(ai).row(idx[i]) += grad_ref(oi).row(long(i));
  };
  return out;
}

Var Tape::concat_rows(Var a, Var b) {
  if (val(a.id).cols() != val(b.id).cols())
    throw DimensionError("row concat needs equal widths");
  Matrix v(val(a.id).rows() + val(b.id).rows(), val(a.id).cols());
  v.topRows(val(a.id).rows()) = val(a.id);
  v.bottomRows(val(b.id).rows()) = val(b.id);
  Var out = make(std::move(v));
  int ai = a.id, bi = b.id, oi = out.id;
  long na = val(a.id).rows(), nb = val(b.id).rows();
  nodes_[size_t(oi)].back = [this, ai, bi, oi, na, nb] {
    grad_ref(ai) += grad_ref(oi).topRows(na);
    grad_ref(bi) += grad_ref(oi).bottomRows(nb);
  };
  return out;
}

Var Tape::concat_cols(Var a, Var b) {
  if (val(a.id).rows() != val(b.id).rows())
    throw DimensionError("column concat needs equal heights");
  Matrix v(val(a.id).rows(), val(a.id).cols() + val(b.id).cols());
  v.leftCols(val(a.id).cols()) = val(a.id);
  v.rightCols(val(b.id).cols()) = val(b.id);
  Var out = make(std::move(v));
  int ai = a.id, bi = b.id, oi = out.id;
  long ca = val(a.id).cols(), cb = val(b.id).cols();
  nodes_[size_t(oi)].back = [this, ai, bi, oi, ca, cb] {
    grad_ref(ai) += grad_ref(oi).leftCols(ca);
    grad_ref(bi) += grad_ref(oi).rightCols(cb);
  };
  return out;
}

Var Tape::slice_cols(Var a, int start, int count) {
  if (start < 0 || count <= 0 || start + count > val(a.id).cols())
    throw DimensionError("column slice out of range");
  Var out = make(val(a.id).middleCols(start, count));
  int ai = a.id, oi = out.id;
  nodes_[size_t(oi)].back = [this, ai, oi, start, count] {
    grad_ref(ai).middleCols(start, count) += grad_ref(oi);
  };
  return out;
}

Var Tape::repeat_row(Var row, int n) {
  if (val(row.id).rows() != 1) throw DimensionError("repeat_row wants a 1 x D row");
  Matrix v(n, val(row.id).cols());
  for (int i = 0; i < n; ++i) v.row(i) = val(row.id).row(0);
  Var out = make(std::move(v));
  int ri = row.id, oi = out.id;
  nodes_[size_t(oi)].back = [this, ri, oi] {
    grad_ref(ri) += grad_ref(oi).colwise().sum();
  };
  return out;
}

Var Tape::mean_rows(Var a) {
  long n = val(a.id).rows();
  Var out = make(val(a.id).colwise().mean());
  int ai = a.id, oi = out.id;
  nodes_[size_t(oi)].back = [this, ai, oi, n] {
    grad_ref(ai) += (Vector::Ones(n) * grad_ref(oi).row(0)) / double(n);
  };
  return out;
}

Var Tape::mean_all(Var a) {
  long n = val(a.id).size();
  Matrix v(1, 1);
  v(0, 0) = val(a.id).mean();
  Var out = make(std::move(v));
  int ai = a.id, oi = out.id;
  nodes_[size_t(oi)].back = [this, ai, oi, n] {
    grad_ref(ai).array() += grad_ref(oi)(0, 0) / double(n);
  };
  return out;
}

Var Tape::sum_all(Var a) {
  Matrix v(1, 1);
  v(0, 0) = val(a.id).sum();
  Var out = make(std::move(v));
  int ai = a.id, oi = out.id;
  nodes_[size_t(oi)].back = [this, ai, oi] {
    grad_ref(ai).array() += grad_ref(oi)(0, 0);
  };
  return out;
}

Var Tape::gelu(Var a) {
  Matrix v = val(a.id).unaryExpr([](double t) {
    return 0.5 * t * (1.0 + std::erf(t / std::sqrt(2.0)));
  });
  Var out = make(std::move(v));
  int ai = a.id, oi = out.id;
  nodes_[size_t(oi)].back = [this, ai, oi] {
    Matrix d = val(ai).unaryExpr([](double t) {
      double cdf = 0.5 * (1.0 + std::erf(t / std::sqrt(2.0)));
      double pdf = std::exp(-0.5 * t * t) / std::sqrt(2.0 * M_PI);
      return cdf + t * pdf;
    });
    grad_ref(ai) += grad_ref(oi).cwiseProduct(d);
  };
  return out;
}

Var Tape::softmax_rows(Var a) {
  Matrix v = val(a.id);
  for (long i = 0; i < v.rows(); ++i) {
    auto row = v.row(i).array();
    double m = row.maxCoeff();
    Eigen::ArrayXd e = (row - m).exp();
    v.row(i) = (e / e.sum()).matrix();
  }
  Var out = make(std::move(v));
  int ai = a.id, oi = out.id;
  nodes_[size_t(oi)].back = [this, ai, oi] {
    const Matrix& y = val(oi);
    const Matrix& gy = grad_ref(oi);
    for (long i = 0; i < y.rows(); ++i) {
      double dot = (gy.row(i).array() * y.row(i).array()).sum();
      grad_ref(ai).row(i) +=
          (y.row(i).array() * (gy.row(i).array() - dot)).matrix();
    }
  };
  return out;
}

Var Tape::layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Matrix& xv = val(x.id);
  if (val(gamma.id).rows() != 1 || val(gamma.id).cols() != xv.cols() ||
      val(beta.id).rows() != 1 || val(beta.id).cols() != xv.cols())
    throw DimensionError("layer norm affine terms must be 1 x cols(x)");
  long n = xv.rows(), d = xv.cols();
  Matrix xhat(n, d);
  Vector inv_sigma(n);
  for (long i = 0; i < n; ++i) {
    double mu = xv.row(i).mean();
    double var = (xv.row(i).array() - mu).square().mean();
    double is = 1.0 / std::sqrt(var + eps);
    inv_sigma(i) = is;
    xhat.row(i) = ((xv.row(i).array() - mu) * is).matrix();
  }
  Matrix v = (xhat.array().rowwise() * val(gamma.id).row(0).array()).rowwise() +
             val(beta.id).row(0).array();
  Var out = make(std::move(v));
  int xi = x.id, gi = gamma.id, bi = beta.id, oi = out.id;
  nodes_[size_t(oi)].back = [this, xi, gi, bi, oi, xhat, inv_sigma] {
    const Matrix& gy = grad_ref(oi);
    long n = gy.rows(), d = gy.cols();
    grad_ref(gi) += (gy.array() * xhat.array()).colwise().sum().matrix();
    grad_ref(bi) += gy.colwise().sum();
    for (long i = 0; i < n; ++i) {
      Eigen::ArrayXd g = gy.row(i).array() * val(gi).row(0).array();
      double gm = g.mean();
      double gxm = (g * xhat.row(i).transpose().array()).mean();
      grad_ref(xi).row(i) +=
          (inv_sigma(i) * (g - gm - xhat.row(i).transpose().array() * gxm))
              .matrix()
              .transpose();
    }
  };
  return out;
}

Var Tape::standardize_rows(Var x, double eps) {
  const Matrix& xv = val(x.id);
  long n = xv.rows(), d = xv.cols();
  Matrix xhat(n, d);
  Vector inv_sigma(n);
  for (long i = 0; i < n; ++i) {
    double mu = xv.row(i).mean();
    double var = (xv.row(i).array() - mu).square().mean();
    double is = 1.0 / std::sqrt(var + eps);
    inv_sigma(i) = is;
    xhat.row(i) = ((xv.row(i).array() - mu) * is).matrix();
  }
  Var out = make(xhat);
  int xi = x.id, oi = out.id;
  nodes_[size_t(oi)].back = [this, xi, oi, xhat, inv_sigma] {
    const Matrix& gy = grad_ref(oi);
    for (long i = 0; i < gy.rows(); ++i) {
      Eigen::ArrayXd g = gy.row(i).array();
      double gm = g.mean();
      double gxm = (g * xhat.row(i).transpose().array()).mean();
      grad_ref(xi).row(i) +=
          (inv_sigma(i) * (g - gm - xhat.row(i).transpose().array() * gxm))
              .matrix()
              .transpose();
    }
  };
  return out;
}

Var Tape::detach(Var a) {
  return make(val(a.id));  // no backward closure: gradient stops here
}

Var Tape::cosine_mse_rows(Var a, Var b) {
  const Matrix& u = val(a.id);
  const Matrix& w = val(b.id);
  if (u.rows() != w.rows() || u.cols() != w.cols())
    throw DimensionError("cosine loss rows must pair up");
  if (u.rows() == 0) throw DataError("cosine loss over an empty batch");
  long n = u.rows();
  double acc = 0.0;
  for (long i = 0; i < n; ++i) {
    double nu = std::max(u.row(i).norm(), kNormFloor);
    double nw = std::max(w.row(i).norm(), kNormFloor);
    acc += 2.0 - 2.0 * u.row(i).dot(w.row(i)) / (nu * nw);
  }
  Matrix v(1, 1);
  v(0, 0) = acc / double(n);
  Var out = make(std::move(v));
  int ai = a.id, bi = b.id, oi = out.id;
  nodes_[size_t(oi)].back = [this, ai, bi, oi, n] {
    double g = grad_ref(oi)(0, 0) * (-2.0 / double(n));
    const Matrix& u = val(ai);
    const Matrix& w = val(bi);
    for (long i = 0; i < n; ++i) {
      double nu = std::max(u.row(i).norm(), kNormFloor);
      double nw = std::max(w.row(i).norm(), kNormFloor);
      double cs = u.row(i).dot(w.row(i)) / (nu * nw);
      grad_ref(ai).row(i) += g * (w.row(i) / (nu * nw) - cs * u.row(i) / (nu * nu));
      grad_ref(bi).row(i) += g * (u.row(i) / (nu * nw) - cs * w.row(i) / (nw * nw));
    }
  };
  return out;
}

Var Tape::bce_with_logits(Var logits, Var targets) {
  const Matrix& z = val(logits.id);
  const Matrix& y = val(targets.id);
  if (z.rows() != y.rows() || z.cols() != y.cols())
    throw DimensionError("logits and labels must share a shape");
  if (z.size() == 0) throw DataError("binary cross-entropy over an empty batch");
  // Stable form: max(z,0) - z*y + log(1 + exp(-|z|)).
  Matrix v(1, 1);
  v(0, 0) = (z.array().max(0.0) - z.array() * y.array() +
             (1.0 + (-z.array().abs()).exp()).log())
                .mean();
  Var out = make(std::move(v));
  int zi = logits.id, yi = targets.id, oi = out.id;
  nodes_[size_t(oi)].back = [this, zi, yi, oi] {
    const Matrix& z = val(zi);
    const Matrix& y = val(yi);
    double g = grad_ref(oi)(0, 0) / double(z.size());
    auto sig = 1.0 / (1.0 + (-z.array()).exp());
    grad_ref(zi).array() += g * (sig - y.array());
  };
  return out;
}

void Tape::backward(Var loss) {
  if (val(loss.id).rows() != 1 || val(loss.id).cols() != 1)
    throw DimensionError("backward starts from a scalar");
  grad_ref(loss.id)(0, 0) = 1.0;
  for (int i = loss.id; i >= 0; --i)
    if (nodes_[size_t(i)].back) nodes_[size_t(i)].back();
}

}  // namespace m2d
