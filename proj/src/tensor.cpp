#include "onh/tensor.hpp"

#include <cmath>

namespace onh::tensor {
namespace {

[[noreturn]] void shape_error(const std::string& op, const Matrix& a, const Matrix& b) {
  throw Error("tensor_core", "SHAPE_MISMATCH",
              op + ": " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " vs " +
                  std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

void same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw Error("tensor_core", "TAPE_MISMATCH", "operands recorded on different tapes");
}

Eigen::Map<const Matrix> square(const Matrix& t, Index row, Index k) {
  return Eigen::Map<const Matrix>(t.row(row).data(), k, k);
}

}  // namespace

const Matrix& Var::value() const { return tape->value(*this); }

Var Tape::push(Matrix value, bool needs_grad, std::function<void()> back) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{this, int(nodes_.size()) - 1};
}

Matrix& Tape::grad_ref(int id) {
  Node& n = nodes_[std::size_t(id)];
  if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
  return n.grad;
}

Var Tape::constant(Matrix value) { return push(std::move(value), false, {}); }

Var Tape::param(Parameter& p) {
  Var v = push(p.value, true, {});
  nodes_.back().param = &p;
  return v;
}

void Tape::backward(Var loss) {
  const Matrix& l = value(loss);
  if (l.rows() != 1 || l.cols() != 1)
    throw Error("tensor_core", "NOT_SCALAR_LOSS",
                "loss is " + std::to_string(l.rows()) + "x" + std::to_string(l.cols()));
  for (Node& n : nodes_) n.grad.resize(0, 0);
  grad_ref(loss.id).setOnes();
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[std::size_t(i)];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.back) n.back();
    if (n.param) {
      if (n.param->grad.rows() != n.grad.rows() || n.param->grad.cols() != n.grad.cols()) n.param->zero_grad();
      n.param->grad += n.grad;
    }
  }
}

Var matmul(Var a, Var b) {
  same_tape(a, b);
  Tape& t = *a.tape;
  if (a.cols() != b.rows()) shape_error("matmul", a.value(), b.value());
  Matrix out = a.value() * b.value();
  return t.push(std::move(out), t.needs(a.id) || t.needs(b.id), [&t, a, b, id = t.size()] {
    const Matrix& g = t.grad(Var{&t, int(id)});
    if (t.needs(a.id)) t.grad_ref(a.id).noalias() += g * b.value().transpose();
    if (t.needs(b.id)) t.grad_ref(b.id).noalias() += a.value().transpose() * g;
  });
}

Var add(Var a, Var b) {
  same_tape(a, b);
  Tape& t = *a.tape;
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error("add", a.value(), b.value());
  return t.push(a.value() + b.value(), t.needs(a.id) || t.needs(b.id), [&t, a, b, id = t.size()] {
    const Matrix& g = t.grad(Var{&t, int(id)});
    if (t.needs(a.id)) t.grad_ref(a.id) += g;
    if (t.needs(b.id)) t.grad_ref(b.id) += g;
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  return t.push(a.value() * s, t.needs(a.id), [&t, a, s, id = t.size()] {
    t.grad_ref(a.id) += s * t.grad(Var{&t, int(id)});
  });
}

Var add_bias(Var x, Var bias) {
  same_tape(x, bias);
  Tape& t = *x.tape;
  if (bias.rows() != 1 || bias.cols() != x.cols()) shape_error("add_bias", x.value(), bias.value());
  Matrix out = x.value();
  out.rowwise() += bias.value().row(0);
  return t.push(std::move(out), t.needs(x.id) || t.needs(bias.id), [&t, x, bias, id = t.size()] {
    const Matrix& g = t.grad(Var{&t, int(id)});
    if (t.needs(x.id)) t.grad_ref(x.id) += g;
    if (t.needs(bias.id)) t.grad_ref(bias.id) += g.colwise().sum();
  });
}

Var add_row_constant(Var x, const Matrix& row) {
  Tape& t = *x.tape;
  if (row.rows() != 1 || row.cols() != x.cols()) shape_error("add_row_constant", x.value(), row);
  Matrix out = x.value();
  out.rowwise() += row.row(0);
  return t.push(std::move(out), t.needs(x.id), [&t, x, id = t.size()] {
    t.grad_ref(x.id) += t.grad(Var{&t, int(id)});
  });
}

Var relu(Var x) {
  Tape& t = *x.tape;
  return t.push(x.value().cwiseMax(0.0), t.needs(x.id), [&t, x, id = t.size()] {
    const Matrix& g = t.grad(Var{&t, int(id)});
    t.grad_ref(x.id) += (x.value().array() > 0.0).select(g, 0.0);
  });
}

Var batchnorm(Var x, Var gamma, Var beta, BatchNormState& st, Mode mode) {
  same_tape(x, gamma);
  same_tape(x, beta);
  Tape& t = *x.tape;
  const Matrix& xv = x.value();
  const Index n = xv.rows(), d = xv.cols();
  if (gamma.rows() != 1 || gamma.cols() != d) shape_error("batchnorm", xv, gamma.value());
  if (beta.rows() != 1 || beta.cols() != d) shape_error("batchnorm", xv, beta.value());
  if (st.running_mean.cols() != d) shape_error("batchnorm", xv, st.running_mean);
  if (n == 0) throw Error("tensor_core", "EMPTY_SET", "batchnorm over zero rows");
  const bool needs = t.needs(x.id) || t.needs(gamma.id) || t.needs(beta.id);

  if (mode == Mode::Infer) {
    const Matrix inv = (st.running_var.array() + st.eps).rsqrt().matrix();
    Matrix xhat = (xv.rowwise() - st.running_mean.row(0)).array().rowwise() * inv.row(0).array();
    Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
    out.rowwise() += beta.value().row(0);
    return t.push(std::move(out), needs, [&t, x, gamma, beta, inv, xhat = std::move(xhat), id = t.size()] {
      const Matrix& g = t.grad(Var{&t, int(id)});
      if (t.needs(x.id))
        t.grad_ref(x.id) += (g.array().rowwise() * (gamma.value().row(0).array() * inv.row(0).array())).matrix();
      if (t.needs(gamma.id)) t.grad_ref(gamma.id) += (g.array() * xhat.array()).colwise().sum().matrix();
      if (t.needs(beta.id)) t.grad_ref(beta.id) += g.colwise().sum();
    });
  }

  const Matrix mean = xv.colwise().mean();
  const Matrix centered = xv.rowwise() - mean.row(0);
  const Matrix var = centered.array().square().colwise().mean().matrix();
  const Matrix inv = (var.array() + st.eps).rsqrt().matrix();
  Matrix xhat = (centered.array().rowwise() * inv.row(0).array()).matrix();
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);

  const double unbias = n > 1 ? double(n) / double(n - 1) : 1.0;
  st.running_mean = st.momentum * st.running_mean + (1.0 - st.momentum) * mean;
  st.running_var = st.momentum * st.running_var + (1.0 - st.momentum) * unbias * var;

  return t.push(std::move(out), needs, [&t, x, gamma, beta, inv, xhat = std::move(xhat), n, id = t.size()] {
    const Matrix& g = t.grad(Var{&t, int(id)});
    const Matrix gsum = g.colwise().sum();
    const Matrix gx = (g.array() * xhat.array()).colwise().sum().matrix();
    if (t.needs(gamma.id)) t.grad_ref(gamma.id) += gx;
    if (t.needs(beta.id)) t.grad_ref(beta.id) += gsum;
    if (t.needs(x.id)) {
      // dx = gamma * inv / n * (n g - sum(g) - xhat * sum(g xhat))
      Matrix dx = (g * double(n)).rowwise() - gsum.row(0);
      dx -= (xhat.array().rowwise() * gx.row(0).array()).matrix();
      const Matrix coef = (gamma.value().array() * inv.array() / double(n)).matrix();
      t.grad_ref(x.id) += (dx.array().rowwise() * coef.row(0).array()).matrix();
    }
  });
}

Var dropout(Var x, double p, std::mt19937_64& rng, Mode mode) {
  Tape& t = *x.tape;
  if (mode == Mode::Infer || p <= 0.0) return scale(x, 1.0);
  if (p >= 1.0) throw Error("tensor_core", "BAD_DROPOUT", "dropout probability must be below 1");
  std::bernoulli_distribution keep(1.0 - p);
  Matrix mask(x.rows(), x.cols());
  const double s = 1.0 / (1.0 - p);
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? s : 0.0;
  Matrix out = x.value().cwiseProduct(mask);
  return t.push(std::move(out), t.needs(x.id), [&t, x, mask = std::move(mask), id = t.size()] {
    t.grad_ref(x.id) += t.grad(Var{&t, int(id)}).cwiseProduct(mask);
  });
}

Var slice_cols(Var x, Index start, Index count) {
  Tape& t = *x.tape;
  if (start < 0 || count < 0 || start + count > x.cols())
    throw Error("tensor_core", "SHAPE_MISMATCH", "column slice out of range");
  Matrix out = x.value().middleCols(start, count);
  return t.push(std::move(out), t.needs(x.id), [&t, x, start, count, id = t.size()] {
    t.grad_ref(x.id).middleCols(start, count) += t.grad(Var{&t, int(id)});
  });
}

Var concat_cols(Var a, Var b) {
  same_tape(a, b);
  Tape& t = *a.tape;
  if (a.rows() != b.rows()) shape_error("concat_cols", a.value(), b.value());
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const Index ca = a.cols(), cb = b.cols();
  return t.push(std::move(out), t.needs(a.id) || t.needs(b.id), [&t, a, b, ca, cb, id = t.size()] {
    const Matrix& g = t.grad(Var{&t, int(id)});
    if (t.needs(a.id)) t.grad_ref(a.id) += g.leftCols(ca);
    if (t.needs(b.id)) t.grad_ref(b.id) += g.rightCols(cb);
  });
}

Var sum(Var x) {
  Tape& t = *x.tape;
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  return t.push(std::move(out), t.needs(x.id), [&t, x, id = t.size()] {
    t.grad_ref(x.id).array() += t.grad(Var{&t, int(id)})(0, 0);
  });
}

SegmentMax segment_max(Var x, const Segments& seg) {
  Tape& t = *x.tape;
  const Matrix& xv = x.value();
  const Index b = seg.count(), d = xv.cols();
  if (b <= 0 || seg.offsets.back() != xv.rows())
    throw Error("tensor_core", "SHAPE_MISMATCH", "segments do not cover the input rows");
  Matrix out(b, d);
  std::vector<Index> arg(std::size_t(b * d));
  for (Index s = 0; s < b; ++s) {
    if (seg.end(s) <= seg.begin(s)) throw Error("tensor_core", "EMPTY_SET", "max over an empty set");
    for (Index j = 0; j < d; ++j) {
      Index best = seg.begin(s);
      double v = xv(best, j);
      for (Index r = best + 1; r < seg.end(s); ++r)
        if (xv(r, j) > v) {
          v = xv(r, j);
          best = r;
        }
      out(s, j) = v;
      arg[std::size_t(s * d + j)] = best;
    }
  }
  SegmentMax res;
  res.argmax = arg;
  res.pooled = t.push(std::move(out), t.needs(x.id), [&t, x, arg = std::move(arg), b, d, id = t.size()] {
    const Matrix& g = t.grad(Var{&t, int(id)});
    Matrix& gx = t.grad_ref(x.id);
    for (Index s = 0; s < b; ++s)
      for (Index j = 0; j < d; ++j) gx(arg[std::size_t(s * d + j)], j) += g(s, j);
  });
  return res;
}

Var segment_transform(Var x, Var tr, const Segments& seg, Index k) {
  same_tape(x, tr);
  Tape& t = *x.tape;
  const Matrix& xv = x.value();
  if (xv.cols() != k || tr.cols() != k * k || tr.rows() != seg.count() || seg.offsets.back() != xv.rows())
    shape_error("segment_transform", xv, tr.value());
  Matrix out(xv.rows(), k);
  for (Index s = 0; s < seg.count(); ++s) {
    const Index r0 = seg.begin(s), n = seg.end(s) - r0;
    out.middleRows(r0, n).noalias() = xv.middleRows(r0, n) * square(tr.value(), s, k);
  }
  return t.push(std::move(out), t.needs(x.id) || t.needs(tr.id), [&t, x, tr, seg, k, id = t.size()] {
    const Matrix& g = t.grad(Var{&t, int(id)});
    for (Index s = 0; s < seg.count(); ++s) {
      const Index r0 = seg.begin(s), n = seg.end(s) - r0;
      if (t.needs(x.id))
        t.grad_ref(x.id).middleRows(r0, n).noalias() += g.middleRows(r0, n) * square(tr.value(), s, k).transpose();
      if (t.needs(tr.id)) {
        const Matrix da = x.value().middleRows(r0, n).transpose() * g.middleRows(r0, n);
        t.grad_ref(tr.id).row(s) += Eigen::Map<const Eigen::RowVectorXd>(da.data(), k * k);
      }
    }
  });
}

Var orthogonality_penalty(Var tr, Index k) {
  Tape& t = *tr.tape;
  if (tr.cols() != k * k) throw Error("tensor_core", "SHAPE_MISMATCH", "transform rows are not k x k");
  const Index b = tr.rows();
  Matrix out(1, 1);
  out(0, 0) = 0;
  for (Index s = 0; s < b; ++s) {
    const auto a = square(tr.value(), s, k);
    out(0, 0) += (Matrix::Identity(k, k) - a * a.transpose()).squaredNorm();
  }
  out(0, 0) /= double(b);
  return t.push(std::move(out), t.needs(tr.id), [&t, tr, k, b, id = t.size()] {
    const double g = t.grad(Var{&t, int(id)})(0, 0);
    for (Index s = 0; s < b; ++s) {
      const auto a = square(tr.value(), s, k);
      const Matrix e = Matrix::Identity(k, k) - a * a.transpose();
      const Matrix da = (-4.0 * g / double(b)) * e * a;
      t.grad_ref(tr.id).row(s) += Eigen::Map<const Eigen::RowVectorXd>(da.data(), k * k);
    }
  });
}

Var softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
  Tape& t = *logits.tape;
  const Matrix& z = logits.value();
  const Index b = z.rows(), c = z.cols();
  if (Index(labels.size()) != b) throw Error("tensor_core", "SHAPE_MISMATCH", "label count differs from batch size");
  Matrix prob(b, c);
  double loss = 0;
  for (Index i = 0; i < b; ++i) {
    const int y = labels[std::size_t(i)];
    if (y < 0 || y >= c) throw Error("tensor_core", "SHAPE_MISMATCH", "label outside the class range");
    const double m = z.row(i).maxCoeff();
    const auto e = (z.row(i).array() - m).exp();
    const double se = e.sum();
    prob.row(i) = e / se;
    loss += (m + std::log(se)) - z(i, y);
  }
  Matrix out(1, 1);
  out(0, 0) = loss / double(b);
  return t.push(std::move(out), t.needs(logits.id), [&t, logits, labels, prob = std::move(prob), b, id = t.size()] {
    const double g = t.grad(Var{&t, int(id)})(0, 0);
    Matrix d = prob;
    for (Index i = 0; i < b; ++i) d(i, labels[std::size_t(i)]) -= 1.0;
    t.grad_ref(logits.id) += (g / double(b)) * d;
  });
}

MaxOverSet max_over_set(const Matrix& x) {
  if (x.rows() == 0) throw Error("tensor_core", "EMPTY_SET", "max over an empty set");
  MaxOverSet r;
  r.pooled = x.row(0);
  r.argmax.assign(std::size_t(x.cols()), 0);
  for (Index i = 1; i < x.rows(); ++i)
    for (Index j = 0; j < x.cols(); ++j)
      if (x(i, j) > r.pooled(0, j)) {
        r.pooled(0, j) = x(i, j);
        r.argmax[std::size_t(j)] = i;
      }
  return r;
}

void Adam::step(const std::vector<Parameter*>& params) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1, double(t_));
  const double c2 = 1.0 - std::pow(beta2, double(t_));
  for (Parameter* p : params) {
    if (p->m.size() != p->value.size()) {
      p->m.setZero(p->value.rows(), p->value.cols());
      p->v.setZero(p->value.rows(), p->value.cols());
    }
    p->m = beta1 * p->m + (1.0 - beta1) * p->grad;
    p->v = beta2 * p->v + (1.0 - beta2) * p->grad.cwiseProduct(p->grad);
    p->value.array() -= lr * (p->m.array() / c1) / ((p->v.array() / c2).sqrt() + eps);
  }
}

}  // namespace onh::tensor
