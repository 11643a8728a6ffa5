#include "onh/pointnet.hpp"
#include "onh/parallel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace onh {

using tensor::Index;
using tensor::Matrix;
using tensor::Mode;
using tensor::Tape;
using tensor::Var;

namespace {

[[noreturn]] void fail(const std::string& code, const std::string& msg) { throw Error("pointnet", code, msg); }

DenseLayer make_dense(const std::string& name, int in, int out, bool bn, bool relu, std::mt19937_64& rng,
                      const PointNetArch& arch, bool zero = false) {
  DenseLayer L;
  Matrix w(in, out);
  std::normal_distribution<double> init(0.0, std::sqrt(2.0 / in));
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = zero ? 0.0 : init(rng);
  L.W = tensor::Parameter(name + ".W", w);
  L.b = tensor::Parameter(name + ".b", Matrix::Zero(1, out));
  L.use_bn = bn;
  L.use_relu = relu;
  if (bn) {
    L.gamma = tensor::Parameter(name + ".gamma", Matrix::Ones(1, out));
    L.beta = tensor::Parameter(name + ".beta", Matrix::Zero(1, out));
    L.bn = tensor::BatchNormState(out);
    L.bn.momentum = arch.bn_momentum;
    L.bn.eps = arch.bn_eps;
  }
  return L;
}

std::vector<DenseLayer> make_stack(const std::string& name, int in, const std::vector<int>& widths, std::mt19937_64& rng,
                                   const PointNetArch& arch) {
  std::vector<DenseLayer> out;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    out.push_back(make_dense(name + "." + std::to_string(i), in, widths[i], true, true, rng, arch));
    in = widths[i];
  }
  return out;
}

TNet make_tnet(const std::string& name, int k, int in, std::mt19937_64& rng, const PointNetArch& arch) {
  TNet t;
  t.k = k;
  t.mlp = make_stack(name + ".mlp", in, arch.tnet_mlp, rng, arch);
  const int pooled = arch.tnet_mlp.empty() ? in : arch.tnet_mlp.back();
  t.fc = make_stack(name + ".fc", pooled, arch.tnet_head, rng, arch);
  const int last = arch.tnet_head.empty() ? pooled : arch.tnet_head.back();
  t.out = make_dense(name + ".out", last, k * k, false, false, rng, arch, true);
  return t;
}

Matrix identity_row(int k) {
  Matrix m = Matrix::Zero(1, k * k);
  for (int i = 0; i < k; ++i) m(0, i * k + i) = 1.0;
  return m;
}

Var dense_tape(Tape& tape, Var x, DenseLayer& L, Mode mode) {
  Var h = tensor::add_bias(tensor::matmul(x, tape.param(L.W)), tape.param(L.b));
  if (L.use_bn) h = tensor::batchnorm(h, tape.param(L.gamma), tape.param(L.beta), L.bn, mode);
  if (L.use_relu) h = tensor::relu(h);
  return h;
}

Var stack_tape(Tape& tape, Var x, std::vector<DenseLayer>& layers, Mode mode) {
  for (DenseLayer& L : layers) x = dense_tape(tape, x, L, mode);
  return x;
}

Var tnet_tape(Tape& tape, Var x, TNet& t, const tensor::Segments& seg, Mode mode) {
  Var h = stack_tape(tape, x, t.mlp, mode);
  Var g = tensor::segment_max(h, seg).pooled;
  g = stack_tape(tape, g, t.fc, mode);
  g = dense_tape(tape, g, t.out, mode);
  return tensor::add_row_constant(g, identity_row(t.k));
}

/// Row-wise dense layer in inference mode. Each output element is produced by the
/// same sequence of floating-point operations regardless of its row.
Matrix dense_rows(const Matrix& in, const DenseLayer& L) {
  const Index n = in.rows(), d = L.W.value.cols(), k = L.W.value.rows();
  Matrix out(n, d);
  Eigen::RowVectorXd scale, shift;
  if (L.use_bn) {
    scale = (L.bn.running_var.array() + L.bn.eps).rsqrt().matrix();
  }
  for (Index i = 0; i < n; ++i) {
    auto row = out.row(i);
    row = L.b.value.row(0);
    for (Index j = 0; j < k; ++j) row.noalias() += in(i, j) * L.W.value.row(j);
    if (L.use_bn) {
      row.array() = (row.array() - L.bn.running_mean.row(0).array()) * scale.array();
      row.array() = row.array() * L.gamma.value.row(0).array() + L.beta.value.row(0).array();
    }
    if (L.use_relu) row = row.cwiseMax(0.0);
  }
  return out;
}

Matrix stack_rows(Matrix x, const std::vector<DenseLayer>& layers) {
  for (const DenseLayer& L : layers) x = dense_rows(x, L);
  return x;
}

/// Applies a k x k transform (row-major in t) to every row.
Matrix transform_rows(const Matrix& x, const Matrix& t, Index k) {
  Matrix out(x.rows(), k);
  const Eigen::Map<const Matrix> a(t.data(), k, k);
  for (Index i = 0; i < x.rows(); ++i) {
    auto row = out.row(i);
    row.setZero();
    for (Index j = 0; j < k; ++j) row.noalias() += x(i, j) * a.row(j);
  }
  return out;
}

Matrix tnet_rows(const Matrix& x, const TNet& t) {
  const Matrix h = stack_rows(x, t.mlp);
  Matrix g = tensor::max_over_set(h).pooled;
  g = stack_rows(g, t.fc);
  g = dense_rows(g, t.out);
  return g + identity_row(t.k);
}

void layer_arrays(const DenseLayer& L, std::vector<std::pair<std::string, Matrix*>>& out) {
  auto* l = const_cast<DenseLayer*>(&L);
  out.emplace_back(L.W.name, &l->W.value);
  out.emplace_back(L.b.name, &l->b.value);
  if (L.use_bn) {
    const std::string base = L.W.name.substr(0, L.W.name.size() - 2);
    out.emplace_back(L.gamma.name, &l->gamma.value);
    out.emplace_back(L.beta.name, &l->beta.value);
    out.emplace_back(base + ".running_mean", &l->bn.running_mean);
    out.emplace_back(base + ".running_var", &l->bn.running_var);
  }
}

void layer_params(DenseLayer& L, std::vector<tensor::Parameter*>& out) {
  out.push_back(&L.W);
  out.push_back(&L.b);
  if (L.use_bn) {
    out.push_back(&L.gamma);
    out.push_back(&L.beta);
  }
}

}  // namespace

PointNetModel::PointNetModel(const PointNetArch& arch, std::uint64_t seed) : arch_(arch) {
  if (arch.in_channels < 3) fail("BAD_ARCHITECTURE", "need at least the three coordinate channels");
  if (arch.classes < 2) fail("BAD_ARCHITECTURE", "need at least two classes");
  std::mt19937_64 rng(seed);
  if (arch.input_tnet) input_tnet_ = make_tnet("input_tnet", 3, 3, rng, arch);
  mlp1_ = make_stack("mlp1", arch.in_channels, arch.mlp1, rng, arch);
  const int f = arch.mlp1.empty() ? arch.in_channels : arch.mlp1.back();
  if (arch.feature_tnet) feature_tnet_ = make_tnet("feature_tnet", f, f, rng, arch);
  mlp2_ = make_stack("mlp2", f, arch.mlp2, rng, arch);
  head_ = make_stack("head", arch_.global_dim(), arch.head, rng, arch);
  const int last = arch.head.empty() ? arch_.global_dim() : arch.head.back();
  head_.push_back(make_dense("head." + std::to_string(arch.head.size()), last, arch.classes, false, false, rng, arch));
}

std::vector<tensor::Parameter*> PointNetModel::parameters() {
  std::vector<tensor::Parameter*> out;
  auto tnet = [&](std::optional<TNet>& t) {
    if (!t) return;
    for (auto& L : t->mlp) layer_params(L, out);
    for (auto& L : t->fc) layer_params(L, out);
    layer_params(t->out, out);
  };
  tnet(input_tnet_);
  for (auto& L : mlp1_) layer_params(L, out);
  tnet(feature_tnet_);
  for (auto& L : mlp2_) layer_params(L, out);
  for (auto& L : head_) layer_params(L, out);
  return out;
}

std::vector<std::pair<std::string, Matrix*>> PointNetModel::named_arrays() {
  std::vector<std::pair<std::string, Matrix*>> out;
  auto tnet = [&](const std::optional<TNet>& t) {
    if (!t) return;
    for (auto& L : t->mlp) layer_arrays(L, out);
    for (auto& L : t->fc) layer_arrays(L, out);
    layer_arrays(t->out, out);
  };
  tnet(input_tnet_);
  for (auto& L : mlp1_) layer_arrays(L, out);
  tnet(feature_tnet_);
  for (auto& L : mlp2_) layer_arrays(L, out);
  for (auto& L : head_) layer_arrays(L, out);
  return out;
}

std::size_t PointNetModel::parameter_count() {
  std::size_t n = 0;
  for (auto* p : parameters()) n += std::size_t(p->value.size());
  return n;
}

Var PointNetModel::forward(Tape& tape, const Matrix& x, const tensor::Segments& seg, Mode mode, std::mt19937_64& rng,
                           std::optional<Var>* reg) {
  if (x.cols() != arch_.in_channels) fail("SHAPE_MISMATCH", "input has " + std::to_string(x.cols()) + " channels");
  Var h = tape.constant(x);
  if (input_tnet_) {
    Var xyz = tensor::slice_cols(h, 0, 3);
    Var t = tnet_tape(tape, xyz, *input_tnet_, seg, mode);
    xyz = tensor::segment_transform(xyz, t, seg, 3);
    h = arch_.in_channels > 3 ? tensor::concat_cols(xyz, tensor::slice_cols(h, 3, arch_.in_channels - 3)) : xyz;
  }
  h = stack_tape(tape, h, mlp1_, mode);
  if (feature_tnet_) {
    Var t = tnet_tape(tape, h, *feature_tnet_, seg, mode);
    h = tensor::segment_transform(h, t, seg, feature_tnet_->k);
    if (reg) *reg = tensor::orthogonality_penalty(t, feature_tnet_->k);
  }
  h = stack_tape(tape, h, mlp2_, mode);
  Var g = tensor::segment_max(h, seg).pooled;
  for (std::size_t i = 0; i + 1 < head_.size(); ++i) g = dense_tape(tape, g, head_[i], mode);
  g = tensor::dropout(g, arch_.dropout, rng, mode);
  return dense_tape(tape, g, head_.back(), mode);
}

Inference PointNetModel::infer(const FeatureMatrix& points) const {
  if (points.rows() == 0) fail("EMPTY_CLOUD", "forward on an empty cloud");
  Matrix h = points;
  if (h.cols() != arch_.in_channels) fail("SHAPE_MISMATCH", "input has " + std::to_string(h.cols()) + " channels");
  if (input_tnet_) {
    const Matrix xyz = h.leftCols(3);
    const Matrix t = tnet_rows(xyz, *input_tnet_);
    h.leftCols(3) = transform_rows(xyz, t, 3);
  }
  h = stack_rows(std::move(h), mlp1_);
  if (feature_tnet_) h = transform_rows(h, tnet_rows(h, *feature_tnet_), feature_tnet_->k);
  h = stack_rows(std::move(h), mlp2_);
  tensor::MaxOverSet pool = tensor::max_over_set(h);
  Matrix g = stack_rows(pool.pooled, head_);
  Inference r;
  r.logits.assign(g.data(), g.data() + g.size());
  r.argmax = std::move(pool.argmax);
  return r;
}

double PointNetModel::score(const FeatureMatrix& points) const {
  const Inference r = infer(points);
  return 1.0 / (1.0 + std::exp(r.logits[0] - r.logits[1]));
}

// ---------------------------------------------------------------- training

void TrainConfig::validate() const {
  if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9)
    fail("BAD_TRAIN_CONFIG", "split fractions must sum to 1");
  if (!(train_fraction > 0 && val_fraction > 0 && test_fraction > 0))
    fail("BAD_TRAIN_CONFIG", "split fractions must be positive");
  if (folds < 2) fail("BAD_TRAIN_CONFIG", "folds must be at least 2");
  if (batch_size < 2) fail("BAD_TRAIN_CONFIG", "batch size must be at least 2");
  if (epochs < 1) fail("BAD_TRAIN_CONFIG", "epochs must be at least 1");
  if (!(lr > 0)) fail("BAD_TRAIN_CONFIG", "step size must be positive");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("BAD_TRAIN_CONFIG", "moment decays must lie in [0, 1)");
  if (!(ortho_weight >= 0)) fail("BAD_TRAIN_CONFIG", "orthogonality weight must be non-negative");
  augment.validate();
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) fail("SHAPE_MISMATCH", "scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0;
  std::size_t pos = 0, n1 = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) fail("BAD_LABEL", "labels must be 0 or 1");
    n1 += std::size_t(l);
  }
  const std::size_t n0 = n - n1;
  if (n1 == 0 || n0 == 0) fail("SINGLE_CLASS", "AUC needs both classes");
  while (pos < n) {
    std::size_t end = pos;
    while (end + 1 < n && scores[order[end + 1]] == scores[order[pos]]) ++end;
    const double mid_rank = 0.5 * double(pos + end) + 1.0;
    for (std::size_t i = pos; i <= end; ++i)
      if (labels[order[i]] == 1) rank_sum += mid_rank;
    pos = end + 1;
  }
  return (rank_sum - double(n1) * double(n1 + 1) / 2.0) / (double(n1) * double(n0));
}

PointCloud evaluation_cloud(const PointCloud& cloud, std::size_t eval_points, std::uint64_t seed) {
  if (eval_points == 0) return cloud;
  return sample(cloud, eval_points, eye_seed(seed, cloud.eye_id + "#eval"));
}

std::vector<double> score_all(const PointNetModel& model, const std::vector<const PointCloud*>& clouds,
                              std::size_t eval_points, std::uint64_t seed, unsigned threads) {
  std::vector<double> out(clouds.size());
  parallel_for(clouds.size(), threads, [&](std::size_t i) {
    out[i] = model.score(features(evaluation_cloud(*clouds[i], eval_points, seed)));
  });
  return out;
}

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <class T>
void shuffle_in_place(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(v[i - 1], v[pick(rng)]);
  }
}

struct RunOutput {
  PointNetModel model;
  std::vector<double> loss, val_auc;
  int best_epoch = -1;
};

double eval_auc(const PointNetModel& model, const std::vector<LabeledCloud>& data, const std::vector<std::size_t>& ids,
                const TrainConfig& cfg) {
  std::vector<const PointCloud*> clouds;
  std::vector<int> labels;
  for (std::size_t i : ids) {
    clouds.push_back(data[i].cloud);
    labels.push_back(data[i].label);
  }
  return auc(score_all(model, clouds, cfg.eval_points, cfg.seed, cfg.threads), labels);
}

RunOutput run_training(const std::vector<LabeledCloud>& data, const std::vector<std::size_t>& train_ids,
                       const std::vector<std::size_t>& eval_ids, const TrainConfig& cfg, std::uint64_t run_seed,
                       bool select_best) {
  RunOutput r;
  PointNetModel model(cfg.arch, mix(run_seed, 1));
  tensor::Adam adam;
  adam.lr = cfg.lr;
  adam.beta1 = cfg.beta1;
  adam.beta2 = cfg.beta2;
  std::mt19937_64 rng(mix(run_seed, 2));
  const auto params = model.parameters();
  double best = -1;

  std::vector<std::size_t> by_class[2];
  for (std::size_t i : train_ids) by_class[data[i].label].push_back(i);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // (eye, copy) pairs; minority eyes are duplicated with fresh augmentation streams
    std::vector<std::pair<std::size_t, int>> order;
    for (std::size_t i : train_ids) order.emplace_back(i, 0);
    if (cfg.augment.oversample && !by_class[0].empty() && !by_class[1].empty()) {
      const int minority = by_class[0].size() < by_class[1].size() ? 0 : 1;
      std::vector<std::size_t> pool = by_class[minority];
      shuffle_in_place(pool, rng);
      const std::size_t deficit = by_class[1 - minority].size() - by_class[minority].size();
      for (std::size_t j = 0; j < deficit; ++j) order.emplace_back(pool[j % pool.size()], int(1 + j / pool.size()));
    }
    shuffle_in_place(order, rng);

    double loss_sum = 0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += std::size_t(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + std::size_t(cfg.batch_size));
      if (stop - start < 2) continue;
      tensor::Segments seg;
      std::vector<FeatureMatrix> feats;
      std::vector<int> labels;
      Index rows = 0;
      for (std::size_t k = start; k < stop; ++k) {
        const auto [i, copy] = order[k];
        const std::uint64_t s = mix(mix(run_seed, std::uint64_t(epoch) + 3), std::uint64_t(copy));
        feats.push_back(features(augment(*data[i].cloud, cfg.augment, eye_seed(s, data[i].cloud->eye_id))));
        seg.push(feats.back().rows());
        rows += feats.back().rows();
        labels.push_back(data[i].label);
      }
      Matrix x(rows, cfg.arch.in_channels);
      Index at = 0;
      for (const auto& f : feats) {
        x.middleRows(at, f.rows()) = f;
        at += f.rows();
      }
      Tape tape;
      std::optional<Var> reg;
      Var logits = model.forward(tape, x, seg, Mode::Train, rng, &reg);
      Var loss = tensor::softmax_cross_entropy(logits, labels);
      if (reg && cfg.ortho_weight > 0) loss = tensor::add(loss, tensor::scale(*reg, cfg.ortho_weight));
      for (auto* p : params) p->zero_grad();
      tape.backward(loss);
      adam.step(params);
      loss_sum += loss.value()(0, 0);
      ++batches;
    }
    r.loss.push_back(batches ? loss_sum / batches : kNaN);

    if (select_best) {
      const double a = eval_auc(model, data, eval_ids, cfg);
      r.val_auc.push_back(a);
      if (a > best) {
        best = a;
        r.best_epoch = epoch;
        r.model = model;
      }
    }
  }
  if (!select_best) {
    r.model = model;
    r.best_epoch = cfg.epochs - 1;
  }
  return r;
}

std::vector<std::string> ids_of(const std::vector<LabeledCloud>& data, const std::vector<std::size_t>& idx) {
  std::vector<std::string> out;
  for (std::size_t i : idx) out.push_back(data[i].cloud->eye_id);
  return out;
}

}  // namespace

TrainResult train(const std::vector<LabeledCloud>& data, const TrainConfig& cfg) {
  cfg.validate();
  std::vector<std::size_t> cls[2];
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!data[i].cloud) fail("BAD_DATASET", "null cloud");
    if (data[i].label != 0 && data[i].label != 1) fail("BAD_LABEL", "labels must be 0 or 1");
    cls[data[i].label].push_back(i);
  }
  if (cls[0].empty() || cls[1].empty()) fail("SINGLE_CLASS", "training needs both classes");
  if (cls[0].size() < 10 || cls[1].size() < 10)
    fail("TOO_FEW_EYES", "each class needs at least 10 eyes (got " + std::to_string(cls[0].size()) + " and " +
                             std::to_string(cls[1].size()) + ")");

  std::mt19937_64 rng(mix(cfg.seed, 0));
  std::vector<std::size_t> tr, va, te;
  for (auto& c : cls) {
    std::vector<std::size_t> v = c;
    shuffle_in_place(v, rng);
    const auto n = v.size();
    const auto n_tr = std::size_t(std::llround(cfg.train_fraction * double(n)));
    const auto n_va = std::max<std::size_t>(1, std::size_t(std::llround(cfg.val_fraction * double(n))));
    if (n_tr + n_va >= n) fail("TOO_FEW_EYES", "split leaves no test eyes");
    tr.insert(tr.end(), v.begin(), v.begin() + long(n_tr));
    va.insert(va.end(), v.begin() + long(n_tr), v.begin() + long(n_tr + n_va));
    te.insert(te.end(), v.begin() + long(n_tr + n_va), v.end());
  }
  std::sort(tr.begin(), tr.end());
  std::sort(va.begin(), va.end());
  std::sort(te.begin(), te.end());

  TrainResult out;
  EvalReport& rep = out.report;
  rep.train_ids = ids_of(data, tr);
  rep.val_ids = ids_of(data, va);
  rep.test_ids = ids_of(data, te);

  if (cfg.cross_validate) {
    std::vector<std::vector<std::size_t>> folds(std::size_t(cfg.folds));
    for (int c = 0; c < 2; ++c) {
      std::vector<std::size_t> pool;
      for (std::size_t i : tr)
        if (data[i].label == c) pool.push_back(i);
      for (std::size_t i : va)
        if (data[i].label == c) pool.push_back(i);
      if (pool.size() < std::size_t(cfg.folds)) fail("TOO_FEW_EYES", "fewer eyes than folds in one class");
      shuffle_in_place(pool, rng);
      for (std::size_t j = 0; j < pool.size(); ++j) folds[j % folds.size()].push_back(pool[j]);
    }
    for (int f = 0; f < cfg.folds; ++f) {
      std::vector<std::size_t> fit;
      for (int g = 0; g < cfg.folds; ++g)
        if (g != f) fit.insert(fit.end(), folds[std::size_t(g)].begin(), folds[std::size_t(g)].end());
      std::sort(fit.begin(), fit.end());
      std::vector<std::size_t> held = folds[std::size_t(f)];
      std::sort(held.begin(), held.end());
      const RunOutput run = run_training(data, fit, held, cfg, mix(cfg.seed, 100 + std::uint64_t(f)), false);
      rep.fold_aucs.push_back(eval_auc(run.model, data, held, cfg));
    }
    const double k = double(rep.fold_aucs.size());
    rep.auc_mean = std::accumulate(rep.fold_aucs.begin(), rep.fold_aucs.end(), 0.0) / k;
    double ss = 0;
    for (double a : rep.fold_aucs) ss += (a - rep.auc_mean) * (a - rep.auc_mean);
    rep.auc_sd = std::sqrt(ss / (k - 1));
  }

  RunOutput final_run = run_training(data, tr, va, cfg, mix(cfg.seed, 7), true);
  out.model = std::move(final_run.model);
  rep.best_epoch = final_run.best_epoch;
  rep.epoch_loss = final_run.loss;
  rep.epoch_val_auc = final_run.val_auc;

  std::vector<const PointCloud*> clouds;
  std::vector<int> labels;
  for (std::size_t i : te) {
    clouds.push_back(data[i].cloud);
    labels.push_back(data[i].label);
  }
  const auto scores = score_all(out.model, clouds, cfg.eval_points, cfg.seed, cfg.threads);
  rep.test_auc = auc(scores, labels);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= 0.5;
    if (labels[i] == 1) (pred ? rep.confusion.tp : rep.confusion.fn)++;
    else (pred ? rep.confusion.fp : rep.confusion.tn)++;
  }

  out.model.metadata = nlohmann::json::object();
  out.model.metadata["training"] = to_json(cfg);
  out.model.metadata["eval_points"] = cfg.eval_points;
  out.model.metadata["eval_seed"] = cfg.seed;
  out.model.metadata["best_epoch"] = rep.best_epoch;
  return out;
}

// ---------------------------------------------------------------- serialization

namespace {

nlohmann::json arch_json(const PointNetArch& a) {
  return {{"in_channels", a.in_channels}, {"mlp1", a.mlp1},         {"mlp2", a.mlp2},
          {"head", a.head},               {"classes", a.classes},   {"dropout", a.dropout},
          {"input_tnet", a.input_tnet},   {"feature_tnet", a.feature_tnet}, {"tnet_mlp", a.tnet_mlp},
          {"tnet_head", a.tnet_head},     {"global_dim", a.global_dim()}};
}

PointNetArch arch_from_json(const nlohmann::json& j, PointNetArch a) {
  for (const auto& [key, v] : j.items()) {
    if (key == "in_channels") a.in_channels = v.get<int>();
    else if (key == "mlp1") a.mlp1 = v.get<std::vector<int>>();
    else if (key == "mlp2") a.mlp2 = v.get<std::vector<int>>();
    else if (key == "head") a.head = v.get<std::vector<int>>();
    else if (key == "classes") a.classes = v.get<int>();
    else if (key == "dropout") a.dropout = v.get<double>();
    else if (key == "input_tnet") a.input_tnet = v.get<bool>();
    else if (key == "feature_tnet") a.feature_tnet = v.get<bool>();
    else if (key == "tnet_mlp") a.tnet_mlp = v.get<std::vector<int>>();
    else if (key == "tnet_head") a.tnet_head = v.get<std::vector<int>>();
    else if (key == "bn_momentum") a.bn_momentum = v.get<double>();
    else if (key == "bn_eps") a.bn_eps = v.get<double>();
    else if (key == "global_dim") continue;
    else fail("BAD_TRAIN_CONFIG", "unknown architecture key: " + key);
  }
  return a;
}

nlohmann::json augment_json(const AugmentConfig& a) {
  return {{"crop_fraction", {a.crop_fraction_min, a.crop_fraction_max}},
          {"rotation_deg", {a.rotation_deg_min, a.rotation_deg_max}},
          {"translation_um", a.translation_um},
          {"sample_n", a.sample_n},
          {"noise_sigma_um", a.noise_sigma_um},
          {"oversample", a.oversample}};
}

AugmentConfig augment_from_json(const nlohmann::json& j, AugmentConfig a) {
  for (const auto& [key, v] : j.items()) {
    if (key == "crop_fraction") {
      a.crop_fraction_min = v.at(0).get<double>();
      a.crop_fraction_max = v.at(1).get<double>();
    } else if (key == "rotation_deg") {
      a.rotation_deg_min = v.at(0).get<double>();
      a.rotation_deg_max = v.at(1).get<double>();
    } else if (key == "translation_um") a.translation_um = v.get<double>();
    else if (key == "sample_n") a.sample_n = v.get<std::size_t>();
    else if (key == "noise_sigma_um") a.noise_sigma_um = v.get<double>();
    else if (key == "oversample") a.oversample = v.get<bool>();
    else fail("BAD_TRAIN_CONFIG", "unknown augment key: " + key);
  }
  return a;
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

}  // namespace

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"betas", {c.beta1, c.beta2}},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"augment", augment_json(c.augment)},
          {"split", {c.train_fraction, c.val_fraction, c.test_fraction}},
          {"folds", c.folds},
          {"cross_validate", c.cross_validate},
          {"ortho_weight", c.ortho_weight},
          {"eval_points", c.eval_points},
          {"architecture", arch_json(c.arch)},
          {"batchnorm", {{"momentum", c.arch.bn_momentum}, {"eps", c.arch.bn_eps}}}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  if (!j.is_object()) fail("BAD_TRAIN_CONFIG", "training config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "lr") c.lr = v.get<double>();
      else if (key == "betas") {
        c.beta1 = v.at(0).get<double>();
        c.beta2 = v.at(1).get<double>();
      } else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "epochs") c.epochs = v.get<int>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "augment") c.augment = augment_from_json(v, c.augment);
      else if (key == "split") {
        c.train_fraction = v.at(0).get<double>();
        c.val_fraction = v.at(1).get<double>();
        c.test_fraction = v.at(2).get<double>();
      } else if (key == "folds") c.folds = v.get<int>();
      else if (key == "cross_validate") c.cross_validate = v.get<bool>();
      else if (key == "ortho_weight") c.ortho_weight = v.get<double>();
      else if (key == "eval_points") c.eval_points = v.get<std::size_t>();
      else if (key == "threads") c.threads = v.get<unsigned>();
      else if (key == "architecture") c.arch = arch_from_json(v, c.arch);
      else if (key == "batchnorm") {
        c.arch.bn_momentum = v.at("momentum").get<double>();
        c.arch.bn_eps = v.at("eps").get<double>();
      } else fail("BAD_TRAIN_CONFIG", "unknown training key: " + key);
    }
  } catch (const nlohmann::json::exception& e) {
    fail("BAD_TRAIN_CONFIG", e.what());
  }
  return c;
}

nlohmann::json to_json(const EvalReport& r) {
  auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
  nlohmann::json j;
  j["auc_mean"] = num(r.auc_mean);
  j["auc_sd"] = num(r.auc_sd);
  j["fold_aucs"] = r.fold_aucs;
  j["test_auc"] = num(r.test_auc);
  j["confusion"] = {{"tp", r.confusion.tp}, {"fp", r.confusion.fp}, {"tn", r.confusion.tn}, {"fn", r.confusion.fn}};
  j["best_epoch"] = r.best_epoch;
  j["epoch_loss"] = nlohmann::json::array();
  for (double v : r.epoch_loss) j["epoch_loss"].push_back(num(v));
  j["epoch_val_auc"] = r.epoch_val_auc;
  j["train_ids"] = r.train_ids;
  j["val_ids"] = r.val_ids;
  j["test_ids"] = r.test_ids;
  return j;
}

std::vector<std::uint8_t> encode_model(const PointNetModel& model) {
  auto& m = const_cast<PointNetModel&>(model);
  nlohmann::json manifest;
  manifest["format"] = "onhpn";
  manifest["version"] = 1;
  manifest["architecture"] = arch_json(model.arch());
  manifest["batchnorm"] = {{"momentum", model.arch().bn_momentum}, {"eps", model.arch().bn_eps}};
  manifest["feature_scale"] = kFeatureScale;
  manifest["feature_channels"] = {"x_mm", "y_mm", "z_mm", "thickness_mm"};
  manifest["metadata"] = model.metadata.is_null() ? nlohmann::json::object() : model.metadata;
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  const auto arrays = m.named_arrays();
  for (const auto& [name, mat] : arrays) {
    tensors.push_back({{"name", name}, {"shape", {mat->rows(), mat->cols()}}, {"offset", offset}});
    offset += std::uint64_t(mat->size()) * 8;
  }
  manifest["tensors"] = tensors;
  manifest["blob_bytes"] = offset;

  const std::string text = manifest.dump();
  std::vector<std::uint8_t> out;
  out.reserve(8 + text.size() + offset);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, mat] : arrays)
    for (Index i = 0; i < mat->size(); ++i) put_u64(out, std::bit_cast<std::uint64_t>(mat->data()[i]));
  return out;
}

PointNetModel decode_model(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8) fail("BAD_MODEL_FILE", "truncated model file");
  const std::uint64_t len = get_u64(bytes.data());
  if (len > bytes.size() - 8) fail("BAD_MODEL_FILE", "manifest length exceeds file size");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + long(len));
  } catch (const nlohmann::json::exception& e) {
    fail("BAD_MODEL_FILE", std::string("manifest is not valid JSON: ") + e.what());
  }
  try {
    if (manifest.at("format") != "onhpn" || manifest.at("version") != 1)
      fail("BAD_MODEL_FILE", "unsupported model format or version");
    PointNetArch arch = arch_from_json(manifest.at("architecture"), {});
    arch.bn_momentum = manifest.at("batchnorm").at("momentum").get<double>();
    arch.bn_eps = manifest.at("batchnorm").at("eps").get<double>();
    PointNetModel model(arch, 0);
    model.metadata = manifest.at("metadata");
    const std::size_t blob = 8 + std::size_t(len);
    const auto blob_bytes = manifest.at("blob_bytes").get<std::uint64_t>();
    if (bytes.size() != blob + blob_bytes) fail("BAD_MODEL_FILE", "weight blob size mismatch");
    auto arrays = model.named_arrays();
    const auto& tensors = manifest.at("tensors");
    if (tensors.size() != arrays.size()) fail("BAD_MODEL_FILE", "tensor count does not match the architecture");
    for (std::size_t i = 0; i < arrays.size(); ++i) {
      const auto& t = tensors[i];
      auto& [name, mat] = arrays[i];
      if (t.at("name").get<std::string>() != name) fail("BAD_MODEL_FILE", "unexpected tensor " + t.at("name").dump());
      if (t.at("shape").at(0).get<Index>() != mat->rows() || t.at("shape").at(1).get<Index>() != mat->cols())
        fail("BAD_MODEL_FILE", "shape mismatch for " + name);
      const auto off = t.at("offset").get<std::uint64_t>();
      if (off + std::uint64_t(mat->size()) * 8 > blob_bytes) fail("BAD_MODEL_FILE", "tensor " + name + " out of range");
      for (Index k = 0; k < mat->size(); ++k)
        mat->data()[k] = std::bit_cast<double>(get_u64(bytes.data() + blob + off + std::uint64_t(k) * 8));
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    fail("BAD_MODEL_FILE", e.what());
  }
}

void save_model(const PointNetModel& model, const std::filesystem::path& path) {
  const auto bytes = encode_model(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("IO_FAILURE", "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) fail("IO_FAILURE", "write failed for " + path.string());
}

PointNetModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("IO_FAILURE", "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_model(bytes);
}

}  // namespace onh
