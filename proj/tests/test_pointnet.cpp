#include <doctest.h>

#include "gradcheck.hpp"
#include "onh/pointnet.hpp"

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <random>

using namespace onh;
using tensor::Matrix;

namespace {

PointNetArch tiny_arch(bool tnets) {
  PointNetArch a;
  a.mlp1 = {4};
  a.mlp2 = {6};
  a.head = {4};
  a.dropout = 0.2;
  a.input_tnet = a.feature_tnet = tnets;
  a.tnet_mlp = {4};
  a.tnet_head = {3};
  return a;
}

PointNetArch small_arch() {
  PointNetArch a;
  a.mlp1 = {16};
  a.mlp2 = {16, 32};
  a.head = {16};
  return a;
}

FeatureMatrix random_points(Eigen::Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0, 0.5);
  FeatureMatrix f(n, 4);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = g(rng);
  return f;
}

PointCloud synthetic_cloud(const std::string& id, int label, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0, 200);
  PointCloud c;
  c.eye_id = id;
  c.label = label ? SeverityGroup::Mild : SeverityGroup::Normal;
  for (int i = 0; i < 150; ++i) {
    const double x = g(rng), y = g(rng);
    const double z = (label ? 120.0 : 0.0) * std::exp(-(x * x + y * y) / 1e5) + 0.1 * g(rng);
    c.points.push_back({x, y, z, 100 + 0.05 * g(rng), TissueLabel::RnflPlt});
  }
  return c;
}

TrainConfig quick_config() {
  TrainConfig cfg;
  cfg.arch = small_arch();
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.folds = 2;
  cfg.augment.sample_n = 64;
  cfg.eval_points = 100;
  cfg.seed = 7;
  return cfg;
}

std::string code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.module() + "." + e.code();
  }
  return "";
}

}  // namespace

TEST_CASE("logits are invariant to order and duplication") {
  std::mt19937_64 rng(1);
  for (bool tnets : {false, true}) {
    PointNetArch arch;
    arch.input_tnet = arch.feature_tnet = tnets;
    const PointNetModel m(arch, 3);
    const FeatureMatrix x = random_points(300, rng);
    const Inference base = m.infer(x);
    REQUIRE(base.argmax.size() == 256);

    std::vector<Eigen::Index> perm(300);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    FeatureMatrix px(300, 4);
    for (Eigen::Index i = 0; i < 300; ++i) px.row(i) = x.row(perm[std::size_t(i)]);
    const Inference p = m.infer(px);
    CHECK(p.logits == base.logits);
    for (std::size_t d = 0; d < 256; ++d) {
      const Eigen::RowVector4d a = px.row(p.argmax[d]), b = x.row(base.argmax[d]);
      if (a == b) continue;
      FeatureMatrix ab(2, 4), ba(2, 4);
      ab << a, b;
      ba << b, a;
      CHECK(m.infer(ab).argmax[d] == 0);
      CHECK(m.infer(ba).argmax[d] == 0);
    }

    FeatureMatrix dup(600, 4);
    dup << x, x;
    CHECK(m.infer(dup).logits == base.logits);

    const Inference single = m.infer(x.topRows(1));
    CHECK(std::all_of(single.argmax.begin(), single.argmax.end(), [](auto a) { return a == 0; }));
  }
}

TEST_CASE("tape forward agrees with row-wise inference") {
  std::mt19937_64 rng(2);
  PointNetArch arch = small_arch();
  arch.input_tnet = arch.feature_tnet = true;
  PointNetModel m(arch, 5);
  const FeatureMatrix x = random_points(40, rng);
  tensor::Tape t;
  tensor::Segments seg;
  seg.push(40);
  std::mt19937_64 drop(0);
  const Matrix logits = m.forward(t, x, seg, tensor::Mode::Infer, drop).value();
  const Inference inf = m.infer(x);
  for (int c = 0; c < 2; ++c) CHECK(logits(0, c) == doctest::Approx(inf.logits[std::size_t(c)]).epsilon(1e-12));
  const double s = m.score(x);
  CHECK(s == doctest::Approx(1 / (1 + std::exp(inf.logits[0] - inf.logits[1]))));
}

TEST_CASE("tiny network gradients against central differences") {
  for (bool tnets : {false, true}) {
    PointNetModel m(tiny_arch(tnets), 11);
    CHECK(m.parameter_count() <= 500);
    std::mt19937_64 rng(12);
    const FeatureMatrix a = random_points(8, rng), b = random_points(8, rng);
    Matrix x(16, 4);
    x << a, b;
    tensor::Segments seg;
    seg.push(8);
    seg.push(8);
    auto run = [&](bool grad) {
      tensor::Tape t;
      std::mt19937_64 drop(4);
      std::optional<tensor::Var> reg;
      tensor::Var loss = tensor::softmax_cross_entropy(m.forward(t, x, seg, tensor::Mode::Train, drop, &reg), {0, 1});
      if (reg) loss = tensor::add(loss, tensor::scale(*reg, 0.01));
      if (grad) t.backward(loss);
      return loss.value()(0, 0);
    };
    const auto res = testing::check_gradients(m.parameters(), run);
    CHECK(res.checked == m.parameter_count());
    CHECK(res.max_rel < 1e-4);
  }
}

TEST_CASE("AUC") {
  CHECK(auc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == 1.0);
  CHECK(auc({0.9, 0.8, 0.2, 0.1}, {0, 0, 1, 1}) == 0.0);
  CHECK(auc({0.5, 0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1, 1}) == 0.5);
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> coarse(0, 9);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(40);
    std::vector<int> y(40);
    for (int i = 0; i < 40; ++i) {
      s[std::size_t(i)] = coarse(rng) / 10.0;
      y[std::size_t(i)] = i % 3 == 0;
    }
    double pairs = 0, wins = 0;
    for (int i = 0; i < 40; ++i)
      for (int j = 0; j < 40; ++j)
        if (y[std::size_t(i)] == 1 && y[std::size_t(j)] == 0) {
          ++pairs;
          wins += s[std::size_t(i)] > s[std::size_t(j)] ? 1.0 : s[std::size_t(i)] == s[std::size_t(j)] ? 0.5 : 0.0;
        }
    CHECK(std::abs(auc(s, y) - wins / pairs) < 1e-12);
  }
  CHECK(code_of([] { auc({0.1, 0.2}, {1, 1}); }) == "pointnet.SINGLE_CLASS");
  CHECK(code_of([] { auc({0.1, 0.2}, {0, 2}); }) == "pointnet.BAD_LABEL");
}

TEST_CASE("model file round trip") {
  PointNetArch arch = small_arch();
  arch.feature_tnet = true;
  PointNetModel m(arch, 21);
  m.metadata = {{"note", "x"}};
  const auto bytes = encode_model(m);
  const PointNetModel back = decode_model(bytes);
  CHECK(encode_model(back) == bytes);
  CHECK(back.arch() == arch);
  CHECK(back.metadata == m.metadata);
  std::mt19937_64 rng(1);
  const FeatureMatrix x = random_points(50, rng);
  CHECK(back.infer(x).logits == m.infer(x).logits);

  const auto path = std::filesystem::temp_directory_path() / "onh_test_model.onhpn";
  save_model(m, path);
  CHECK(encode_model(load_model(path)) == bytes);

  auto cut = bytes;
  cut.resize(cut.size() - 8);
  CHECK(code_of([&] { decode_model(cut); }) == "pointnet.BAD_MODEL_FILE");
  CHECK(code_of([&] { decode_model({1, 2, 3}); }) == "pointnet.BAD_MODEL_FILE");
  CHECK(code_of([&] { load_model("/nonexistent/m.onhpn"); }) == "pointnet.IO_FAILURE");
}

TEST_CASE("training config JSON") {
  TrainConfig cfg = quick_config();
  cfg.augment.rotation_deg_min = -5;
  const TrainConfig back = train_config_from_json(to_json(cfg));
  CHECK(to_json(back) == to_json(cfg));
  CHECK(back.arch == cfg.arch);
  CHECK(code_of([] { train_config_from_json({{"epochz", 3}}); }) == "pointnet.BAD_TRAIN_CONFIG");
  TrainConfig bad;
  bad.train_fraction = 0.9;
  CHECK(code_of([&] { bad.validate(); }) == "pointnet.BAD_TRAIN_CONFIG");
}

TEST_CASE("training is deterministic and learns a separable task") {
  std::mt19937_64 rng(4);
  std::vector<PointCloud> clouds;
  for (int i = 0; i < 40; ++i) clouds.push_back(synthetic_cloud("eye" + std::to_string(i), i % 2, rng));
  std::vector<LabeledCloud> data;
  for (const PointCloud& c : clouds) data.push_back({&c, c.label == SeverityGroup::Mild ? 1 : 0});

  TrainConfig cfg = quick_config();
  cfg.epochs = 8;
  const TrainResult a = train(data, cfg);
  cfg.threads = 3;
  const TrainResult b = train(data, cfg);
  CHECK(to_json(a.report) == to_json(b.report));
  CHECK(encode_model(a.model) == encode_model(b.model));
  CHECK(a.report.fold_aucs.size() == 2);
  CHECK(a.report.epoch_loss.size() == 8);
  CHECK(a.report.test_ids.size() + a.report.val_ids.size() + a.report.train_ids.size() == 40);
  CHECK(a.report.auc_mean > 0.8);

  std::vector<LabeledCloud> few(data.begin(), data.begin() + 12);
  CHECK(code_of([&] { train(few, cfg); }) == "pointnet.TOO_FEW_EYES");
}
