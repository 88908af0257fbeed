#include "test_util.hpp"
#include "xdyna/training.hpp"

using namespace xdyna;
using namespace xdyna::test;

namespace {

Mat<double> scalar(double v) { return Mat<double>::Constant(1, 1, v); }

AttentionLayerParams<double> random_layer(int d, std::mt19937_64& rng, int d_in = -1) {
  const int din = d_in < 0 ? d : d_in;
  auto r = [&](int a, int b) { return to_mat(random_rows(a, b, rng, 1.0 / std::sqrt(a))); };
  return {r(d, d), r(din, d), r(din, d), r(d, d)};
}

std::vector<std::vector<double>> rows(const Mat<double>& m) {
  std::vector<std::vector<double>> out(m.rows(), std::vector<double>(m.cols()));
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
  return out;
}

std::vector<std::vector<double>> add_rows(std::vector<std::vector<double>> a, const std::vector<std::vector<double>>& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
  return a;
}

double max_diff(const Mat<double>& a, const std::vector<std::vector<double>>& b) {
  double m = 0;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) m = std::max(m, std::abs(a(i, j) - b[i][j]));
  return m;
}

double max_diff(const Mat<double>& a, const Mat<double>& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST(DynamicsAdapterAttention, ScalarExample) {
  AttentionLayerParams<double> l{scalar(2), scalar(3), scalar(1), scalar(1)};
  DynamicsAdapterLayer<double> a{scalar(2), scalar(0.5)};
  ReferenceCacheLayer<double> cache{scalar(1), scalar(5), scalar(-1)};
  const Mat<double> out = dynamics_adapter_attention(l, a, scalar(1), cache);
  EXPECT_NEAR(out(0, 0), 0.5, 1e-15);
}

TEST(DynamicsAdapterAttention, MatchesDenseOracleOverRandomTrials) {
  std::mt19937_64 rng(21);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int d = 8, L = 4;
    const auto layer = random_layer(d, rng);
    const auto z = random_rows(L, d, rng), zr = random_rows(L, d, rng);
    DynamicsAdapterLayer<double> ad{to_mat(random_rows(d, d, rng, 0.4)), to_mat(random_rows(d, d, rng, 0.4))};
    ReferenceCacheLayer<double> cache{to_mat(zr), to_mat(zr) * layer.W_K, to_mat(zr) * layer.W_V};
    const auto W = [](const Mat<double>& m) { return rows(m); };
    const auto a = dense_attention(matmul(z, W(layer.W_Q)), matmul(z, W(layer.W_K)), matmul(z, W(layer.W_V)));
    const auto ap = dense_attention(matmul(z, W(ad.W_Q_prime)), matmul(zr, W(layer.W_K)), matmul(zr, W(layer.W_V)));
    const auto expect = add_rows(matmul(a, W(layer.W_O)), matmul(ap, W(ad.W_O_prime)));
    worst = std::max(worst, max_diff(dynamics_adapter_attention(layer, ad, to_mat(z), cache), expect));
  }
  EXPECT_LT(worst, 1e-10);
}

TEST(DynamicsAdapterAttention, ZeroOutputProjectionIsPlainSelfAttention) {
  std::mt19937_64 rng(22);
  const auto layer = random_layer(6, rng);
  const Mat<double> z = to_mat(random_rows(5, 6, rng)), zr = to_mat(random_rows(3, 6, rng));
  DynamicsAdapterLayer<double> ad{to_mat(random_rows(6, 6, rng)), Mat<double>::Zero(6, 6)};
  ReferenceCacheLayer<double> cache{zr, zr * layer.W_K, zr * layer.W_V};
  EXPECT_EQ(max_diff(dynamics_adapter_attention(layer, ad, z, cache), self_attention(layer, z)), 0.0);
}

TEST(DynamicsAdapterAttention, SelfReferenceCollapsesToSelfAttention) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    auto layer = random_layer(8, rng);
    layer.W_O = Mat<double>::Identity(8, 8);  // expose A_i and A'_i directly
    const Mat<double> z = to_mat(random_rows(6, 8, rng));
    DynamicsAdapterLayer<double> ad{layer.W_Q, Mat<double>::Identity(8, 8)};
    ReferenceCacheLayer<double> cache{z, z * layer.W_K, z * layer.W_V};
    const Mat<double> a = self_attention(layer, z);
    const Mat<double> out = dynamics_adapter_attention(layer, ad, z, cache);
    EXPECT_LT(max_diff(out - a, a), 1e-10);
  }
}

TEST(DynamicsAdapterAttention, DimensionMismatchIsShapeError) {
  std::mt19937_64 rng(24);
  const auto layer = random_layer(4, rng);
  DynamicsAdapterLayer<double> ad{layer.W_Q, Mat<double>::Zero(4, 4)};
  ReferenceCacheLayer<double> bad{Mat<double>(2, 4), Mat<double>::Zero(2, 3), Mat<double>::Zero(2, 4)};
  EXPECT_THROW(dynamics_adapter_attention(layer, ad, to_mat(random_rows(3, 4, rng)), bad), ShapeError);
  ReferenceCacheLayer<double> ok{Mat<double>(2, 4), Mat<double>::Zero(2, 4), Mat<double>::Zero(2, 4)};
  EXPECT_THROW(dynamics_adapter_attention(layer, ad, to_mat(random_rows(3, 5, rng)), ok), ShapeError);
}

TEST(RefnetConcatAttention, DuplicationInvariance) {
  std::mt19937_64 rng(25);
  for (int trial = 0; trial < 20; ++trial) {
    const auto layer = random_layer(8, rng);
    const Mat<double> z = to_mat(random_rows(5, 8, rng));
    EXPECT_LT(max_diff(refnet_concat_attention(layer, z, z), self_attention(layer, z)), 1e-10);
  }
}

TEST(RefnetConcatAttention, EmptyReferenceIsSelfAttention) {
  std::mt19937_64 rng(26);
  const auto layer = random_layer(4, rng);
  const Mat<double> z = to_mat(random_rows(3, 4, rng));
  EXPECT_LT(max_diff(refnet_concat_attention(layer, z, Mat<double>(0, 4)), self_attention(layer, z)), 1e-12);
}

TEST(RefnetConcatAttention, ThreeKeyOracle) {
  // d = 2 with identity projections: keys and values are the tokens themselves.
  AttentionLayerParams<double> l{Mat<double>::Identity(2, 2), Mat<double>::Identity(2, 2), Mat<double>::Identity(2, 2),
                                 Mat<double>::Identity(2, 2)};
  Mat<double> zi(2, 2), zr(1, 2);
  zi << 1.0, 0.0, 0.0, 2.0;
  zr << -1.0, 1.0;
  const Mat<double> out = refnet_concat_attention(l, zi, zr);
  const Mat<double> keys = (Mat<double>(3, 2) << 1.0, 0.0, 0.0, 2.0, -1.0, 1.0).finished();
  for (int i = 0; i < 2; ++i) {
    double w[3], z = 0;
    for (int j = 0; j < 3; ++j) z += (w[j] = std::exp(zi.row(i).dot(keys.row(j)) / std::sqrt(2.0)));
    for (int c = 0; c < 2; ++c) {
      double e = 0;
      for (int j = 0; j < 3; ++j) e += w[j] / z * keys(j, c);
      EXPECT_NEAR(out(i, c), e, 1e-10);
    }
  }
}

TEST(RefnetConcatAttention, FeatureMismatchIsShapeError) {
  std::mt19937_64 rng(27);
  const auto layer = random_layer(4, rng);
  EXPECT_THROW(refnet_concat_attention(layer, to_mat(random_rows(2, 4, rng)), to_mat(random_rows(2, 3, rng))),
               ShapeError);
}

namespace {

struct IpCase {
  AttentionLayerParams<double> layer;
  IPAdapterLayer<double> ip;
  Mat<double> z, text, ref;
};

IpCase ip_case(std::mt19937_64& rng) {
  const int d = 6, dt = 5;
  IpCase c{random_layer(d, rng, dt), {}, to_mat(random_rows(4, d, rng)), to_mat(random_rows(3, dt, rng)),
           to_mat(random_rows(2, dt, rng))};
  c.ip = {to_mat(random_rows(dt, d, rng, 0.5)), to_mat(random_rows(dt, d, rng, 0.5))};
  return c;
}

}  // namespace

TEST(IpAdapterAttention, ZeroScaleIsTextCrossAttention) {
  std::mt19937_64 rng(28);
  const IpCase c = ip_case(rng);
  EXPECT_EQ(max_diff(ip_adapter_attention(c.layer, c.ip, c.z, c.text, c.ref, 0.0), cross_attention(c.layer, c.z, c.text)),
            0.0);
}

TEST(IpAdapterAttention, DuplicatedBranchDoubles) {
  std::mt19937_64 rng(29);
  IpCase c = ip_case(rng);
  c.ip = {c.layer.W_K, c.layer.W_V};
  const Mat<double> out = ip_adapter_attention(c.layer, c.ip, c.z, c.text, c.text, 1.0);
  EXPECT_LT(max_diff(out, 2.0 * cross_attention(c.layer, c.z, c.text)), 1e-12);
}

TEST(IpAdapterAttention, AffineInScale) {
  std::mt19937_64 rng(30);
  for (int trial = 0; trial < 10; ++trial) {
    const IpCase c = ip_case(rng);
    const Mat<double> o0 = ip_adapter_attention(c.layer, c.ip, c.z, c.text, c.ref, 0.0);
    const Mat<double> o1 = ip_adapter_attention(c.layer, c.ip, c.z, c.text, c.ref, 1.0);
    for (double lam : {0.25, 0.7, 2.5}) {
      const Mat<double> ol = ip_adapter_attention(c.layer, c.ip, c.z, c.text, c.ref, lam);
      EXPECT_LT(max_diff(ol, o0 + lam * (o1 - o0)), 1e-10);
    }
  }
}

TEST(IpAdapterAttention, ScalarOracle) {
  // One text token and one reference token: both softmaxes are identically 1.
  AttentionLayerParams<double> l{scalar(0.7), scalar(1.3), scalar(2.0), scalar(1.5)};
  IPAdapterLayer<double> ip{scalar(-0.4), scalar(3.0)};
  const double text = 0.5, ref = -2.0, lam = 0.6;
  const Mat<double> out = ip_adapter_attention(l, ip, scalar(1.1), scalar(text), scalar(ref), lam);
  EXPECT_NEAR(out(0, 0), (text * 2.0 + lam * ref * 3.0) * 1.5, 1e-10);
}

TEST(IpAdapterAttention, Errors) {
  std::mt19937_64 rng(31);
  const IpCase c = ip_case(rng);
  EXPECT_THROW(ip_adapter_attention(c.layer, c.ip, c.z, c.text, c.ref, -0.1), ParameterError);
  EXPECT_THROW(ip_adapter_attention(c.layer, c.ip, c.z, Mat<double>(0, 5), c.ref, 1.0), ShapeError);
  EXPECT_THROW(ip_adapter_attention(c.layer, c.ip, c.z, c.text, to_mat(random_rows(2, 4, rng)), 1.0), ShapeError);
}

TEST(InitDynamicsAdapter, CopiesQueryAndZeroesOutput) {
  ParamStore<double> p = init_model<double>(ModelConfig{}, 5).params;
  auto check = [&](const ParamGroup<double>& ad) {
    for (int i = 0; i < UNetConfig::attention_layers; ++i) {
      EXPECT_EQ(max_abs_diff(ad.at("adapter" + std::to_string(i) + ".q"), p.at(Group::backbone, attn_prefix(i) + ".q")),
                0.0);
      EXPECT_EQ(ad.at("adapter" + std::to_string(i) + ".o").max_abs(), 0.0);
    }
  };
  check(p.group(Group::adapter));
  for (auto& v : p.at(Group::backbone, attn_prefix(0) + ".q").values()) v += 0.25;
  const ParamGroup<double> again = init_dynamics_adapter(p.group(Group::backbone));
  check(again);
  EXPECT_GT(max_abs_diff(again.at("adapter0.q"), p.at(Group::adapter, "adapter0.q")), 0.2);
}

TEST(InitDynamicsAdapter, MissingAttentionLayerIsConfigError) {
  EXPECT_THROW(init_dynamics_adapter(ParamGroup<double>{}), ConfigError);
}

TEST(EncodeReference, DeterministicAndDefinitional) {
  std::mt19937_64 rng(32);
  const Model<double> m = init_model<double>(ModelConfig{}, 6);
  const Tensor<double> ref = random_tensor({3, 16, 16}, rng);
  const auto a = encode_reference(m.params, m.config.arch, AdapterMode::dynamics_adapter, ref);
  const auto b = encode_reference(m.params, m.config.arch, AdapterMode::dynamics_adapter, ref);
  ASSERT_EQ(a.layers.size(), static_cast<std::size_t>(UNetConfig::attention_layers));
  for (int i = 0; i < UNetConfig::attention_layers; ++i) {
    EXPECT_EQ(a.layers[i].z_ref, b.layers[i].z_ref);
    EXPECT_EQ(a.layers[i].K_R, b.layers[i].K_R);
    const auto l = attention_layer_params(m.params, i);
    EXPECT_LT(max_diff(a.layers[i].K_R, a.layers[i].z_ref * l.W_K), 1e-12);
    EXPECT_LT(max_diff(a.layers[i].V_R, a.layers[i].z_ref * l.W_V), 1e-12);
    EXPECT_TRUE(a.layers[i].K_R.allFinite());
  }
}

TEST(EncodeReference, SelfReferenceAtTimestepZeroMatchesFrameHiddenStates) {
  // The reference pass is the backbone at t = 0, so a clean single-frame
  // generation input reproduces the cached hidden states.
  std::mt19937_64 rng(33);
  const Model<double> m = init_model<double>(ModelConfig{}, 7);
  const Tensor<double> ref = random_tensor({1, 3, 16, 16}, rng);
  const auto cache = encode_reference(m.params, m.config.arch, AdapterMode::dynamics_adapter, ref);
  Graph<double> g(false);
  Binder<double> b(g, m.params);
  Capture<double> cap;
  unet_forward(b, Group::backbone, m.config.arch, g.constant(ref), 0, Conditioning<double>{}, &cap);
  for (int i = 0; i < UNetConfig::attention_layers; ++i)
    EXPECT_EQ(tensor_to_tokens(cap.hidden.at(i)->value), cache.layers[i].z_ref);
}

TEST(EncodeReference, WrongShapeIsShapeError) {
  const Model<double> m = init_model<double>(ModelConfig{}, 6);
  EXPECT_THROW(encode_reference(m.params, m.config.arch, AdapterMode::dynamics_adapter, Tensor<double>({4, 16, 16})),
               ShapeError);
  EXPECT_THROW(
      encode_reference(m.params, m.config.arch, AdapterMode::dynamics_adapter, Tensor<double>({2, 3, 16, 16})),
      ShapeError);
}

TEST(AdapterGradientFlow, OnlyAdapterReceivesGradientsWithFrozenBackbone) {
  ModelConfig mc;
  Model<double> m = init_model<double>(mc, 9);
  perturb_zero_tensors(m.params, Group::adapter, 0.05, 3);
  const NoiseSchedule s = make_noise_schedule(mc.schedule);
  const auto sample = grad_check_sample(mc.arch, s, 4);
  Graph<double> g;
  Binder<double> b(g, m.params, {Group::adapter});
  Var<double> loss = sample_loss(b, mc, sample, Branches{}, true, s);
  g.backward(loss);
  EXPECT_TRUE(b.touched(Group::adapter));
  for (Group grp : {Group::backbone, Group::text, Group::pose_control, Group::face_control, Group::temporal})
    EXPECT_FALSE(b.touched(grp)) << group_name(grp);
  for (const auto& [name, grad] : b.grads(Group::adapter)) EXPECT_GT(grad.max_abs(), 0.0) << name;
}
