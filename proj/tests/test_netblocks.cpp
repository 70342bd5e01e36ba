#include <doctest.h>

#include <mtn/blocks.hpp>
#include <mtn/gradcheck.hpp>

#include <random>

using namespace mtn;

namespace {

template <typename S>
void fill_random(Tensor4<S>& t, std::mt19937& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (Eigen::Index i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<S>(dist(rng));
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.total_stride = 16;
  cfg.embed_channels = 4;
  cfg.mask_channels = 4;
  cfg.decoder_width = 4;
  cfg.gcn_kernel = 3;
  return cfg;
}

// Flatten/unflatten across an explicit list of layers; used to drive the
// finite-difference harness over block parameters.
template <typename S>
Eigen::VectorXd flatten_layers(const std::vector<const ConvParams<S>*>& layers) {
  Eigen::Index n = 0;
  for (const auto* l : layers) n += l->param_count();
  Eigen::VectorXd out(n);
  Eigen::Index off = 0;
  for (const auto* l : layers) {
    out.segment(off, l->weights.size()) = l->weights.matrix().template cast<double>();
    off += l->weights.size();
    out.segment(off, l->bias.size()) = l->bias.matrix().template cast<double>();
    off += l->bias.size();
  }
  return out;
}

template <typename S>
void unflatten_layers(const Eigen::VectorXd& flat, std::vector<ConvParams<S>*> layers) {
  Eigen::Index off = 0;
  for (auto* l : layers) {
    l->weights = flat.segment(off, l->weights.size()).array().template cast<S>();
    off += l->weights.size();
    l->bias = flat.segment(off, l->bias.size()).array().template cast<S>();
    off += l->bias.size();
  }
}

std::vector<ConvParams<double>*> decoder_layer_ptrs(ModelParameters<double>& m) {
  std::vector<ConvParams<double>*> out = {&m.decoder.gcn_row_a, &m.decoder.gcn_col_a,
                                          &m.decoder.gcn_col_b, &m.decoder.gcn_row_b};
  for (auto& st : m.decoder.stages) {
    out.push_back(&st.up);
    out.push_back(&st.br1);
    out.push_back(&st.br2);
  }
  for (auto& r : m.decoder.refine) out.push_back(&r);
  out.push_back(&m.decoder.out_conv);
  return out;
}

}  // namespace

TEST_SUITE_BEGIN("netblocks");

TEST_CASE("model construction satisfies the grid coincidence invariant") {
  for (int stride : {16, 32}) {
    ModelConfig cfg;
    cfg.total_stride = stride;
    ModelParameters<float> m = init_model<float>(cfg, 1);
    CHECK(m.encoder.total_stride() == stride);
    CHECK(m.mask_encoder.total_stride() == stride);
    CHECK(m.mask_encoder.layers.size() == 5);
    CHECK(m.embedding.layers.back().out_channels == cfg.embed_channels);
    // five parameterized upsampling/refinement layers in the decoder
    CHECK(m.decoder.stages.size() * 1 + m.decoder.refine.size() +
              2 * m.decoder.stages.size() ==
          5 + 2 * m.decoder.stages.size());
    CHECK(m.decoder.stages.size() == (stride == 16 ? 2 : 3));
  }
}

TEST_CASE("init_model is deterministic per seed") {
  ModelParameters<float> a = init_model<float>(ModelConfig{}, 7);
  ModelParameters<float> b = init_model<float>(ModelConfig{}, 7);
  ModelParameters<float> c = init_model<float>(ModelConfig{}, 8);
  bool equal = true, differs = false;
  a.for_each_layer([&](const std::string& name, const ConvParams<float>& p) {
    b.for_each_layer([&](const std::string& name_b, const ConvParams<float>& q) {
      if (name == name_b) equal &= (p.weights == q.weights).all();
    });
    c.for_each_layer([&](const std::string& name_c, const ConvParams<float>& q) {
      if (name == name_c) differs |= (p.weights != q.weights).any();
    });
  });
  CHECK(equal);
  CHECK(differs);
}

TEST_CASE("encode_image shape contract and determinism") {
  ModelParameters<float> m = init_model<float>(ModelConfig{}, 2);
  std::mt19937 rng(50);
  Tensor4f frame(1, 3, 128, 128);
  fill_random(frame, rng, 0.0, 1.0);
  Tensor4f feats = encode_image(frame, m);
  CHECK(feats.height == 8);
  CHECK(feats.width == 8);
  Tensor4f again = encode_image(frame, m);
  CHECK((feats.data == again.data).all());

  Tensor4f bad(1, 3, 120, 128);
  CHECK_THROWS_AS(encode_image(bad, m), std::invalid_argument);
}

TEST_CASE("the Siamese encoder shares one parameter set across branches") {
  ModelParameters<float> m = init_model<float>(ModelConfig{}, 3);
  std::mt19937 rng(51);
  Tensor4f ref(1, 3, 64, 64), tgt(1, 3, 64, 64);
  fill_random(ref, rng, 0.0, 1.0);
  fill_random(tgt, rng, 0.0, 1.0);
  // 64 is divisible by 16 but encode_image requires stride divisibility only
  Tensor4f ref_before = encode_image(ref, m);
  Tensor4f tgt_before = encode_image(tgt, m);
  m.encoder.layers[0].weights[0] += 0.5f;  // one shared update
  Tensor4f ref_after = encode_image(ref, m);
  Tensor4f tgt_after = encode_image(tgt, m);
  CHECK((ref_after.data != ref_before.data).any());
  CHECK((tgt_after.data != tgt_before.data).any());
}

TEST_CASE("embed keeps the grid and sets the channel count") {
  ModelParameters<float> m = init_model<float>(ModelConfig{}, 4);
  std::mt19937 rng(52);
  Tensor4f feats(1, m.encoder.layers.back().out_channels, 8, 8);
  fill_random(feats, rng);
  Tensor4f emb = embed(feats, m);
  CHECK(emb.channels == m.config.embed_channels);
  CHECK(emb.height == 8);
  CHECK(emb.width == 8);

  for (auto& l : m.embedding.layers) l.bias.setZero();
  Tensor4f zero(1, feats.channels, 8, 8);
  CHECK((embed(zero, m).data == 0.0f).all());
}

TEST_CASE("encode_mask grid coincides with the embedding grid") {
  for (int stride : {16, 32}) {
    ModelConfig cfg;
    cfg.total_stride = stride;
    ModelParameters<float> m = init_model<float>(cfg, 5);
    Tensor4f mask(1, 1, 256, 256);
    mask(0, 0, 100, 100) = 1.0f;
    Tensor4f feats = encode_mask(mask, m);
    CHECK(feats.height == 256 / stride);
    CHECK(feats.width == 256 / stride);
    CHECK(feats.channels == cfg.mask_channels);
  }
}

TEST_CASE("encode_mask handles channel counts from desk to paper scale") {
  for (int cm : {64, 512}) {
    ModelConfig cfg;
    cfg.total_stride = 32;
    cfg.mask_channels = cm;
    ModelParameters<float> m = init_model<float>(cfg, 6);
    Tensor4f mask(1, 1, 64, 64);
    mask(0, 0, 3, 3) = 1.0f;
    Tensor4f feats = encode_mask(mask, m);
    CHECK(feats.channels == cm);
    CHECK(feats.height == 2);
  }
}

TEST_CASE("encode_mask zero mask with zero biases yields zero features") {
  ModelParameters<float> m = init_model<float>(ModelConfig{}, 7);
  for (auto& l : m.mask_encoder.layers) l.bias.setZero();
  Tensor4f mask(1, 1, 64, 64);
  CHECK((encode_mask(mask, m).data == 0.0f).all());
}

TEST_CASE("encode_mask rejects non-binary masks") {
  ModelParameters<float> m = init_model<float>(ModelConfig{}, 8);
  Tensor4f mask(1, 1, 64, 64);
  mask(0, 0, 0, 0) = 0.5f;
  CHECK_THROWS_AS(encode_mask(mask, m), std::invalid_argument);
}

TEST_CASE("decode output covers the frame with probabilities") {
  ModelParameters<float> m = init_model<float>(ModelConfig{}, 9);
  std::mt19937 rng(53);
  Tensor4f tgt(1, m.config.embed_channels, 8, 8), warped(1, m.config.mask_channels, 8, 8);
  fill_random(tgt, rng);
  fill_random(warped, rng);
  Tensor4f fine(1, 3, 32, 32);
  fill_random(fine, rng, 0.0, 1.0);
  Tensor4f prob = decode(tgt, warped, fine, m);
  CHECK(prob.channels == 1);
  CHECK(prob.height == 128);  // 8 * S with S = 16
  CHECK(prob.width == 128);
  CHECK(prob.data.minCoeff() >= 0.0f);
  CHECK(prob.data.maxCoeff() <= 1.0f);

  Tensor4f mismatched(1, m.config.mask_channels, 4, 8);
  CHECK_THROWS_AS(decode(tgt, mismatched, fine, m), std::invalid_argument);
}

TEST_CASE("stack gradients match finite differences") {
  std::mt19937 rng(54);
  ModelConfig cfg = tiny_config();
  ModelParameters<double> m = init_model<double>(cfg, 10);

  // embedding stack: d(weighted sum)/d(input, params)
  Tensor4d input(1, m.embedding.layers[0].in_channels, 4, 4);
  fill_random(input, rng);
  Tensor4d probe(1, cfg.embed_channels, 4, 4);
  fill_random(probe, rng);

  std::vector<const ConvParams<double>*> layer_ptrs;
  for (const auto& l : m.embedding.layers) layer_ptrs.push_back(&l);
  const Eigen::VectorXd theta0 = flatten_layers(layer_ptrs);
  const Eigen::Index ni = input.data.size();

  Eigen::VectorXd at(ni + theta0.size());
  at << input.data.matrix(), theta0;
  auto scalar_fn = [&](const Eigen::VectorXd& v) {
    ModelParameters<double> probe_model = m;
    Tensor4d x = input;
    x.data = v.segment(0, ni).array();
    std::vector<ConvParams<double>*> ptrs;
    for (auto& l : probe_model.embedding.layers) ptrs.push_back(&l);
    unflatten_layers(v.segment(ni, theta0.size()), ptrs);
    return (run_stack(probe_model.embedding, x).data * probe.data).sum();
  };

  StackTrace<double> trace;
  run_stack(m.embedding, input, &trace);
  ModelParameters<double> grads = zeros_like(m);
  Tensor4d gin = stack_backward(m.embedding, trace, probe, grads.embedding);
  std::vector<const ConvParams<double>*> grad_ptrs;
  for (const auto& l : grads.embedding.layers) grad_ptrs.push_back(&l);
  Eigen::VectorXd analytic(at.size());
  analytic << gin.data.matrix(), flatten_layers(grad_ptrs);

  GradCheckOptions opts;
  opts.max_coords = 300;
  auto report = finite_diff_check(scalar_fn, at, analytic, opts, &rng);
  CHECK(report.pass);
  CHECK(report.max_rel_err <= 1e-3);
}

TEST_CASE("decode end-to-end gradients match finite differences") {
  std::mt19937 rng(55);
  ModelConfig cfg = tiny_config();
  ModelParameters<double> m = init_model<double>(cfg, 11);

  Tensor4d tgt(1, cfg.embed_channels, 2, 2), warped(1, cfg.mask_channels, 2, 2);
  fill_random(tgt, rng);
  fill_random(warped, rng);
  Tensor4d fine(1, 3, 8, 8);
  fill_random(fine, rng, 0.0, 1.0);
  Tensor4d out0 = decode(tgt, warped, fine, m);
  Tensor4d probe = zeros_like(out0);
  fill_random(probe, rng);

  const auto layer_ptrs_const = [&](const ModelParameters<double>& model) {
    std::vector<const ConvParams<double>*> out;
    for (auto* p : decoder_layer_ptrs(const_cast<ModelParameters<double>&>(model))) {
      out.push_back(p);
    }
    return out;
  };
  const Eigen::VectorXd theta0 = flatten_layers(layer_ptrs_const(m));
  const Eigen::Index nt = tgt.data.size(), nw = warped.data.size();

  Eigen::VectorXd at(nt + nw + theta0.size());
  at << tgt.data.matrix(), warped.data.matrix(), theta0;
  auto scalar_fn = [&](const Eigen::VectorXd& v) {
    ModelParameters<double> probe_model = m;
    Tensor4d a = tgt, b = warped;
    a.data = v.segment(0, nt).array();
    b.data = v.segment(nt, nw).array();
    unflatten_layers(v.segment(nt + nw, theta0.size()), decoder_layer_ptrs(probe_model));
    return (decode(a, b, fine, probe_model).data * probe.data).sum();
  };

  DecodeTrace<double> trace;
  decode(tgt, warped, fine, m, &trace);
  ModelParameters<double> grads = zeros_like(m);
  DecodeBackward<double> back = decode_backward(m, trace, probe, grads.decoder);
  Eigen::VectorXd analytic(at.size());
  analytic << back.grad_target_features.data.matrix(), back.grad_warped_features.data.matrix(),
      flatten_layers(layer_ptrs_const(grads));

  GradCheckOptions opts;
  opts.max_coords = 400;
  opts.step = 1e-6;  // shrink the ReLU kink-crossing window; double precision keeps noise ~1e-10
  auto report = finite_diff_check(scalar_fn, at, analytic, opts, &rng);
  CHECK(report.pass);
  CHECK(report.max_rel_err <= 1e-3);
}

TEST_SUITE_END();
