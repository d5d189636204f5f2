#include "geohand/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "geohand/metrics.hpp"
#include "geohand/ops.hpp"
#include "geohand/rng.hpp"

namespace geohand {

namespace {

LossWeights weights_from(const Config& cfg) {
  LossWeights w;
  w.l2d = cfg.loss.l2d;
  w.l3d = cfg.loss.l3d;
  w.bone = cfg.loss.bone;
  w.vert = cfg.loss.vert;
  w.global_rot = cfg.loss.global_rot;
  w.pose = cfg.loss.pose;
  w.betas = cfg.loss.betas;
  w.shape = cfg.loss.shape;
  return w;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

void check_finite(const LossBreakdown& b, uint64_t step) {
  const std::pair<const char*, double> terms[] = {
      {"l2d", b.l2d},       {"l3d", b.l3d},     {"lbone", b.bone},   {"lvert", b.vert},
      {"lglobal", b.global_rot}, {"lpose", b.pose}, {"lbetas", b.betas}, {"lshape", b.shape},
      {"total", b.total.value()}};
  for (const auto& [name, v] : terms) {
    if (!std::isfinite(v)) {
      throw std::runtime_error("train: non-finite loss at step " + std::to_string(step) + " (" +
                               name + ")");
    }
  }
}

std::vector<double> tensor_row(const Tensor& t, int row, int row_len) {
  const double* p = t.data() + static_cast<int64_t>(row) * row_len;
  return std::vector<double>(p, p + row_len);
}

}  // namespace

BatchTensors make_batch(const Dataset& ds, const std::vector<int>& idx, const HandTemplate& tmpl) {
  NoGradScope off;
  const int b = static_cast<int>(idx.size());
  if (b == 0) throw std::runtime_error("make_batch: empty index list");
  const int h = ds.image_h, w = ds.image_w, gh = ds.geo_h, gw = ds.geo_w;

  std::vector<double> image, geo, uv, m_uv, joints, m_xyz, theta6, betas, cam;
  for (int i : idx) {
    if (i < 0 || i >= ds.size()) {
      throw std::runtime_error("make_batch: sample index " + std::to_string(i) +
                               " out of range (dataset has " + std::to_string(ds.size()) + ")");
    }
    const Sample& s = ds.samples[static_cast<size_t>(i)];
    image.insert(image.end(), s.image.begin(), s.image.end());
    geo.insert(geo.end(), s.geo.begin(), s.geo.end());
    uv.insert(uv.end(), s.uv.begin(), s.uv.end());
    m_uv.insert(m_uv.end(), s.m_uv.begin(), s.m_uv.end());
    joints.insert(joints.end(), s.joints.begin(), s.joints.end());
    m_xyz.push_back(s.m_xyz);
    theta6.insert(theta6.end(), s.params.begin(), s.params.begin() + kThetaDim);
    betas.insert(betas.end(), s.params.begin() + kThetaDim, s.params.begin() + kThetaDim + kBetas);
    cam.insert(cam.end(), s.params.begin() + kThetaDim + kBetas, s.params.end());
  }

  BatchTensors bt;
  bt.image = Tensor::from({b, 3, h, w}, std::move(image));
  bt.geo = Tensor::from({b, kGtGeoChannels, gh, gw}, std::move(geo));
  bt.masks.m_uv = Tensor::from({b, kJoints}, std::move(m_uv));
  bt.masks.m_xyz = Tensor::from({b}, std::move(m_xyz));

  const Tensor rot = rot6d_to_matrix(Tensor::from({b, kNodes, 6}, std::move(theta6)));
  HandParamsBatch hp;
  hp.rot = rot;
  hp.betas = Tensor::from({b, kBetas}, std::move(betas));
  hp.cam = Tensor::from({b, 3}, std::move(cam));
  const HandOutputBatch fk = forward_kinematics(tmpl, hp);

  bt.targets.u = Tensor::from({b, kJoints, 2}, std::move(uv));
  bt.targets.joints = Tensor::from({b, kJoints, 3}, std::move(joints));
  bt.targets.verts = fk.verts;
  bt.targets.g = flatten_root_rot(rot);
  bt.targets.p = flatten_finger_rot(rot);
  bt.targets.betas = hp.betas;
  return bt;
}

HandPrediction predict_from_params(const Tensor& p, const HandTemplate& tmpl) {
  const HandParamsBatch hp = params_to_hand(p);
  const HandOutputBatch out = forward_kinematics(tmpl, hp);
  HandPrediction pred;
  pred.u = project(out.joints, hp.cam);
  pred.joints = out.joints;
  pred.verts = out.verts;
  pred.g = flatten_root_rot(hp.rot);
  pred.p = flatten_finger_rot(hp.rot);
  pred.betas = hp.betas;
  return pred;
}

TrainResult train_model(GeoHandModel& model, const Dataset& ds, std::ostream& log, AdamW* opt_out) {
  const Config& cfg = model.config();
  if (ds.image_h != cfg.model.image_h || ds.image_w != cfg.model.image_w ||
      ds.geo_h != cfg.model.geo_h || ds.geo_w != cfg.model.geo_w) {
    throw std::runtime_error("train: dataset extents do not match the model config");
  }
  ParamMap map = model.params();
  AdamW opt(map, cfg.optim.lr, cfg.optim.weight_decay, cfg.optim.beta1, cfg.optim.beta2);

  const uint64_t frozen_before = hash_frozen_params(map);
  const LossWeights weights = weights_from(cfg);
  const double ds_weight = cfg.model.deep_supervision;

  log << kLogHeader << "\n";
  TrainResult res;
  uint64_t step = 0;

  std::vector<int> order(static_cast<size_t>(ds.size()));
  for (int i = 0; i < ds.size(); ++i) order[static_cast<size_t>(i)] = i;

  for (int epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    Rng shuffle_rng(cfg.seed + static_cast<uint64_t>(epoch));
    for (size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    }
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.optim.batch)) {
      const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.optim.batch));
      const std::vector<int> idx(order.begin() + static_cast<long>(start),
                                 order.begin() + static_cast<long>(stop));
      const BatchTensors bt = make_batch(ds, idx, model.tmpl());

      Graph tape;
      GraphScope scope(tape);
      const ModelForward fwd = model.forward(bt.image, &bt.geo);

      LossBreakdown final_b;
      Tensor early_sum;
      const size_t n_stages = fwd.step_params.size();
      for (size_t k = 0; k < n_stages; ++k) {
        const HandPrediction pred = predict_from_params(fwd.step_params[k], model.tmpl());
        LossBreakdown b = total_loss(pred, bt.targets, bt.masks, model.tmpl(), weights,
                                     cfg.loss.smooth_l1_delta);
        if (k + 1 == n_stages) {
          final_b = std::move(b);
        } else {
          early_sum = early_sum.defined() ? ops::add(early_sum, b.total) : b.total;
        }
      }
      Tensor total = early_sum.defined()
                         ? ops::add(final_b.total, ops::scale(early_sum, ds_weight))
                         : final_b.total;
      check_finite(final_b, step);
      if (!std::isfinite(total.value())) {
        throw std::runtime_error("train: non-finite loss at step " + std::to_string(step) +
                                 " (total)");
      }

      log << step << ',' << fmt(total.value()) << ',' << fmt(final_b.l2d) << ','
          << fmt(final_b.l3d) << ',' << fmt(final_b.bone) << ',' << fmt(final_b.vert) << ','
          << fmt(final_b.global_rot) << ',' << fmt(final_b.pose) << ',' << fmt(final_b.betas)
          << ',' << fmt(final_b.shape) << ',' << fmt(fwd.gate) << "\n";

      if (step == 0) res.initial_total = total.value();
      res.final_total = total.value();

      opt.zero_grad(map);
      tape.backward(total);
      opt.step(map);
      ++step;
    }
  }
  if (hash_frozen_params(map) != frozen_before) {
    throw std::runtime_error("train: frozen stub parameters changed during training");
  }
  if (opt_out) *opt_out = opt;
  res.steps = step;
  return res;
}

std::string EvalResult::to_csv() const {
  std::ostringstream os;
  os << "MPJPE," << fmt(mpjpe) << "\nPA-MPJPE," << fmt(pa_mpjpe) << "\nMPVPE," << fmt(mpvpe)
     << "\nPA-MPVPE," << fmt(pa_mpvpe) << "\nF@5," << fmt(f5) << "\nF@15," << fmt(f15) << "\n";
  return os.str();
}

EvalResult evaluate_model(const GeoHandModel& model, const Dataset& ds, int stage) {
  NoGradScope off;
  const Config& cfg = model.config();
  EvalResult acc;
  int counted = 0;
  for (int start = 0; start < ds.size(); start += cfg.optim.batch) {
    const int stop = std::min(ds.size(), start + cfg.optim.batch);
    std::vector<int> idx;
    for (int i = start; i < stop; ++i) idx.push_back(i);
    const BatchTensors bt = make_batch(ds, idx, model.tmpl());
    const ModelForward fwd = model.forward(bt.image, &bt.geo);

    const int n_stages = static_cast<int>(fwd.step_params.size());
    const int pick = stage < 0 ? n_stages - 1 : stage;
    if (pick >= n_stages) {
      throw std::runtime_error("evaluate: stage " + std::to_string(stage) +
                               " out of range (model has " + std::to_string(n_stages) +
                               " stages)");
    }
    const HandParamsBatch hp = params_to_hand(fwd.step_params[static_cast<size_t>(pick)]);
    const HandOutputBatch out = forward_kinematics(model.tmpl(), hp);

    const int v_count = model.tmpl().vertex_count;
    for (size_t k = 0; k < idx.size(); ++k) {
      const int row = static_cast<int>(k);
      const std::vector<double> pj = tensor_row(out.joints, row, 3 * kJoints);
      const std::vector<double> gj = tensor_row(bt.targets.joints, row, 3 * kJoints);
      const std::vector<double> pv = tensor_row(out.verts, row, 3 * v_count);
      const std::vector<double> gv = tensor_row(bt.targets.verts, row, 3 * v_count);
      acc.mpjpe += mpjpe_mm(pj, gj, 0);
      acc.pa_mpjpe += pa_error_mm(pj, gj);
      acc.mpvpe += mpvpe_mm(pv, gv, {pj[0], pj[1], pj[2]}, {gj[0], gj[1], gj[2]});
      acc.pa_mpvpe += pa_error_mm(pv, gv);
      acc.f5 += f_score(pv, gv, 5.0);
      acc.f15 += f_score(pv, gv, 15.0);
      ++counted;
    }
  }
  acc.mpjpe /= counted;
  acc.pa_mpjpe /= counted;
  acc.mpvpe /= counted;
  acc.pa_mpvpe /= counted;
  acc.f5 /= counted;
  acc.f15 /= counted;
  return acc;
}

EvalResult evaluate_gt_self(const HandTemplate& tmpl, const Dataset& ds) {
  NoGradScope off;
  EvalResult acc;
  std::vector<int> idx(static_cast<size_t>(ds.size()));
  for (int i = 0; i < ds.size(); ++i) idx[static_cast<size_t>(i)] = i;
  const BatchTensors bt = make_batch(ds, idx, tmpl);
  const int v_count = tmpl.vertex_count;
  for (int row = 0; row < ds.size(); ++row) {
    const std::vector<double> gj = tensor_row(bt.targets.joints, row, 3 * kJoints);
    const std::vector<double> gv = tensor_row(bt.targets.verts, row, 3 * v_count);
    acc.mpjpe += mpjpe_mm(gj, gj, 0);
    acc.pa_mpjpe += pa_error_mm(gj, gj);
    acc.mpvpe += mpvpe_mm(gv, gv, {gj[0], gj[1], gj[2]}, {gj[0], gj[1], gj[2]});
    acc.pa_mpvpe += pa_error_mm(gv, gv);
    acc.f5 += f_score(gv, gv, 5.0);
    acc.f15 += f_score(gv, gv, 15.0);
  }
  acc.mpjpe /= ds.size();
  acc.pa_mpjpe /= ds.size();
  acc.mpvpe /= ds.size();
  acc.pa_mpvpe /= ds.size();
  acc.f5 /= ds.size();
  acc.f15 /= ds.size();
  return acc;
}

void export_mesh_obj(const std::string& path, const std::vector<double>& verts,
                     const std::vector<std::array<int, 3>>& faces) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("export: cannot write '" + path + "'");
  char buf[128];
  for (size_t i = 0; i + 2 < verts.size(); i += 3) {
    std::snprintf(buf, sizeof(buf), "v %.9g %.9g %.9g\n", verts[i], verts[i + 1], verts[i + 2]);
    f << buf;
  }
  for (const auto& face : faces) {
    f << "f " << face[0] + 1 << ' ' << face[1] + 1 << ' ' << face[2] + 1 << "\n";
  }
}

std::vector<double> read_obj_vertices(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("export: cannot open '" + path + "'");
  std::vector<double> verts;
  std::string line;
  while (std::getline(f, line)) {
    if (line.size() < 2 || line[0] != 'v' || line[1] != ' ') continue;
    std::istringstream is(line.substr(2));
    double x, y, z;
    if (!(is >> x >> y >> z)) throw std::runtime_error("export: malformed vertex line '" + line + "'");
    verts.push_back(x);
    verts.push_back(y);
    verts.push_back(z);
  }
  return verts;
}

void export_skeleton_svg(const std::string& path, const std::vector<double>& uv_pixels,
                         int image_w, int image_h,
                         const std::array<std::array<int, 2>, kEdges>& edges) {
  if (uv_pixels.size() != 2 * kJoints) {
    throw std::runtime_error("export: skeleton wants 21 joint positions");
  }
  std::ofstream f(path);
  if (!f) throw std::runtime_error("export: cannot write '" + path + "'");
  char buf[256];
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << image_w << "\" height=\"" << image_h
    << "\" viewBox=\"0 0 " << image_w << ' ' << image_h << "\">\n";
  for (const auto& e : edges) {
    std::snprintf(buf, sizeof(buf),
                  "  <line x1=\"%.4g\" y1=\"%.4g\" x2=\"%.4g\" y2=\"%.4g\" "
                  "stroke=\"#3c78c8\" stroke-width=\"0.8\"/>\n",
                  uv_pixels[2 * e[0]], uv_pixels[2 * e[0] + 1], uv_pixels[2 * e[1]],
                  uv_pixels[2 * e[1] + 1]);
    f << buf;
  }
  for (int j = 0; j < kJoints; ++j) {
    std::snprintf(buf, sizeof(buf), "  <circle cx=\"%.4g\" cy=\"%.4g\" r=\"1.2\" fill=\"#d03c3c\"/>\n",
                  uv_pixels[2 * j], uv_pixels[2 * j + 1]);
    f << buf;
  }
  f << "</svg>\n";
}

void export_sample(const GeoHandModel& model, const Dataset& ds, int index,
                   const std::string& out_dir) {
  if (index < 0 || index >= ds.size()) {
    throw std::runtime_error("export: sample index " + std::to_string(index) +
                             " out of range (dataset has " + std::to_string(ds.size()) + ")");
  }
  NoGradScope off;
  const BatchTensors bt = make_batch(ds, {index}, model.tmpl());
  const ModelForward fwd = model.forward(bt.image, &bt.geo);
  const HandParamsBatch hp = params_to_hand(fwd.step_params.back());
  const HandOutputBatch out = forward_kinematics(model.tmpl(), hp);
  const Tensor uv = project(out.joints, hp.cam);

  const int v_count = model.tmpl().vertex_count;
  const std::vector<double> verts(out.verts.data(), out.verts.data() + 3 * v_count);
  export_mesh_obj(out_dir + "/mesh_" + std::to_string(index) + ".obj", verts, model.tmpl().faces);

  std::vector<double> px(2 * kJoints);
  for (int j = 0; j < kJoints; ++j) {
    px[2 * j] = uv.data()[2 * j] * model.config().model.image_w;
    px[2 * j + 1] = uv.data()[2 * j + 1] * model.config().model.image_h;
  }
  export_skeleton_svg(out_dir + "/skeleton_" + std::to_string(index) + ".svg", px,
                      model.config().model.image_w, model.config().model.image_h,
                      model.tmpl().edges);
}

namespace {

Tensor randt(std::vector<int> shape, Rng& rng, double stddev) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& x : t.impl->data) x = rng.normal(0.0, stddev);
  return t;
}

// element i gets a distinct fixed weight so reductions cannot hide a wrong
// gradient behind a symmetric cancellation
Tensor ramp_like(const std::vector<int>& shape) {
  Tensor t = Tensor::zeros(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t.impl->data[i] = 0.3 + 0.05 * static_cast<double>(i);
  return t;
}

// residual magnitudes held inside [lo, hi], away from every loss knee
Tensor offset_from(const Tensor& base, uint64_t seed, double lo, double hi) {
  Rng rng(seed);
  Tensor t = Tensor::zeros(base.shape());
  for (int64_t i = 0; i < t.numel(); ++i) {
    double mag = lo + (hi - lo) * rng.uniform();
    t.impl->data[i] = base.data()[i] + (rng.uniform() < 0.5 ? -mag : mag);
  }
  return t;
}

}  // namespace

std::vector<CheckReport> run_gradcheck_suite(uint64_t seed, bool inject_fault) {
  std::vector<CheckReport> reports;
  auto run = [&reports](const std::string& name, double threshold,
                        const std::function<Tensor(const std::vector<Tensor>&)>& builder,
                        std::vector<Tensor> inputs) {
    CheckReport r;
    r.name = name;
    r.threshold = threshold;
    r.result = grad_check(builder, std::move(inputs), 1e-5);
    r.ok = r.result.finite && r.result.max_rel_err < threshold;
    reports.push_back(std::move(r));
  };

  {  // dense core: matmul, row bias, gelu, layer norm, softmax
    Rng rng(seed + 1);
    Tensor x = randt({2, 6}, rng, 0.6);
    Tensor w = randt({6, 5}, rng, 0.4);
    Tensor b = randt({5}, rng, 0.2);
    Tensor gamma = randt({5}, rng, 0.2);
    for (auto& v : gamma.impl->data) v += 1.0;
    Tensor beta = randt({5}, rng, 0.2);
    Tensor ramp = ramp_like({2, 5});
    auto builder = [ramp](const std::vector<Tensor>& in) {
      Tensor h = ops::gelu(ops::add_rowbias(ops::matmul(in[0], in[1]), in[2]));
      Tensor n = ops::layer_norm(h, in[3], in[4]);
      return ops::sum_all(ops::mul(ops::softmax_lastdim(n), ramp));
    };
    run("ops.core", 1e-4, builder, {x, w, b, gamma, beta});
  }

  {  // spatial core: convolution and group norm
    Rng rng(seed + 2);
    Tensor x = randt({1, 4, 5, 5}, rng, 0.5);
    Tensor w = randt({6, 4, 3, 3}, rng, 0.3);
    Tensor b = randt({6}, rng, 0.1);
    Tensor gamma = randt({6}, rng, 0.2);
    for (auto& v : gamma.impl->data) v += 1.0;
    Tensor beta = randt({6}, rng, 0.2);
    Tensor ramp = ramp_like({1, 6, 5, 5});
    auto builder = [ramp](const std::vector<Tensor>& in) {
      Tensor y = ops::conv2d(in[0], in[1], in[2], 1, 1);
      Tensor n = ops::group_norm(y, in[3], in[4], 2);
      return ops::sum_all(ops::mul(n, ramp));
    };
    run("ops.conv_gn", 1e-4, builder, {x, w, b, gamma, beta});
  }

  {  // kinematics, projection and bone lengths in one pass
    HandTemplate tmpl = HandTemplate::tube(120, kTemplateSeed);
    Rng rng(seed + 3);
    Tensor theta = Tensor::zeros({1, kNodes, 6});
    auto id = identity_rot6d();
    for (int k = 0; k < kNodes; ++k)
      for (int i = 0; i < 6; ++i)
        theta.impl->data[static_cast<size_t>(k) * 6 + i] = id[i] + 0.15 * rng.normal();
    Tensor betas = randt({1, kBetas}, rng, 0.2);
    Tensor cam = Tensor::from({1, 3}, {5.0, 0.02, -0.03});
    auto builder = [&tmpl](const std::vector<Tensor>& in) {
      HandParamsBatch p{rot6d_to_matrix(in[0]), in[1], in[2]};
      HandOutputBatch out = forward_kinematics(tmpl, p);
      Tensor u = project(out.joints, in[2]);
      Tensor lens = bone_lengths(out.joints, tmpl);
      return ops::add(ops::add(ops::mean_all(u), ops::mean_all(out.verts)),
                      ops::scale(ops::mean_all(lens), 0.1));
    };
    run("hand.fk_project", 1e-4, builder, {theta, betas, cam});
  }

  {  // residual adapter over a raw geometry map
    Rng rng(seed + 4);
    GeoAdapter adapter(6, 8, 1, rng);
    ParamMap params;
    adapter.collect(params, "adapter");
    for (auto& p : params)
      for (auto& v : p.tensor.impl->data) v += 0.05 * rng.normal();
    Tensor x = randt({1, 6, 4, 4}, rng, 1.0);
    auto builder = [&adapter](const std::vector<Tensor>& in) {
      GeoFeatureMap raw{in[0], GeoFeatureMap::Kind::raw};
      return ops::mean_all(adapter.forward(raw).map);
    };
    run("geometry.adapter", 1e-4, builder, {x, params[0].tensor, params.back().tensor});
  }

  {  // patch embedding, gated fusion and one trunk block
    Rng rng(seed + 5);
    PatchEmbed embed(32, 16, 16, 16, rng);
    FusionGate gate(16, rng, -0.4);
    for (auto& v : gate.fc2.w.impl->data) v = 0.08 * rng.normal();
    Trunk trunk(16, 1, 2, 2, 2, 1, rng);
    Tensor image = randt({1, 3, 32, 16}, rng, 0.5);
    Tensor geo_tokens = randt({1, 2, 16}, rng, 0.5);
    auto builder = [&](const std::vector<Tensor>& in) {
      FusionGate g2 = gate;
      g2.g = in[2];
      Tensor fused = g2(embed(in[0]), in[1]);
      return ops::mean_all(trunk.run(fused, 0, 1));
    };
    run("fusion.gate_trunk", 1e-4, builder, {image, geo_tokens, gate.g});
  }

  {  // coarse decoder with one feedback iteration
    Rng rng(seed + 6);
    ManoDecoder dec(16, 1, 2, 2, 1, 5.0, rng);
    for (auto& v : dec.ief_head.fc2.w.impl->data) v = 0.01 * rng.normal();
    Tensor tokens = randt({1, 4, 16}, rng, 0.5);
    auto builder = [&dec](const std::vector<Tensor>& in) {
      return ops::mean_all(dec.decode(in[0]));
    };
    run("decoder.ief", 1e-4, builder,
        {tokens, dec.param_token, dec.ief_head.fc2.w, dec.layers[0].attn.wq.w});
  }

  {  // one keypoint-queried refinement step through the hand model
    HandTemplate tmpl = HandTemplate::tube(120, kTemplateSeed);
    Rng rng(seed + 7);
    Kqir kqir(16, 8, 2, 16, 1, true, rng);
    for (auto& v : kqir.weights[0].refine_mlp.fc2.w.impl->data) v = 0.01 * rng.normal();
    Tensor tokens = randt({1, 6, 16}, rng, 0.5);
    Tensor p0 = Tensor::zeros({1, kParamDim});
    auto id = identity_rot6d();
    for (int k = 0; k < kNodes; ++k)
      for (int i = 0; i < 6; ++i)
        p0.impl->data[static_cast<size_t>(k) * 6 + i] = id[i] + 0.1 * rng.normal();
    p0.impl->data[kThetaDim + kBetas] = 5.0;
    KqirWeights& w = kqir.weights[0];
    auto builder = [&](const std::vector<Tensor>&) {
      Tensor p1 = kqir.step(p0, tokens, 0, tmpl);
      HandParamsBatch hand = params_to_hand(p1);
      HandOutputBatch out = forward_kinematics(tmpl, hand);
      Tensor uv = project(out.joints, hand.cam);
      return ops::add(ops::mean_all(uv), ops::mean_all(out.joints));
    };
    run("kqir.step", 1e-4, builder, {w.wk.w, w.wv.w, w.query_mlp.fc1.w, w.refine_mlp.fc2.w});
  }

  {  // all eight objective terms at once, residuals away from the knees
    HandTemplate tmpl = HandTemplate::tube(120, kTemplateSeed);
    Rng rng(seed + 8);
    const int b = 2;
    Tensor j_gt = randt({b, kJoints, 3}, rng, 0.05);
    Tensor v_gt = randt({b, 120, 3}, rng, 0.05);
    Tensor u_gt = randt({b, kJoints, 2}, rng, 0.2);
    Tensor g_gt = randt({b, 9}, rng, 0.3);
    Tensor p_gt = randt({b, 135}, rng, 0.3);
    Tensor b_gt = randt({b, kBetas}, rng, 0.3);
    HandTargets gt{u_gt, j_gt, v_gt, g_gt, p_gt, b_gt};
    HandPrediction pred{offset_from(u_gt, seed + 9, 0.15, 0.45),
                        offset_from(j_gt, seed + 10, 0.15, 0.45),
                        offset_from(v_gt, seed + 11, 0.15, 0.45),
                        offset_from(g_gt, seed + 12, 0.15, 0.45),
                        offset_from(p_gt, seed + 13, 0.15, 0.45),
                        offset_from(b_gt, seed + 14, 0.15, 0.45)};
    SupervisionMasks masks = SupervisionMasks::all_valid(b);
    auto builder = [&](const std::vector<Tensor>& in) {
      HandPrediction pr{in[0], in[1], in[2], in[3], in[4], in[5]};
      return total_loss(pr, gt, masks, tmpl, LossWeights{}).total;
    };
    run("loss.full_objective", 1e-4, builder,
        {pred.u, pred.joints, pred.verts, pred.g, pred.p, pred.betas});
  }

  if (inject_fault) {  // a node whose backward rule lies; the suite must catch it
    Rng rng(seed + 15);
    Tensor x = randt({4}, rng, 1.0);
    auto builder = [](const std::vector<Tensor>& in) {
      const Tensor& v = in[0];
      Tensor y(v.shape());
      y.set_requires_grad(true);
      for (int64_t i = 0; i < v.numel(); ++i) y.data()[i] = 4.0 * v.data()[i];
      if (Graph* g = Graph::current()) {
        g->record("bad_scale", {v}, y, [xi = v.impl, yi = y.impl] {
          auto& gx = ensure_grad(xi);
          for (size_t i = 0; i < gx.size(); ++i) gx[i] += 10.0 * yi->grad[i];
        });
      }
      return ops::sum_all(y);
    };
    run("fault.bad_backward", 1e-4, builder, {x});
  }
  return reports;
}

uint64_t hash_frozen_params(const ParamMap& map) {
  uint64_t h = 1469598103934665603ull;
  for (const auto& p : map) {
    if (p.trainable) continue;
    const unsigned char* bytes = reinterpret_cast<const unsigned char*>(p.tensor.data());
    const size_t n = static_cast<size_t>(p.tensor.numel()) * sizeof(double);
    for (size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

}  // namespace geohand
