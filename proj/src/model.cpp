#include "geohand/model.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "geohand/serial.hpp"

namespace geohand {

namespace {

// decorrelates the frozen stub's constants from the trainable init stream
constexpr uint64_t kStubSeedSalt = 0x5eedfacecafef00dull;

GeoStub::Mode stub_mode(const std::string& name) {
  if (name == "oracle") return GeoStub::Mode::oracle;
  if (name == "frozen_random") return GeoStub::Mode::frozen_random;
  throw std::runtime_error("model: unknown geo_mode '" + name + "'");
}

}  // namespace

GeoHandModel::GeoHandModel(const Config& cfg) : cfg_(cfg) {
  cfg_.validate();
  const auto& m = cfg_.model;
  tmpl_ = HandTemplate::tube(m.vertex_count, kTemplateSeed);

  Rng rng(cfg_.seed);
  embed = PatchEmbed(m.image_h, m.image_w, m.patch, m.dim, rng);
  stub.emplace(stub_mode(m.geo_mode), m.geo_channels, m.geo_h, m.geo_w, cfg_.seed ^ kStubSeedSalt);
  int token_channels = m.geo_channels;
  if (m.use_adapter) {
    adapter.emplace(m.geo_channels, m.side_channels, m.adapter_depth, rng);
    token_channels += m.side_channels;
  }
  tokenizer.emplace(token_channels, m.dim, embed.grid_h, embed.grid_w, rng);
  gate = FusionGate(m.dim, rng, m.gate_init);
  trunk = Trunk(m.dim, m.depth, m.heads, m.mlp_ratio, embed.grid_h, embed.grid_w, rng);
  decoder = ManoDecoder(m.dim, m.decoder_layers, m.decoder_heads, m.mlp_ratio, m.ief_iterations,
                        m.cam_init, rng);
  kqir = Kqir(m.dim, m.kqir_dq, m.kqir_heads, m.kqir_hidden, m.kqir_steps, m.kqir_share, rng);

  ParamMap map = params();  // throws on duplicates
  (void)map;
}

ModelForward GeoHandModel::forward(const Tensor& image, const Tensor* gt_geo) const {
  const auto& m = cfg_.model;
  Tensor tokens = embed(image);
  tokens = trunk.run(tokens, 0, m.fusion_after_block);
  if (!m.gate_bypass) {
    GeoFeatureMap raw = stub->extract(image, gt_geo);
    GeoFeatureMap aug;
    if (adapter) {
      aug = adapter->forward(raw);
    } else {
      aug.map = raw.map;  // ablation: raw features pass straight through
      aug.kind = GeoFeatureMap::Kind::augmented;
    }
    const Tensor geo_tokens = tokenizer->tokenize(aug);
    tokens = gate(tokens, geo_tokens);
  }
  tokens = trunk.run(tokens, m.fusion_after_block, trunk.depth());

  ModelForward out;
  const Tensor coarse = decoder.decode(tokens);
  out.step_params.push_back(coarse);
  for (const Tensor& p : kqir.refine(coarse, tokens, tmpl_)) out.step_params.push_back(p);
  out.gate = gate.gate_value();
  return out;
}

ParamMap GeoHandModel::params() {
  ParamMap map;
  embed.collect(map, "embed");
  stub->collect(map, "stub");
  if (adapter) adapter->collect(map, "adapter");
  tokenizer->collect(map, "geo_tokenizer");
  gate.collect(map, "gate");
  trunk.collect(map, "trunk");
  decoder.collect(map, "decoder");
  kqir.collect(map, "kqir");
  check_unique_names(map);
  return map;
}

void save_checkpoint(const std::string& path, GeoHandModel& model, uint64_t step,
                     const AdamW* opt) {
  ParamMap map = model.params();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot write '" + path + "'");
  serial::write_bytes(f, "GHCK", 4);
  serial::write_u8(f, 1);
  serial::write_string(f, model.config().to_text());
  serial::write_u64(f, step);
  // the reported gate value matches what a reload reproduces, so it is
  // computed from the 32-bit stored form of g
  const double g32 = static_cast<double>(static_cast<float>(model.gate.g.value()));
  serial::write_f64(f, 1.0 / (1.0 + std::exp(-g32)));

  uint32_t n_trainable = 0;
  for (const auto& p : map) {
    if (p.trainable) ++n_trainable;
  }
  serial::write_u32(f, n_trainable);
  for (const auto& p : map) {
    if (!p.trainable) continue;
    serial::write_string(f, p.name);
    serial::write_u32(f, static_cast<uint32_t>(p.tensor.dim()));
    for (int d : p.tensor.shape()) serial::write_u32(f, static_cast<uint32_t>(d));
    const double* x = p.tensor.data();
    for (int64_t k = 0; k < p.tensor.numel(); ++k) {
      serial::write_f32(f, static_cast<float>(x[k]));
    }
  }

  serial::write_u8(f, opt ? 1 : 0);
  if (opt) {
    serial::write_u64(f, opt->t());
    const auto& ms = opt->m_state();
    const auto& vs = opt->v_state();
    if (ms.size() != map.size()) {
      throw std::runtime_error("checkpoint: optimizer state does not match the parameter map");
    }
    for (size_t i = 0; i < map.size(); ++i) {
      if (!map[i].trainable) continue;
      for (double x : ms[i]) serial::write_f32(f, static_cast<float>(x));
      for (double x : vs[i]) serial::write_f32(f, static_cast<float>(x));
    }
  }
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[4];
  serial::read_bytes(f, magic, 4);
  if (std::string(magic, 4) != "GHCK") throw std::runtime_error("checkpoint: bad magic");
  const uint8_t version = serial::read_u8(f);
  if (version != 1) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  CheckpointData ck;
  ck.config = Config::parse_text(serial::read_string(f));
  ck.step = serial::read_u64(f);
  ck.sigma_g = serial::read_f64(f);
  const uint32_t n = serial::read_u32(f);
  ck.names.resize(n);
  ck.shapes.resize(n);
  ck.values.resize(n);
  for (uint32_t i = 0; i < n; ++i) {
    ck.names[i] = serial::read_string(f);
    const uint32_t nd = serial::read_u32(f);
    size_t count = 1;
    for (uint32_t d = 0; d < nd; ++d) {
      ck.shapes[i].push_back(static_cast<int>(serial::read_u32(f)));
      count *= static_cast<size_t>(ck.shapes[i].back());
    }
    ck.values[i].resize(count);
    for (size_t k = 0; k < count; ++k) ck.values[i][k] = serial::read_f32(f);
  }
  ck.has_moments = serial::read_u8(f) != 0;
  if (ck.has_moments) {
    ck.adam_t = serial::read_u64(f);
    ck.m.resize(n);
    ck.v.resize(n);
    for (uint32_t i = 0; i < n; ++i) {
      ck.m[i].resize(ck.values[i].size());
      for (float& x : ck.m[i]) x = serial::read_f32(f);
      ck.v[i].resize(ck.values[i].size());
      for (float& x : ck.v[i]) x = serial::read_f32(f);
    }
  }
  return ck;
}

void apply_checkpoint(const CheckpointData& ck, GeoHandModel& model, AdamW* opt) {
  ParamMap map = model.params();
  size_t applied = 0;
  std::vector<std::vector<double>> m_full, v_full;
  if (ck.has_moments && opt) {
    m_full.resize(map.size());
    v_full.resize(map.size());
  }
  for (size_t i = 0; i < map.size(); ++i) {
    if (!map[i].trainable) continue;
    size_t found = ck.names.size();
    for (size_t j = 0; j < ck.names.size(); ++j) {
      if (ck.names[j] == map[i].name) {
        found = j;
        break;
      }
    }
    if (found == ck.names.size()) {
      throw std::runtime_error("checkpoint: parameter '" + map[i].name + "' missing from file");
    }
    if (ck.shapes[found] != map[i].tensor.shape()) {
      throw std::runtime_error("checkpoint: shape mismatch for '" + map[i].name + "'");
    }
    double* x = map[i].tensor.data();
    for (size_t k = 0; k < ck.values[found].size(); ++k) {
      x[k] = static_cast<double>(ck.values[found][k]);
    }
    if (ck.has_moments && opt) {
      m_full[i].assign(ck.m[found].begin(), ck.m[found].end());
      v_full[i].assign(ck.v[found].begin(), ck.v[found].end());
    }
    ++applied;
  }
  if (applied != ck.names.size()) {
    throw std::runtime_error("checkpoint: file carries " + std::to_string(ck.names.size()) +
                             " parameters, model expects " + std::to_string(applied));
  }
  if (ck.has_moments && opt) opt->restore(ck.adam_t, std::move(m_full), std::move(v_full));
}

GeoHandModel model_from_checkpoint(const CheckpointData& ck) {
  GeoHandModel model(ck.config);
  apply_checkpoint(ck, model);
  return model;
}

}  // namespace geohand
