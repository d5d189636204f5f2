#include "geohand/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "geohand/hand_model.hpp"
#include "geohand/rng.hpp"
#include "geohand/serial.hpp"
#include "geohand/tensor.hpp"

namespace geohand {

namespace {

// unit light direction for the flat shading
constexpr double kLight[3] = {0.36, 0.48, -0.8};

struct ShapeEntry {
  const char* name;
  std::vector<int> dims;
};

std::vector<ShapeEntry> shape_table(int h, int w, int gh, int gw) {
  return {{"image", {3, h, w}}, {"geo", {6, gh, gw}}, {"uv", {kJoints, 2}},
          {"m_uv", {kJoints}},  {"joints", {kJoints, 3}}, {"m_xyz", {1}},
          {"params", {kParamDim}}};
}

size_t numel(const std::vector<int>& dims) {
  size_t n = 1;
  for (int d : dims) n *= static_cast<size_t>(d);
  return n;
}

std::vector<double> vertex_normals(const std::vector<double>& verts,
                                   const std::vector<std::array<int, 3>>& faces) {
  std::vector<double> nrm(verts.size(), 0.0);
  for (const auto& f : faces) {
    const double* a = &verts[3 * f[0]];
    const double* b = &verts[3 * f[1]];
    const double* c = &verts[3 * f[2]];
    const double e1[3] = {b[0] - a[0], b[1] - a[1], b[2] - a[2]};
    const double e2[3] = {c[0] - a[0], c[1] - a[1], c[2] - a[2]};
    const double n[3] = {e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2],
                         e1[0] * e2[1] - e1[1] * e2[0]};
    for (int v : f) {
      for (int d = 0; d < 3; ++d) nrm[3 * v + d] += n[d];
    }
  }
  for (size_t i = 0; i < nrm.size(); i += 3) {
    const double len = std::sqrt(nrm[i] * nrm[i] + nrm[i + 1] * nrm[i + 1] + nrm[i + 2] * nrm[i + 2]);
    if (len > 1e-12) {
      nrm[i] /= len;
      nrm[i + 1] /= len;
      nrm[i + 2] /= len;
    }
  }
  return nrm;
}

// vertex splat: each grid cell takes the depth/normal of its closest vertex
void raster_geo(const std::vector<double>& verts, const std::vector<double>& normals,
                const std::vector<double>& uv_pix_x, const std::vector<double>& uv_pix_y,
                int gh, int gw, std::vector<double>& geo) {
  geo.assign(static_cast<size_t>(6) * gh * gw, 0.0);
  std::vector<double> depth(static_cast<size_t>(gh) * gw, kDepthSentinel);
  const int v_count = static_cast<int>(verts.size() / 3);
  for (int v = 0; v < v_count; ++v) {
    const int c = static_cast<int>(std::floor(uv_pix_x[v]));
    const int r = static_cast<int>(std::floor(uv_pix_y[v]));
    if (c < 0 || c >= gw || r < 0 || r >= gh) continue;
    const size_t cell = static_cast<size_t>(r) * gw + c;
    const double z = verts[3 * v + 2];
    if (z >= depth[cell]) continue;
    depth[cell] = z;
    for (int ch = 0; ch < 3; ++ch) {
      geo[(static_cast<size_t>(3 + ch) * gh + r) * gw + c] = normals[3 * v + ch];
    }
  }
  for (int ch = 0; ch < 3; ++ch) {
    for (size_t cell = 0; cell < depth.size(); ++cell) {
      geo[static_cast<size_t>(ch) * gh * gw + cell] = depth[cell];
    }
  }
}

double edge_fn(double ax, double ay, double bx, double by, double px, double py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

// z-buffered triangle fill with one flat shade per face
void raster_image(const std::vector<double>& verts, const std::vector<std::array<int, 3>>& faces,
                  const std::vector<double>& px, const std::vector<double>& py, int h, int w,
                  std::vector<double>& image) {
  image.assign(static_cast<size_t>(3) * h * w, 0.0);
  std::vector<double> zbuf(static_cast<size_t>(h) * w, std::numeric_limits<double>::infinity());
  for (const auto& f : faces) {
    const double x0 = px[f[0]], y0 = py[f[0]], z0 = verts[3 * f[0] + 2];
    const double x1 = px[f[1]], y1 = py[f[1]], z1 = verts[3 * f[1] + 2];
    const double x2 = px[f[2]], y2 = py[f[2]], z2 = verts[3 * f[2] + 2];
    const double area = edge_fn(x0, y0, x1, y1, x2, y2);
    if (std::fabs(area) < 1e-12) continue;

    const double* a = &verts[3 * f[0]];
    const double* b = &verts[3 * f[1]];
    const double* c = &verts[3 * f[2]];
    const double e1[3] = {b[0] - a[0], b[1] - a[1], b[2] - a[2]};
    const double e2[3] = {c[0] - a[0], c[1] - a[1], c[2] - a[2]};
    double n[3] = {e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2],
                   e1[0] * e2[1] - e1[1] * e2[0]};
    const double len = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
    double shade = 0.2;
    if (len > 1e-12) {
      const double d = (n[0] * kLight[0] + n[1] * kLight[1] + n[2] * kLight[2]) / len;
      shade = 0.2 + 0.8 * std::fabs(d);
    }

    const int c_lo = std::max(0, static_cast<int>(std::floor(std::min({x0, x1, x2}))));
    const int c_hi = std::min(w - 1, static_cast<int>(std::ceil(std::max({x0, x1, x2}))));
    const int r_lo = std::max(0, static_cast<int>(std::floor(std::min({y0, y1, y2}))));
    const int r_hi = std::min(h - 1, static_cast<int>(std::ceil(std::max({y0, y1, y2}))));
    for (int r = r_lo; r <= r_hi; ++r) {
      for (int col = c_lo; col <= c_hi; ++col) {
        const double cx = col + 0.5, cy = r + 0.5;
        const double w0 = edge_fn(x1, y1, x2, y2, cx, cy) / area;
        const double w1 = edge_fn(x2, y2, x0, y0, cx, cy) / area;
        const double w2 = edge_fn(x0, y0, x1, y1, cx, cy) / area;
        if (w0 < 0.0 || w1 < 0.0 || w2 < 0.0) continue;
        const double z = w0 * z0 + w1 * z1 + w2 * z2;
        const size_t cell = static_cast<size_t>(r) * w + col;
        if (z >= zbuf[cell]) continue;
        zbuf[cell] = z;
        for (int ch = 0; ch < 3; ++ch) image[static_cast<size_t>(ch) * h * w + cell] = shade;
      }
    }
  }
}

}  // namespace

void Dataset::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("dataset: cannot write '" + path + "'");
  serial::write_bytes(f, "GHDS", 4);
  serial::write_u8(f, 1);
  serial::write_u32(f, static_cast<uint32_t>(samples.size()));
  const auto table = shape_table(image_h, image_w, geo_h, geo_w);
  serial::write_u32(f, static_cast<uint32_t>(table.size()));
  for (const auto& e : table) {
    serial::write_string(f, e.name);
    serial::write_u32(f, static_cast<uint32_t>(e.dims.size()));
    for (int d : e.dims) serial::write_u32(f, static_cast<uint32_t>(d));
  }
  for (const auto& s : samples) {
    serial::write_f64_array(f, s.image);
    serial::write_f64_array(f, s.geo);
    serial::write_f64_array(f, s.uv);
    serial::write_f64_array(f, s.m_uv);
    serial::write_f64_array(f, s.joints);
    serial::write_f64(f, s.m_xyz);
    serial::write_f64_array(f, s.params);
  }
}

Dataset Dataset::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("dataset: cannot open '" + path + "'");
  char magic[4];
  serial::read_bytes(f, magic, 4);
  if (std::string(magic, 4) != "GHDS") throw std::runtime_error("dataset: bad magic");
  const uint8_t version = serial::read_u8(f);
  if (version != 1) {
    throw std::runtime_error("dataset: unsupported version " + std::to_string(version));
  }
  const uint32_t count = serial::read_u32(f);
  const uint32_t n_entries = serial::read_u32(f);

  Dataset ds;
  // read the declared table, then validate it against the expected layout
  // once the free extents (image/geo sizes) are known
  std::vector<std::string> names(n_entries);
  std::vector<std::vector<int>> dims(n_entries);
  for (uint32_t i = 0; i < n_entries; ++i) {
    names[i] = serial::read_string(f);
    const uint32_t nd = serial::read_u32(f);
    for (uint32_t d = 0; d < nd; ++d) dims[i].push_back(static_cast<int>(serial::read_u32(f)));
  }
  if (n_entries != 7 || names[0] != "image" || dims[0].size() != 3 || names[1] != "geo" ||
      dims[1].size() != 3) {
    throw std::runtime_error("dataset: shape table layout mismatch");
  }
  ds.image_h = dims[0][1];
  ds.image_w = dims[0][2];
  ds.geo_h = dims[1][1];
  ds.geo_w = dims[1][2];
  const auto expected = shape_table(ds.image_h, ds.image_w, ds.geo_h, ds.geo_w);
  for (size_t i = 0; i < expected.size(); ++i) {
    if (names[i] != expected[i].name || dims[i] != expected[i].dims) {
      throw std::runtime_error(std::string("dataset: shape table mismatch for '") +
                               expected[i].name + "'");
    }
  }

  ds.samples.resize(count);
  for (auto& s : ds.samples) {
    serial::read_f64_array(f, s.image, numel(expected[0].dims));
    serial::read_f64_array(f, s.geo, numel(expected[1].dims));
    serial::read_f64_array(f, s.uv, numel(expected[2].dims));
    serial::read_f64_array(f, s.m_uv, numel(expected[3].dims));
    serial::read_f64_array(f, s.joints, numel(expected[4].dims));
    s.m_xyz = serial::read_f64(f);
    serial::read_f64_array(f, s.params, numel(expected[6].dims));
  }
  return ds;
}

Dataset synth_generate(const Config& cfg, uint64_t seed) {
  cfg.validate();
  const HandTemplate tmpl = HandTemplate::tube(cfg.model.vertex_count, kTemplateSeed);
  Rng rng(seed);
  NoGradScope off_tape;

  Dataset ds;
  ds.image_h = cfg.model.image_h;
  ds.image_w = cfg.model.image_w;
  ds.geo_h = cfg.model.geo_h;
  ds.geo_w = cfg.model.geo_w;
  ds.samples.reserve(static_cast<size_t>(cfg.data.samples));

  for (int i = 0; i < cfg.data.samples; ++i) {
    Sample s;
    // bounded pose perturbation around rest, per articulated node
    std::vector<double> theta6(kNodes * 6);
    for (int k = 0; k < kNodes; ++k) {
      const double ax = rng.uniform(-cfg.data.pose_noise, cfg.data.pose_noise);
      const double ay = rng.uniform(-cfg.data.pose_noise, cfg.data.pose_noise);
      const double az = rng.uniform(-cfg.data.pose_noise, cfg.data.pose_noise);
      const std::array<double, 9> r = rodrigues(ax, ay, az);
      // first two matrix columns form the 6-value encoding
      theta6[6 * k + 0] = r[0];
      theta6[6 * k + 1] = r[3];
      theta6[6 * k + 2] = r[6];
      theta6[6 * k + 3] = r[1];
      theta6[6 * k + 4] = r[4];
      theta6[6 * k + 5] = r[7];
    }
    std::vector<double> betas(kBetas);
    for (double& b : betas) b = rng.normal(0.0, cfg.data.beta_noise);
    const double cam_s = rng.uniform(cfg.data.cam_scale_lo, cfg.data.cam_scale_hi);

    HandParamsBatch hp;
    hp.rot = rot6d_to_matrix(Tensor::from({1, kNodes, 6}, theta6));
    hp.betas = Tensor::from({1, kBetas}, betas);

    // provisional camera to find the mesh centroid, then recenter with jitter
    hp.cam = Tensor::from({1, 3}, {cam_s, 0.0, 0.0});
    HandOutputBatch out = forward_kinematics(tmpl, hp);
    double cx = 0.0, cy = 0.0;
    const int v_count = tmpl.vertex_count;
    for (int v = 0; v < v_count; ++v) {
      cx += out.verts.data()[3 * v + 0] / v_count;
      cy += out.verts.data()[3 * v + 1] / v_count;
    }
    const double tx = 0.5 - cam_s * cx + rng.uniform(-0.03, 0.03);
    const double ty = 0.5 - cam_s * cy + rng.uniform(-0.03, 0.03);
    hp.cam = Tensor::from({1, 3}, {cam_s, tx, ty});

    const Tensor uv = project(out.joints, hp.cam);
    s.joints.assign(out.joints.data(), out.joints.data() + 3 * kJoints);
    s.uv.assign(uv.data(), uv.data() + 2 * kJoints);
    s.params.resize(kParamDim);
    std::copy(theta6.begin(), theta6.end(), s.params.begin());
    std::copy(betas.begin(), betas.end(), s.params.begin() + kThetaDim);
    s.params[kThetaDim + kBetas + 0] = cam_s;
    s.params[kThetaDim + kBetas + 1] = tx;
    s.params[kThetaDim + kBetas + 2] = ty;

    // rasterize: normalized projection u maps to pixels as (u.x*W, u.y*H)
    const std::vector<double> verts(out.verts.data(), out.verts.data() + 3 * v_count);
    const std::vector<double> normals = vertex_normals(verts, tmpl.faces);
    std::vector<double> gx(v_count), gy(v_count), ix(v_count), iy(v_count);
    for (int v = 0; v < v_count; ++v) {
      const double ux = cam_s * verts[3 * v + 0] + tx;
      const double uy = cam_s * verts[3 * v + 1] + ty;
      gx[v] = ux * cfg.model.geo_w;
      gy[v] = uy * cfg.model.geo_h;
      ix[v] = ux * cfg.model.image_w;
      iy[v] = uy * cfg.model.image_h;
    }
    raster_geo(verts, normals, gx, gy, cfg.model.geo_h, cfg.model.geo_w, s.geo);
    raster_image(verts, tmpl.faces, ix, iy, cfg.model.image_h, cfg.model.image_w, s.image);

    s.m_uv.assign(kJoints, 1.0);
    if (cfg.data.mask_corruption > 0.0) {
      for (double& m : s.m_uv) {
        if (rng.uniform() < cfg.data.mask_corruption) m = 0.0;
      }
    }
    s.m_xyz = 1.0;
    if (cfg.data.uv_noise > 0.0) {
      for (double& u : s.uv) u += rng.normal(0.0, cfg.data.uv_noise);
    }
    if (cfg.data.image_noise > 0.0) {
      for (double& p : s.image) p += rng.normal(0.0, cfg.data.image_noise);
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace geohand
