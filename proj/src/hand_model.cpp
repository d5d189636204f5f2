#include "geohand/hand_model.hpp"

#include <cmath>
#include <numeric>

#include "geohand/ops.hpp"
#include "geohand/rng.hpp"

namespace geohand {

namespace {

// digit layout: per-digit x offset and length scaling; stylized, not anatomical
constexpr double kPalmWidth = 0.080;
constexpr double kPalmLength = 0.070;
constexpr double kPalmThickness = 0.012;
constexpr double kRingRadius = 0.0075;
constexpr std::array<double, 5> kDigitScale = {0.80, 1.00, 1.05, 1.00, 0.85};
constexpr std::array<double, 3> kSegmentLength = {0.038, 0.030, 0.024};

struct TubeLayout {
  int ring_verts;  // vertices per ring
  int palm_rows, palm_cols;
};

TubeLayout solve_layout(int vertex_count) {
  // V = 2*rows*cols (two palm sheets) + 20*ring (5 digits x 4 rings)
  for (int r = (vertex_count - 8) / 20; r >= 3; --r) {
    int rem = vertex_count - 20 * r;
    if (rem < 8 || rem % 2 != 0) continue;
    int ab = rem / 2;
    for (int a = static_cast<int>(std::sqrt(static_cast<double>(ab))); a >= 2; --a) {
      if (ab % a == 0) return {r, a, ab / a};
    }
  }
  fail("hand_template: vertex count " + std::to_string(vertex_count) +
       " does not decompose as 2ab + 20r");
}

}  // namespace

HandTemplate HandTemplate::tube(int vertex_count, uint64_t seed) {
  TubeLayout lay = solve_layout(vertex_count);
  int R = lay.ring_verts;
  int A = lay.palm_rows, B = lay.palm_cols;
  int palm_count = 2 * A * B;

  HandTemplate t;
  t.vertex_count = vertex_count;
  t.rest.assign(static_cast<size_t>(vertex_count) * 3, 0.0);
  t.skin.assign(static_cast<size_t>(vertex_count) * kNodes, 0.0);
  t.shape_dirs.assign(static_cast<size_t>(kBetas) * vertex_count * 3, 0.0);
  t.joint_reg.assign(static_cast<size_t>(kJoints) * vertex_count, 0.0);
  t.node_reg.assign(static_cast<size_t>(kNodes) * vertex_count, 0.0);

  auto set_vert = [&](int v, double x, double y, double z) {
    t.rest[3 * v + 0] = x;
    t.rest[3 * v + 1] = y;
    t.rest[3 * v + 2] = z;
  };

  // palm: two A x B sheets, y in [-palm_length, 0]
  int vi = 0;
  for (int layer = 0; layer < 2; ++layer) {
    double z = layer == 0 ? kPalmThickness : -kPalmThickness;
    for (int iy = 0; iy < A; ++iy)
      for (int ix = 0; ix < B; ++ix) {
        double x = -kPalmWidth / 2 + kPalmWidth * ix / (B - 1);
        double y = -kPalmLength + kPalmLength * iy / (A - 1);
        set_vert(vi++, x, y, z);
      }
  }

  // digits: 4 rings each (base knuckle, mid, distal, tip), extending in +y
  // node order: 0 root, then 3 per digit; joints: 0 root, then 4 per digit
  t.parent[0] = 0;
  std::array<double, 5> digit_x{};
  for (int d = 0; d < 5; ++d)
    digit_x[d] = -kPalmWidth / 2 + kPalmWidth * d / 4.0;

  std::vector<int> ring_start(20);  // per digit*4 rings
  for (int d = 0; d < 5; ++d) {
    double cum = 0.0;
    for (int ring = 0; ring < 4; ++ring) {
      ring_start[d * 4 + ring] = vi;
      for (int i = 0; i < R; ++i) {
        double ang = 2.0 * M_PI * i / R;
        set_vert(vi++, digit_x[d] + kRingRadius * std::cos(ang), cum,
                 kRingRadius * std::sin(ang));
      }
      if (ring < 3) cum += kSegmentLength[ring] * kDigitScale[d];
    }
  }
  if (vi != vertex_count) fail("hand_template: internal vertex count mismatch");

  // kinematic tree
  for (int d = 0; d < 5; ++d) {
    int base = 1 + 3 * d;
    t.parent[base + 0] = 0;
    t.parent[base + 1] = base + 0;
    t.parent[base + 2] = base + 1;
  }

  // regressors: joint = centroid of its ring (palm centroid for the root)
  for (int v = 0; v < palm_count; ++v)
    t.joint_reg[0 * vertex_count + v] = 1.0 / palm_count;
  for (int d = 0; d < 5; ++d)
    for (int ring = 0; ring < 4; ++ring) {
      int j = 1 + 4 * d + ring;
      for (int i = 0; i < R; ++i)
        t.joint_reg[static_cast<size_t>(j) * vertex_count + ring_start[d * 4 + ring] + i] =
            1.0 / R;
    }
  // articulation pivots coincide with the first three joints of each digit
  for (int v = 0; v < vertex_count; ++v)
    t.node_reg[0 * vertex_count + v] = t.joint_reg[0 * vertex_count + v];
  for (int d = 0; d < 5; ++d)
    for (int seg = 0; seg < 3; ++seg) {
      int node = 1 + 3 * d + seg;
      int joint = 1 + 4 * d + seg;
      for (int v = 0; v < vertex_count; ++v)
        t.node_reg[static_cast<size_t>(node) * vertex_count + v] =
            t.joint_reg[static_cast<size_t>(joint) * vertex_count + v];
    }

  // skinning: each ring blends the two bones meeting at it, the tip ring and
  // the palm are rigid. Ring centroids equal the pivots, which keeps regressed
  // joints rigid under pose (affine maps commute with averaging).
  auto skin_at = [&](int v, int node, double w) {
    t.skin[static_cast<size_t>(v) * kNodes + node] = w;
  };
  for (int v = 0; v < palm_count; ++v) skin_at(v, 0, 1.0);
  for (int d = 0; d < 5; ++d) {
    int n0 = 1 + 3 * d;
    for (int ring = 0; ring < 4; ++ring) {
      for (int i = 0; i < R; ++i) {
        int v = ring_start[d * 4 + ring] + i;
        switch (ring) {
          case 0: skin_at(v, 0, 0.5); skin_at(v, n0, 0.5); break;
          case 1: skin_at(v, n0, 0.5); skin_at(v, n0 + 1, 0.5); break;
          case 2: skin_at(v, n0 + 1, 0.5); skin_at(v, n0 + 2, 0.5); break;
          case 3: skin_at(v, n0 + 2, 1.0); break;
        }
      }
    }
  }

  // edges of the 21-joint skeleton
  int e = 0;
  for (int d = 0; d < 5; ++d) {
    t.edges[e++] = {0, 1 + 4 * d};
    for (int ring = 0; ring < 3; ++ring)
      t.edges[e++] = {1 + 4 * d + ring, 2 + 4 * d + ring};
  }
  for (int d = 0; d < 5; ++d) t.fingertips[d] = 4 + 4 * d;

  // shape directions: 0 = overall scale, 1 = digit elongation, rest are small
  // node-smoothed random fields
  for (int v = 0; v < vertex_count; ++v)
    for (int c = 0; c < 3; ++c)
      t.shape_dirs[(0 * static_cast<size_t>(vertex_count) + v) * 3 + c] = t.rest[3 * v + c];
  for (int v = palm_count; v < vertex_count; ++v) {
    double y = t.rest[3 * v + 1];
    if (y > 0.0)
      t.shape_dirs[(1 * static_cast<size_t>(vertex_count) + v) * 3 + 1] = 0.15 * y;
  }
  Rng rng(seed);
  for (int i = 2; i < kBetas; ++i) {
    std::array<std::array<double, 3>, kNodes> field{};
    for (auto& g : field)
      for (auto& x : g) x = rng.normal(0.0, 0.004);
    for (int v = 0; v < vertex_count; ++v)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int k = 0; k < kNodes; ++k)
          acc += t.skin[static_cast<size_t>(v) * kNodes + k] * field[k][c];
        t.shape_dirs[(static_cast<size_t>(i) * vertex_count + v) * 3 + c] = acc;
      }
  }

  // faces: palm sheets, palm side walls, digit tubes, ring caps
  auto quad = [&](int a, int b, int c, int d2) {
    t.faces.push_back({a, b, c});
    t.faces.push_back({a, c, d2});
  };
  auto palm_idx = [&](int layer, int iy, int ix) { return layer * A * B + iy * B + ix; };
  for (int iy = 0; iy + 1 < A; ++iy)
    for (int ix = 0; ix + 1 < B; ++ix) {
      quad(palm_idx(0, iy, ix), palm_idx(0, iy, ix + 1), palm_idx(0, iy + 1, ix + 1),
           palm_idx(0, iy + 1, ix));
      quad(palm_idx(1, iy, ix), palm_idx(1, iy + 1, ix), palm_idx(1, iy + 1, ix + 1),
           palm_idx(1, iy, ix + 1));
    }
  for (int ix = 0; ix + 1 < B; ++ix) {
    quad(palm_idx(0, 0, ix), palm_idx(1, 0, ix), palm_idx(1, 0, ix + 1), palm_idx(0, 0, ix + 1));
    quad(palm_idx(0, A - 1, ix), palm_idx(0, A - 1, ix + 1), palm_idx(1, A - 1, ix + 1),
         palm_idx(1, A - 1, ix));
  }
  for (int iy = 0; iy + 1 < A; ++iy) {
    quad(palm_idx(0, iy, 0), palm_idx(0, iy + 1, 0), palm_idx(1, iy + 1, 0), palm_idx(1, iy, 0));
    quad(palm_idx(0, iy, B - 1), palm_idx(1, iy, B - 1), palm_idx(1, iy + 1, B - 1),
         palm_idx(0, iy + 1, B - 1));
  }
  for (int d = 0; d < 5; ++d) {
    for (int ring = 0; ring < 3; ++ring) {
      int r0 = ring_start[d * 4 + ring], r1 = ring_start[d * 4 + ring + 1];
      for (int i = 0; i < R; ++i) {
        int j = (i + 1) % R;
        quad(r0 + i, r0 + j, r1 + j, r1 + i);
      }
    }
    int base = ring_start[d * 4 + 0], tip = ring_start[d * 4 + 3];
    for (int i = 1; i + 1 < R; ++i) {
      t.faces.push_back({base, base + i + 1, base + i});
      t.faces.push_back({tip, tip + i, tip + i + 1});
    }
  }

  t.rest_t = Tensor::from({vertex_count, 3}, t.rest);
  t.skin_t = Tensor::from({vertex_count, kNodes}, t.skin);
  // shape dirs as (10, 3V) so V_shaped = rest + betas @ dirs
  std::vector<double> flat(t.shape_dirs);
  t.shape_flat_t = Tensor::from({kBetas, vertex_count * 3}, std::move(flat));
  t.joint_reg_t = Tensor::from({kJoints, vertex_count}, t.joint_reg);
  t.node_reg_t = Tensor::from({kNodes, vertex_count}, t.node_reg);

  t.validate();
  return t;
}

void HandTemplate::validate() const {
  int V = vertex_count;
  if (V <= 0) fail("hand_template: empty template");
  for (int v = 0; v < V; ++v) {
    double s = 0.0;
    for (int k = 0; k < kNodes; ++k) {
      double w = skin[static_cast<size_t>(v) * kNodes + k];
      if (w < 0.0) fail("hand_template: negative skin weight at vertex " + std::to_string(v));
      s += w;
    }
    if (std::fabs(s - 1.0) > 1e-12)
      fail("hand_template: skin weights of vertex " + std::to_string(v) + " sum to " +
           std::to_string(s));
  }
  for (int k = 1; k < kNodes; ++k)
    if (parent[k] >= k)
      fail("hand_template: parent order violated at node " + std::to_string(k));
  // edge list must be a spanning tree over the 21 joints
  std::array<int, kJoints> uf;
  std::iota(uf.begin(), uf.end(), 0);
  auto find = [&](int x) {
    while (uf[x] != x) x = uf[x] = uf[uf[x]];
    return x;
  };
  for (const auto& e : edges) {
    if (e[0] < 0 || e[0] >= kJoints || e[1] < 0 || e[1] >= kJoints)
      fail("hand_template: edge endpoint out of range");
    int a = find(e[0]), b = find(e[1]);
    if (a == b) fail("hand_template: edge list contains a cycle");
    uf[a] = b;
  }
  for (int j = 1; j < kJoints; ++j)
    if (find(j) != find(0)) fail("hand_template: joint graph is not connected");
  for (const auto& f : faces)
    for (int ix : f)
      if (ix < 0 || ix >= V) fail("hand_template: face index out of range");
}

std::array<double, 6> identity_rot6d() { return {1, 0, 0, 0, 1, 0}; }

Tensor rot6d_to_matrix(const Tensor& r6) {
  const auto& s = r6.shape();
  if (s.empty() || s.back() != 6)
    fail("rot6d: expected trailing extent 6, got " + shape_str(s));
  int64_t M = r6.numel() / 6;
  Tensor flat = ops::reshape(r6, {static_cast<int>(M), 6});

  auto normalized = [&](const Tensor& v) {
    Tensor n = ops::l2norm_lastdim(v);  // (M)
    Tensor nb = ops::broadcast_to(
        ops::reshape(ops::add_scalar(n, 1e-12), {static_cast<int>(M), 1}),
        {static_cast<int>(M), 3});
    return ops::div(v, nb);
  };

  Tensor c1 = ops::slice(flat, 1, 0, 3);
  Tensor c2 = ops::slice(flat, 1, 3, 3);
  Tensor a = normalized(c1);
  Tensor dot = ops::reduce_sum(ops::mul(a, c2), 1);  // (M)
  Tensor dotb = ops::broadcast_to(ops::reshape(dot, {static_cast<int>(M), 1}),
                                  {static_cast<int>(M), 3});
  Tensor b = normalized(ops::sub(c2, ops::mul(dotb, a)));

  auto comp = [&](const Tensor& v, int i) { return ops::slice(v, 1, i, 1); };
  Tensor ax = comp(a, 0), ay = comp(a, 1), az = comp(a, 2);
  Tensor bx = comp(b, 0), by = comp(b, 1), bz = comp(b, 2);
  Tensor cx = ops::sub(ops::mul(ay, bz), ops::mul(az, by));
  Tensor cy = ops::sub(ops::mul(az, bx), ops::mul(ax, bz));
  Tensor cz = ops::sub(ops::mul(ax, by), ops::mul(ay, bx));

  // row-major 3x3 with a, b, c as columns
  Tensor rows = ops::concat({ax, bx, cx, ay, by, cy, az, bz, cz}, 1);  // (M,9)
  std::vector<int> out_shape(s.begin(), s.end() - 1);
  out_shape.push_back(3);
  out_shape.push_back(3);
  return ops::reshape(rows, out_shape);
}

HandOutputBatch forward_kinematics(const HandTemplate& tmpl, const HandParamsBatch& params) {
  const auto& rs = params.rot.shape();
  if (rs.size() != 4 || rs[1] != kNodes || rs[2] != 3 || rs[3] != 3)
    fail("forward_kinematics: rotations must be (B,16,3,3), got " + shape_str(rs));
  int B = rs[0];
  if (params.betas.dim() != 2 || params.betas.extent(0) != B ||
      params.betas.extent(1) != kBetas)
    fail("forward_kinematics: betas must be (B,10), got " + shape_str(params.betas.shape()));
  int V = tmpl.vertex_count;

  // orthogonality check on the raw values
  {
    const double* rp = params.rot.data();
    for (int b = 0; b < B; ++b)
      for (int k = 0; k < kNodes; ++k) {
        const double* R = rp + (static_cast<size_t>(b) * kNodes + k) * 9;
        double worst = 0.0;
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j) {
            double dot = 0.0;
            for (int l = 0; l < 3; ++l) dot += R[l * 3 + i] * R[l * 3 + j];
            worst = std::max(worst, std::fabs(dot - (i == j ? 1.0 : 0.0)));
          }
        if (worst > 1e-6)
          fail("forward_kinematics: invalid rotation at sample " + std::to_string(b) +
               " node " + std::to_string(k) + " (orthogonality residual " +
               std::to_string(worst) + ")");
      }
  }

  // shaped vertices and pivots
  Tensor offsets = ops::matmul(params.betas, tmpl.shape_flat_t);          // (B,3V)
  Tensor v_shaped = ops::add(ops::broadcast_to(ops::reshape(tmpl.rest_t, {1, V, 3}), {B, V, 3}),
                             ops::reshape(offsets, {B, V, 3}));           // (B,V,3)
  Tensor nodes = ops::matmul(tmpl.node_reg_t, v_shaped);                   // (B,16,3)

  auto node_col = [&](int k) {
    return ops::reshape(ops::slice(nodes, 1, k, 1), {B, 3, 1});
  };
  auto rot_of = [&](int k) {
    return ops::reshape(ops::slice(params.rot, 1, k, 1), {B, 3, 3});
  };

  // kinematic chain: world rotation and position per node
  std::vector<Tensor> wrot(kNodes), wpos(kNodes);
  wrot[0] = rot_of(0);
  wpos[0] = node_col(0);
  for (int k = 1; k < kNodes; ++k) {
    int p = tmpl.parent[k];
    Tensor rel = ops::sub(node_col(k), node_col(p));   // (B,3,1)
    wrot[k] = ops::matmul(wrot[p], rot_of(k));
    wpos[k] = ops::add(ops::matmul(wrot[p], rel), wpos[p]);
  }

  // skinning transforms: rotation part and translation part with the rest
  // pivot removed, packed per node as 12 values
  std::vector<Tensor> packs;
  packs.reserve(kNodes);
  for (int k = 0; k < kNodes; ++k) {
    Tensor shift = ops::sub(wpos[k], ops::matmul(wrot[k], node_col(k)));  // (B,3,1)
    packs.push_back(ops::concat({ops::reshape(wrot[k], {B, 1, 9}),
                                 ops::reshape(shift, {B, 1, 3})}, 2));   // (B,1,12)
  }
  Tensor skin_mats = ops::concat(packs, 1);                               // (B,16,12)
  Tensor blended = ops::matmul(tmpl.skin_t, skin_mats);                   // (B,V,12)

  Tensor mrot = ops::reshape(ops::slice(blended, 2, 0, 9), {B, V, 3, 3});
  Tensor mpos = ops::slice(blended, 2, 9, 3);                             // (B,V,3)
  Tensor rotated = ops::reshape(
      ops::matmul(mrot, ops::reshape(v_shaped, {B, V, 3, 1})), {B, V, 3});
  Tensor verts = ops::add(rotated, mpos);

  HandOutputBatch out;
  out.verts = verts;
  out.joints = ops::matmul(tmpl.joint_reg_t, verts);                      // (B,21,3)
  return out;
}

Tensor project(const Tensor& points, const Tensor& cam) {
  const auto& ps = points.shape();
  if (ps.size() != 3 || ps[2] != 3)
    fail("project: points must be (B,K,3), got " + shape_str(ps));
  if (cam.dim() != 2 || cam.extent(1) != 3 || cam.extent(0) != ps[0])
    fail("project: cam must be (B,3), got " + shape_str(cam.shape()));
  int B = ps[0], K = ps[1];
  Tensor xy = ops::slice(points, 2, 0, 2);                                // (B,K,2)
  Tensor s = ops::broadcast_to(ops::reshape(ops::slice(cam, 1, 0, 1), {B, 1, 1}), {B, K, 2});
  Tensor t = ops::broadcast_to(ops::reshape(ops::slice(cam, 1, 1, 2), {B, 1, 2}), {B, K, 2});
  return ops::add(ops::mul(xy, s), t);
}

Tensor bone_lengths(const Tensor& joints, const HandTemplate& tmpl) {
  const auto& s = joints.shape();
  if (s.size() != 3 || s[1] != kJoints || s[2] != 3)
    fail("bone_lengths: joints must be (B,21,3), got " + shape_str(s));
  std::vector<int> ia, ib;
  for (const auto& e : tmpl.edges) {
    ia.push_back(e[0]);
    ib.push_back(e[1]);
  }
  Tensor pa = ops::index_select(joints, 1, ia);
  Tensor pb = ops::index_select(joints, 1, ib);
  return ops::l2norm_lastdim(ops::sub(pa, pb));  // (B,20)
}

Tensor flatten_root_rot(const Tensor& rot) {
  int B = rot.extent(0);
  return ops::reshape(ops::slice(rot, 1, 0, 1), {B, 9});
}

Tensor flatten_finger_rot(const Tensor& rot) {
  int B = rot.extent(0);
  return ops::reshape(ops::slice(rot, 1, 1, kNodes - 1), {B, (kNodes - 1) * 9});
}

std::array<double, 9> rodrigues(double ax, double ay, double az) {
  double theta = std::sqrt(ax * ax + ay * ay + az * az);
  std::array<double, 9> R{1, 0, 0, 0, 1, 0, 0, 0, 1};
  if (theta < 1e-12) return R;
  double x = ax / theta, y = ay / theta, z = az / theta;
  double c = std::cos(theta), s = std::sin(theta), t = 1.0 - c;
  R = {t * x * x + c,     t * x * y - s * z, t * x * z + s * y,
       t * x * y + s * z, t * y * y + c,     t * y * z - s * x,
       t * x * z - s * y, t * y * z + s * x, t * z * z + c};
  return R;
}

}  // namespace geohand
