#pragma once

// Structured triangular meshes on rectangles, plus the mesh <-> pixel-grid
// interpolation used by the convolutional update blocks.
//
// Conventions: elements are counter-clockwise; each rectangle cell is split
// along its lower-left -> upper-right diagonal; the four boundary segments
// are labeled "bottom", "right", "top", "left" and traversed CCW so the
// boundary forms closed loops.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qpat/blockfile.hpp"
#include "qpat/common.hpp"

namespace qpat {

using Eigen::VectorXd;

struct BoundaryEdge {
  std::uint32_t a = 0, b = 0;  // node ids, ordered CCW along the boundary
  std::uint16_t label = 0;     // index into TriMesh::segment_labels
  std::uint32_t element = 0;   // owning element
};

class TriMesh {
 public:
  std::vector<std::array<double, 2>> nodes;
  std::vector<std::array<std::uint32_t, 3>> elements;
  std::vector<BoundaryEdge> boundary_edges;
  std::vector<std::string> segment_labels;
  double x0 = 0, y0 = 0, width = 0, height = 0;
  // structured-grid dimensions when built by build_rect_mesh, else 0
  std::uint32_t nx = 0, ny = 0;

  std::size_t node_count() const { return nodes.size(); }
  std::size_t element_count() const { return elements.size(); }

  double signed_area(std::size_t e) const {
    const auto& t = elements[e];
    const auto& p0 = nodes[t[0]];
    const auto& p1 = nodes[t[1]];
    const auto& p2 = nodes[t[2]];
    return 0.5 * ((p1[0] - p0[0]) * (p2[1] - p0[1]) -
                  (p2[0] - p0[0]) * (p1[1] - p0[1]));
  }
  double area(std::size_t e) const { return std::abs(signed_area(e)); }

  double total_area() const {
    double a = 0;
    for (std::size_t e = 0; e < elements.size(); ++e) a += area(e);
    return a;
  }

  int label_index(const std::string& name) const {
    for (std::size_t i = 0; i < segment_labels.size(); ++i)
      if (segment_labels[i] == name) return int(i);
    return -1;
  }

  // neighbor element across local edge k = (v_k, v_{k+1}), -1 on the boundary
  const std::vector<std::array<std::int32_t, 3>>& neighbors() const {
    return neighbors_;
  }

  // barycentric coordinates of (x, y) w.r.t. element e
  std::array<double, 3> barycentric(std::size_t e, double x, double y) const {
    const auto& t = elements[e];
    const auto& p0 = nodes[t[0]];
    const auto& p1 = nodes[t[1]];
    const auto& p2 = nodes[t[2]];
    const double det = (p1[0] - p0[0]) * (p2[1] - p0[1]) -
                       (p2[0] - p0[0]) * (p1[1] - p0[1]);
    const double l1 =
        ((x - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (y - p0[1])) / det;
    const double l2 =
        ((p1[0] - p0[0]) * (y - p0[1]) - (x - p0[0]) * (p1[1] - p0[1])) / det;
    return {1.0 - l1 - l2, l1, l2};
  }

  // containing element, or -1 if outside; structured O(1) lookup when
  // available, otherwise a linear scan
  std::int64_t locate(double x, double y) const {
    const double eps = 1e-12 * (width + height);
    if (x < x0 - eps || x > x0 + width + eps || y < y0 - eps ||
        y > y0 + height + eps)
      return -1;
    if (nx > 0 && ny > 0) {
      const double dx = width / nx, dy = height / ny;
      auto clampi = [](std::int64_t v, std::int64_t hi) {
        return v < 0 ? 0 : (v > hi ? hi : v);
      };
      const std::int64_t i = clampi(std::int64_t((x - x0) / dx), nx - 1);
      const std::int64_t j = clampi(std::int64_t((y - y0) / dy), ny - 1);
      const double u = (x - x0) / dx - double(i);
      const double v = (y - y0) / dy - double(j);
      return 2 * (j * nx + i) + (v > u ? 1 : 0);
    }
    for (std::size_t e = 0; e < elements.size(); ++e) {
      const auto l = barycentric(e, x, y);
      if (l[0] >= -1e-12 && l[1] >= -1e-12 && l[2] >= -1e-12)
        return std::int64_t(e);
    }
    return -1;
  }

  // unique element-edge set (node pair + length); the TV prior graph
  struct Edge {
    std::uint32_t a, b;
    double length;
  };
  std::vector<Edge> unique_edges() const {
    std::map<std::pair<std::uint32_t, std::uint32_t>, double> seen;
    for (const auto& t : elements) {
      for (int k = 0; k < 3; ++k) {
        std::uint32_t a = t[k], b = t[(k + 1) % 3];
        if (a > b) std::swap(a, b);
        if (!seen.count({a, b})) {
          const double ex = nodes[a][0] - nodes[b][0];
          const double ey = nodes[a][1] - nodes[b][1];
          seen[{a, b}] = std::hypot(ex, ey);
        }
      }
    }
    std::vector<Edge> out;
    out.reserve(seen.size());
    for (const auto& [key, len] : seen) out.push_back({key.first, key.second, len});
    return out;
  }

  // checks orientation, boundary ownership and bounding box; builds adjacency
  void finalize() {
    const double eps = 1e-9 * (std::abs(width) + std::abs(height) + 1.0);
    for (const auto& p : nodes) {
      if (p[0] < x0 - eps || p[0] > x0 + width + eps || p[1] < y0 - eps ||
          p[1] > y0 + height + eps)
        throw std::invalid_argument("mesh: node outside declared bounding box");
    }
    for (std::size_t e = 0; e < elements.size(); ++e) {
      if (signed_area(e) <= 0.0)
        throw std::invalid_argument("mesh: element " + std::to_string(e) +
                                    " is not CCW / degenerate");
    }
    // edge -> (element, local edge) map; interior edges appear twice
    std::map<std::pair<std::uint32_t, std::uint32_t>,
             std::vector<std::pair<std::uint32_t, int>>>
        edge_use;
    for (std::size_t e = 0; e < elements.size(); ++e) {
      const auto& t = elements[e];
      for (int k = 0; k < 3; ++k) {
        std::uint32_t a = t[k], b = t[(k + 1) % 3];
        if (a > b) std::swap(a, b);
        edge_use[{a, b}].push_back({std::uint32_t(e), k});
      }
    }
    neighbors_.assign(elements.size(), {-1, -1, -1});
    for (const auto& [key, uses] : edge_use) {
      if (uses.size() == 2) {
        neighbors_[uses[0].first][uses[0].second] = std::int32_t(uses[1].first);
        neighbors_[uses[1].first][uses[1].second] = std::int32_t(uses[0].first);
      } else if (uses.size() != 1) {
        throw std::invalid_argument("mesh: non-manifold edge");
      }
    }
    for (auto& be : boundary_edges) {
      std::uint32_t a = be.a, b = be.b;
      if (a > b) std::swap(a, b);
      const auto it = edge_use.find({a, b});
      if (it == edge_use.end() || it->second.size() != 1)
        throw std::invalid_argument(
            "mesh: boundary edge not owned by exactly one element");
      be.element = it->second[0].first;
    }
  }

  void save(const std::string& path) const {
    ContainerWriter w;
    w.header["kind"] = "qpat-mesh";
    w.header["schema_version"] = 1;
    w.header["node_count"] = nodes.size();
    w.header["element_count"] = elements.size();
    w.header["boundary_edge_count"] = boundary_edges.size();
    w.header["extent"] = {x0, y0, width, height};
    w.header["nx"] = nx;
    w.header["ny"] = ny;
    w.header["segment_labels"] = segment_labels;
    std::vector<double> coords(nodes.size() * 2);
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      coords[2 * i] = nodes[i][0];
      coords[2 * i + 1] = nodes[i][1];
    }
    std::vector<std::uint32_t> conn(elements.size() * 3);
    for (std::size_t e = 0; e < elements.size(); ++e)
      for (int k = 0; k < 3; ++k) conn[3 * e + k] = elements[e][k];
    std::vector<std::uint32_t> bnd(boundary_edges.size() * 3);
    for (std::size_t i = 0; i < boundary_edges.size(); ++i) {
      bnd[3 * i] = boundary_edges[i].a;
      bnd[3 * i + 1] = boundary_edges[i].b;
      bnd[3 * i + 2] = boundary_edges[i].label;
    }
    w.add_f64("coordinates", std::move(coords), {nodes.size(), 2});
    w.add_u32("elements", std::move(conn), {elements.size(), 3});
    w.add_u32("boundary_edges", std::move(bnd), {boundary_edges.size(), 3});
    w.write(path);
  }

  static TriMesh load(const std::string& path) {
    ContainerReader r(path);
    if (r.header.value("kind", "") != "qpat-mesh")
      throw std::runtime_error("not a mesh container: " + path);
    TriMesh m;
    const auto ext = r.header.at("extent");
    m.x0 = ext[0];
    m.y0 = ext[1];
    m.width = ext[2];
    m.height = ext[3];
    m.nx = r.header.value("nx", 0u);
    m.ny = r.header.value("ny", 0u);
    m.segment_labels =
        r.header.at("segment_labels").get<std::vector<std::string>>();
    const auto& coords = r.f64("coordinates");
    m.nodes.resize(coords.size() / 2);
    for (std::size_t i = 0; i < m.nodes.size(); ++i)
      m.nodes[i] = {coords[2 * i], coords[2 * i + 1]};
    const auto& conn = r.u32("elements");
    m.elements.resize(conn.size() / 3);
    for (std::size_t e = 0; e < m.elements.size(); ++e)
      m.elements[e] = {conn[3 * e], conn[3 * e + 1], conn[3 * e + 2]};
    const auto& bnd = r.u32("boundary_edges");
    m.boundary_edges.resize(bnd.size() / 3);
    for (std::size_t i = 0; i < m.boundary_edges.size(); ++i) {
      m.boundary_edges[i].a = bnd[3 * i];
      m.boundary_edges[i].b = bnd[3 * i + 1];
      m.boundary_edges[i].label = std::uint16_t(bnd[3 * i + 2]);
    }
    m.finalize();
    return m;
  }

 private:
  std::vector<std::array<std::int32_t, 3>> neighbors_;
};

inline TriMesh build_rect_mesh(double width_mm, double height_mm,
                               std::uint32_t nx, std::uint32_t ny) {
  if (!(width_mm > 0.0) || !(height_mm > 0.0))
    throw std::invalid_argument("build_rect_mesh: non-positive dimensions");
  if (nx < 1 || ny < 1)
    throw std::invalid_argument("build_rect_mesh: need nx, ny >= 1");
  TriMesh m;
  m.width = width_mm;
  m.height = height_mm;
  m.nx = nx;
  m.ny = ny;
  m.segment_labels = {"bottom", "right", "top", "left"};
  const double dx = width_mm / nx, dy = height_mm / ny;
  auto id = [&](std::uint32_t i, std::uint32_t j) { return j * (nx + 1) + i; };
  m.nodes.reserve(std::size_t(nx + 1) * (ny + 1));
  for (std::uint32_t j = 0; j <= ny; ++j)
    for (std::uint32_t i = 0; i <= nx; ++i)
      m.nodes.push_back({i * dx, j * dy});
  m.elements.reserve(std::size_t(2) * nx * ny);
  for (std::uint32_t j = 0; j < ny; ++j) {
    for (std::uint32_t i = 0; i < nx; ++i) {
      const std::uint32_t a = id(i, j), b = id(i + 1, j), c = id(i + 1, j + 1),
                          d = id(i, j + 1);
      m.elements.push_back({a, b, c});  // below the a->c diagonal
      m.elements.push_back({a, c, d});  // above it
    }
  }
  for (std::uint32_t i = 0; i < nx; ++i)
    m.boundary_edges.push_back({id(i, 0), id(i + 1, 0), 0, 0});
  for (std::uint32_t j = 0; j < ny; ++j)
    m.boundary_edges.push_back({id(nx, j), id(nx, j + 1), 1, 0});
  for (std::uint32_t i = nx; i > 0; --i)
    m.boundary_edges.push_back({id(i, ny), id(i - 1, ny), 2, 0});
  for (std::uint32_t j = ny; j > 0; --j)
    m.boundary_edges.push_back({id(0, j), id(0, j - 1), 3, 0});
  m.finalize();
  return m;
}

// --- pixel grid -------------------------------------------------------------

struct PixelGrid {
  std::uint32_t rows = 72, cols = 72;
  double x0 = 0, y0 = 0, width = 0, height = 0;

  static PixelGrid covering(const TriMesh& mesh, std::uint32_t rows,
                            std::uint32_t cols) {
    return {rows, cols, mesh.x0, mesh.y0, mesh.width, mesh.height};
  }
  double dx() const { return width / cols; }
  double dy() const { return height / rows; }
  // pixel (r, c) center; row 0 sits at y0
  double cx(std::uint32_t c) const { return x0 + (c + 0.5) * dx(); }
  double cy(std::uint32_t r) const { return y0 + (r + 0.5) * dy(); }
  std::size_t size() const { return std::size_t(rows) * cols; }
};

// Precomputed interpolation tables between a mesh and a grid. Both maps are
// linear; the adjoints are the exact transposes, needed for backpropagation
// through the learned loop.
class GridMapper {
 public:
  GridMapper(const TriMesh& mesh, const PixelGrid& grid)
      : grid_(grid), n_nodes_(mesh.node_count()) {
    // pixel -> (element nodes, barycentric weights)
    pix_nodes_.resize(grid.size());
    pix_w_.resize(grid.size());
    pix_inside_.resize(grid.size());
    for (std::uint32_t r = 0; r < grid.rows; ++r) {
      for (std::uint32_t c = 0; c < grid.cols; ++c) {
        const std::size_t p = std::size_t(r) * grid.cols + c;
        const std::int64_t e = mesh.locate(grid.cx(c), grid.cy(r));
        pix_inside_[p] = (e >= 0);
        if (e >= 0) {
          const auto l = mesh.barycentric(std::size_t(e), grid.cx(c), grid.cy(r));
          pix_nodes_[p] = mesh.elements[std::size_t(e)];
          pix_w_[p] = l;
        }
      }
    }
    // node -> (4 pixels, bilinear weights), clamped at the image border
    node_pix_.resize(n_nodes_);
    node_w_.resize(n_nodes_);
    for (std::size_t i = 0; i < n_nodes_; ++i) {
      const double u = (mesh.nodes[i][0] - grid.x0) / grid.dx() - 0.5;
      const double v = (mesh.nodes[i][1] - grid.y0) / grid.dy() - 0.5;
      const double uc = std::clamp(u, 0.0, double(grid.cols - 1));
      const double vc = std::clamp(v, 0.0, double(grid.rows - 1));
      const std::uint32_t c0 =
          std::min(std::uint32_t(uc), grid.cols >= 2 ? grid.cols - 2 : 0);
      const std::uint32_t r0 =
          std::min(std::uint32_t(vc), grid.rows >= 2 ? grid.rows - 2 : 0);
      const double fu = uc - c0, fv = vc - r0;
      const std::uint32_t c1 = std::min(c0 + 1, grid.cols - 1);
      const std::uint32_t r1 = std::min(r0 + 1, grid.rows - 1);
      node_pix_[i] = {std::size_t(r0) * grid.cols + c0,
                      std::size_t(r0) * grid.cols + c1,
                      std::size_t(r1) * grid.cols + c0,
                      std::size_t(r1) * grid.cols + c1};
      node_w_[i] = {(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv};
    }
  }

  const PixelGrid& grid() const { return grid_; }
  std::size_t node_count() const { return n_nodes_; }

  // nodal field -> image via barycentric interpolation at pixel centers
  VectorXd embed(const VectorXd& field, double fill = 0.0) const {
    if (std::size_t(field.size()) != n_nodes_)
      throw std::invalid_argument("grid_embed: field length != node count");
    VectorXd img(grid_.size());
    for (std::size_t p = 0; p < grid_.size(); ++p) {
      if (!pix_inside_[p]) {
        img[p] = fill;
        continue;
      }
      img[p] = pix_w_[p][0] * field[pix_nodes_[p][0]] +
               pix_w_[p][1] * field[pix_nodes_[p][1]] +
               pix_w_[p][2] * field[pix_nodes_[p][2]];
    }
    return img;
  }

  VectorXd embed_adjoint(const VectorXd& img_cot) const {
    if (std::size_t(img_cot.size()) != grid_.size())
      throw std::invalid_argument("embed_adjoint: image size mismatch");
    VectorXd out = VectorXd::Zero(n_nodes_);
    for (std::size_t p = 0; p < grid_.size(); ++p) {
      if (!pix_inside_[p]) continue;
      for (int k = 0; k < 3; ++k)
        out[pix_nodes_[p][k]] += pix_w_[p][k] * img_cot[p];
    }
    return out;
  }

  // image -> nodal field via bilinear sampling at node coordinates
  VectorXd extract(const VectorXd& img) const {
    if (std::size_t(img.size()) != grid_.size())
      throw std::invalid_argument("grid_extract: image resolution mismatch");
    VectorXd field(n_nodes_);
    for (std::size_t i = 0; i < n_nodes_; ++i) {
      double v = 0;
      for (int k = 0; k < 4; ++k) v += node_w_[i][k] * img[node_pix_[i][k]];
      field[i] = v;
    }
    return field;
  }

  VectorXd extract_adjoint(const VectorXd& field_cot) const {
    if (std::size_t(field_cot.size()) != n_nodes_)
      throw std::invalid_argument("extract_adjoint: field size mismatch");
    VectorXd out = VectorXd::Zero(grid_.size());
    for (std::size_t i = 0; i < n_nodes_; ++i)
      for (int k = 0; k < 4; ++k)
        out[node_pix_[i][k]] += node_w_[i][k] * field_cot[i];
    return out;
  }

 private:
  PixelGrid grid_;
  std::size_t n_nodes_;
  std::vector<std::array<std::uint32_t, 3>> pix_nodes_;
  std::vector<std::array<double, 3>> pix_w_;
  std::vector<char> pix_inside_;
  std::vector<std::array<std::size_t, 4>> node_pix_;
  std::vector<std::array<double, 4>> node_w_;
};

inline VectorXd grid_embed(const TriMesh& mesh, const VectorXd& field,
                           const PixelGrid& grid, double fill = 0.0) {
  return GridMapper(mesh, grid).embed(field, fill);
}

inline VectorXd grid_extract(const VectorXd& img, const TriMesh& mesh,
                             const PixelGrid& grid) {
  return GridMapper(mesh, grid).extract(img);
}

}  // namespace qpat
