#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <set>

#include "qpat/mesh.hpp"
#include "qpat/rng.hpp"

using namespace qpat;

// oracle: point-in-triangle by explicit barycentric test over all elements,
// independent of the structured lookup
static std::int64_t brute_locate(const TriMesh& m, double x, double y) {
  for (std::size_t e = 0; e < m.element_count(); ++e) {
    const auto l = m.barycentric(e, x, y);
    if (l[0] >= -1e-12 && l[1] >= -1e-12 && l[2] >= -1e-12)
      return std::int64_t(e);
  }
  return -1;
}

TEST_CASE("rect mesh counts match closed forms") {
  const auto m = build_rect_mesh(20.0, 25.0, 60, 75);
  CHECK(m.node_count() == 61u * 76u);   // 4636
  CHECK(m.node_count() == 4636u);
  CHECK(m.element_count() == 9000u);
  CHECK(m.boundary_edges.size() == 2u * (60 + 75));

  const auto tiny = build_rect_mesh(1.0, 1.0, 1, 1);
  CHECK(tiny.node_count() == 4u);
  CHECK(tiny.element_count() == 2u);
  CHECK(tiny.boundary_edges.size() == 4u);
}

TEST_CASE("element areas are positive and tile the rectangle") {
  const auto m = build_rect_mesh(20.0, 25.0, 24, 30);
  double sum = 0;
  for (std::size_t e = 0; e < m.element_count(); ++e) {
    const double a = m.signed_area(e);
    REQUIRE(a > 0.0);
    sum += a;
  }
  CHECK_THAT(sum, Catch::Matchers::WithinRel(500.0, 1e-12));
}

TEST_CASE("orientation and area tiling hold for random mesh sizes") {
  Rng rng(7001);
  for (int trial = 0; trial < 20; ++trial) {
    const auto nx = std::uint32_t(1 + rng.uniform_index(40));
    const auto ny = std::uint32_t(1 + rng.uniform_index(40));
    const double w = rng.uniform(5.0, 40.0);
    const double h = rng.uniform(5.0, 40.0);
    const auto m = build_rect_mesh(w, h, nx, ny);
    REQUIRE(m.element_count() == 2u * nx * ny);
    double sum = 0;
    for (std::size_t e = 0; e < m.element_count(); ++e) {
      REQUIRE(m.signed_area(e) > 0.0);
      sum += m.signed_area(e);
    }
    REQUIRE_THAT(sum, Catch::Matchers::WithinRel(w * h, 1e-10));
  }
}

TEST_CASE("boundary forms closed CCW loops with labeled segments") {
  const auto m = build_rect_mesh(20.0, 25.0, 7, 5);
  // walking edge-to-edge must return to the start after visiting all edges
  std::map<std::uint32_t, std::uint32_t> next;
  for (const auto& be : m.boundary_edges) {
    REQUIRE(next.count(be.a) == 0);
    next[be.a] = be.b;
  }
  std::uint32_t cur = m.boundary_edges[0].a;
  for (std::size_t i = 0; i < m.boundary_edges.size(); ++i) cur = next.at(cur);
  CHECK(cur == m.boundary_edges[0].a);

  // every boundary node touches exactly two boundary edges
  std::map<std::uint32_t, int> degree;
  for (const auto& be : m.boundary_edges) {
    degree[be.a]++;
    degree[be.b]++;
  }
  for (const auto& [node, d] : degree) CHECK(d == 2);

  CHECK(m.segment_labels ==
        std::vector<std::string>{"bottom", "right", "top", "left"});
  std::map<std::uint16_t, int> per_label;
  for (const auto& be : m.boundary_edges) per_label[be.label]++;
  CHECK(per_label[0] == 7);  // bottom
  CHECK(per_label[1] == 5);  // right
  CHECK(per_label[2] == 7);  // top
  CHECK(per_label[3] == 5);  // left

  // labeled edges lie on the correct side
  for (const auto& be : m.boundary_edges) {
    const auto& pa = m.nodes[be.a];
    const auto& pb = m.nodes[be.b];
    switch (be.label) {
      case 0: CHECK(pa[1] == 0.0); CHECK(pb[1] == 0.0); break;
      case 1: CHECK(pa[0] == 20.0); CHECK(pb[0] == 20.0); break;
      case 2: CHECK(pa[1] == 25.0); CHECK(pb[1] == 25.0); break;
      case 3: CHECK(pa[0] == 0.0); CHECK(pb[0] == 0.0); break;
      default: FAIL("unknown label");
    }
  }
}

TEST_CASE("each boundary edge is owned by exactly one element") {
  const auto m = build_rect_mesh(10.0, 10.0, 4, 6);
  for (const auto& be : m.boundary_edges) {
    const auto& t = m.elements[be.element];
    int hits = 0;
    for (int k = 0; k < 3; ++k) {
      const std::uint32_t a = t[k], b = t[(k + 1) % 3];
      if ((a == be.a && b == be.b) || (a == be.b && b == be.a)) ++hits;
    }
    CHECK(hits == 1);
    // owning element must see the edge in CCW order (outward boundary)
    bool ccw = false;
    for (int k = 0; k < 3; ++k)
      if (t[k] == be.a && t[(k + 1) % 3] == be.b) ccw = true;
    CHECK(ccw);
  }
}

TEST_CASE("neighbors are mutual and boundary edges have none") {
  const auto m = build_rect_mesh(12.0, 9.0, 5, 4);
  const auto& nb = m.neighbors();
  int boundary_slots = 0;
  for (std::size_t e = 0; e < m.element_count(); ++e) {
    for (int k = 0; k < 3; ++k) {
      const std::int32_t n = nb[e][k];
      if (n < 0) {
        ++boundary_slots;
        continue;
      }
      bool mutual = false;
      for (int j = 0; j < 3; ++j)
        if (nb[n][j] == std::int32_t(e)) mutual = true;
      CHECK(mutual);
    }
  }
  CHECK(boundary_slots == int(m.boundary_edges.size()));
}

TEST_CASE("structured locate agrees with brute-force oracle") {
  const auto m = build_rect_mesh(20.0, 25.0, 9, 11);
  Rng rng(42);
  for (int i = 0; i < 500; ++i) {
    const double x = rng.uniform(0.0, 20.0);
    const double y = rng.uniform(0.0, 25.0);
    const auto fast = m.locate(x, y);
    const auto slow = brute_locate(m, x, y);
    REQUIRE(fast >= 0);
    if (fast != slow) {
      // ties on the diagonal: both elements must contain the point
      const auto l = m.barycentric(std::size_t(fast), x, y);
      REQUIRE(l[0] >= -1e-9);
      REQUIRE(l[1] >= -1e-9);
      REQUIRE(l[2] >= -1e-9);
    }
  }
  CHECK(m.locate(-1.0, 5.0) == -1);
  CHECK(m.locate(5.0, 25.5) == -1);
}

TEST_CASE("unique edge set has the right cardinality") {
  // edges of an nx x ny split-quad grid: horizontal + vertical + diagonal
  const std::uint32_t nx = 6, ny = 4;
  const auto m = build_rect_mesh(6.0, 4.0, nx, ny);
  const auto edges = m.unique_edges();
  const std::size_t expect =
      std::size_t(nx) * (ny + 1) + std::size_t(ny) * (nx + 1) + nx * ny;
  CHECK(edges.size() == expect);
  for (const auto& e : edges) {
    REQUIRE(e.a < e.b);
    REQUIRE(e.length > 0.0);
  }
}

TEST_CASE("grid embed reproduces constants and linear fields") {
  const auto m = build_rect_mesh(20.0, 25.0, 10, 12);
  const auto grid = PixelGrid::covering(m, 24, 24);
  GridMapper map(m, grid);

  VectorXd ones = VectorXd::Ones(m.node_count());
  const VectorXd img1 = map.embed(ones);
  for (Eigen::Index p = 0; p < img1.size(); ++p)
    REQUIRE_THAT(img1[p], Catch::Matchers::WithinAbs(1.0, 1e-12));

  // linear f(x, y) = 2x - 3y + 1 is reproduced exactly by P1 interpolation
  VectorXd lin(m.node_count());
  for (std::size_t i = 0; i < m.node_count(); ++i)
    lin[i] = 2.0 * m.nodes[i][0] - 3.0 * m.nodes[i][1] + 1.0;
  const VectorXd img2 = map.embed(lin);
  for (std::uint32_t r = 0; r < grid.rows; ++r)
    for (std::uint32_t c = 0; c < grid.cols; ++c)
      REQUIRE_THAT(img2[std::size_t(r) * grid.cols + c],
                   Catch::Matchers::WithinAbs(
                       2.0 * grid.cx(c) - 3.0 * grid.cy(r) + 1.0, 1e-10));
}

TEST_CASE("grid extract reproduces constants and linear images") {
  const auto m = build_rect_mesh(20.0, 25.0, 10, 12);
  const auto grid = PixelGrid::covering(m, 40, 40);
  GridMapper map(m, grid);

  VectorXd img = VectorXd::Ones(grid.size());
  const VectorXd f1 = map.extract(img);
  for (Eigen::Index i = 0; i < f1.size(); ++i)
    REQUIRE_THAT(f1[i], Catch::Matchers::WithinAbs(1.0, 1e-12));

  // linear images are reproduced exactly wherever the 4-pixel stencil is not
  // clamped; interior nodes satisfy this
  for (std::uint32_t r = 0; r < grid.rows; ++r)
    for (std::uint32_t c = 0; c < grid.cols; ++c)
      img[std::size_t(r) * grid.cols + c] = 0.5 * grid.cx(c) + 1.5 * grid.cy(r);
  const VectorXd f2 = map.extract(img);
  for (std::size_t i = 0; i < m.node_count(); ++i) {
    const double x = m.nodes[i][0], y = m.nodes[i][1];
    if (x < grid.cx(0) || x > grid.cx(grid.cols - 1) || y < grid.cy(0) ||
        y > grid.cy(grid.rows - 1))
      continue;
    REQUIRE_THAT(f2[i],
                 Catch::Matchers::WithinAbs(0.5 * x + 1.5 * y, 1e-10));
  }
}

TEST_CASE("embed and extract adjoints satisfy the inner-product identity") {
  const auto m = build_rect_mesh(15.0, 10.0, 8, 6);
  const auto grid = PixelGrid::covering(m, 16, 20);
  GridMapper map(m, grid);
  Rng rng(99);
  for (int trial = 0; trial < 5; ++trial) {
    VectorXd f(m.node_count()), gi(grid.size());
    for (Eigen::Index i = 0; i < f.size(); ++i) f[i] = rng.gauss();
    for (Eigen::Index i = 0; i < gi.size(); ++i) gi[i] = rng.gauss();
    // <E f, g> == <f, E^T g>
    const double lhs = map.embed(f).dot(gi);
    const double rhs = f.dot(map.embed_adjoint(gi));
    REQUIRE_THAT(lhs, Catch::Matchers::WithinRel(rhs, 1e-12));
    // <X g, f> == <g, X^T f>
    const double lhs2 = map.extract(gi).dot(f);
    const double rhs2 = gi.dot(map.extract_adjoint(f));
    REQUIRE_THAT(lhs2, Catch::Matchers::WithinRel(rhs2, 1e-12));
  }
}

TEST_CASE("mesh container round-trips bit-exactly") {
  const auto m = build_rect_mesh(20.0, 25.0, 12, 15);
  const std::string path = "test_mesh_roundtrip.qpm";
  m.save(path);
  const auto m2 = TriMesh::load(path);
  std::remove(path.c_str());

  REQUIRE(m2.node_count() == m.node_count());
  REQUIRE(m2.element_count() == m.element_count());
  REQUIRE(m2.boundary_edges.size() == m.boundary_edges.size());
  CHECK(m2.nx == m.nx);
  CHECK(m2.ny == m.ny);
  CHECK(m2.segment_labels == m.segment_labels);
  for (std::size_t i = 0; i < m.node_count(); ++i) {
    CHECK(m2.nodes[i][0] == m.nodes[i][0]);
    CHECK(m2.nodes[i][1] == m.nodes[i][1]);
  }
  for (std::size_t e = 0; e < m.element_count(); ++e)
    CHECK(m2.elements[e] == m.elements[e]);
  for (std::size_t i = 0; i < m.boundary_edges.size(); ++i) {
    CHECK(m2.boundary_edges[i].a == m.boundary_edges[i].a);
    CHECK(m2.boundary_edges[i].b == m.boundary_edges[i].b);
    CHECK(m2.boundary_edges[i].label == m.boundary_edges[i].label);
  }
}

TEST_CASE("invalid mesh construction is rejected") {
  CHECK_THROWS_AS(build_rect_mesh(-1.0, 5.0, 3, 3), std::invalid_argument);
  CHECK_THROWS_AS(build_rect_mesh(5.0, 5.0, 0, 3), std::invalid_argument);

  TriMesh bad;
  bad.width = 1.0;
  bad.height = 1.0;
  bad.nodes = {{0, 0}, {1, 0}, {0, 1}};
  bad.elements = {{0, 2, 1}};  // clockwise
  CHECK_THROWS_AS(bad.finalize(), std::invalid_argument);
}
