#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "doctest.h"
#include "posekit/error.hpp"
#include "posekit/proposals.hpp"
#include "posekit/rng.hpp"
#include "test_util.hpp"

using namespace posekit;

namespace {

HeatMapStack make_stack(int k, int h, int w, int s) {
  HeatMapStack m;
  m.k = k;
  m.h = h;
  m.w = w;
  m.s = s;
  m.v.assign(size_t(k) * h * w, 0.0);
  return m;
}

HeatMapStack random_stack(int k, int h, int w, int s, uint64_t seed) {
  HeatMapStack m = make_stack(k, h, w, s);
  Rng rng = make_rng(seed);
  std::uniform_real_distribution<double> d(0.0, 0.9);
  for (auto& v : m.v) v = d(rng);
  return m;
}

DepthImage flat_image(int w, int h, uint16_t depth) {
  DepthImage img(w, h);
  for (auto& v : img.depth) v = depth;
  return img;
}

}  // namespace

TEST_CASE("window 17 yields exactly 289 proposals per part") {
  const HeatMapStack maps = random_stack(2, 64, 64, 1, 3);
  const DepthImage img = flat_image(64, 64, 2000);
  const ProposalSet ps = extract_proposals(maps, img, 17);
  REQUIRE(ps.part_count() == 2);
  CHECK(ps.n == 289);
  for (const auto& list : ps.per_part) {
    CHECK(list.size() == 289);
    std::set<std::pair<double, double>> seen;
    for (const auto& p : list) seen.insert({p.x, p.y});
    CHECK(seen.size() == 289);  // no duplicate centers
    for (size_t i = 1; i < list.size(); ++i) CHECK(list[i - 1].score >= list[i].score);
  }
}

TEST_CASE("window 3 around an interior peak covers the 3x3 neighborhood") {
  HeatMapStack maps = make_stack(1, 64, 64, 1);
  maps.at(0, 40, 30) = 1.0;  // peak at map pixel (x=30, y=40)
  const DepthImage img = flat_image(64, 64, 1500);
  const ProposalSet ps = extract_proposals(maps, img, 3);
  REQUIRE(ps.n == 9);

  std::set<std::pair<int, int>> got;
  for (const auto& p : ps.per_part[0]) got.insert({int(p.x), int(p.y)});
  std::set<std::pair<int, int>> want;
  for (int y = 39; y <= 41; ++y)
    for (int x = 29; x <= 31; ++x) want.insert({x, y});
  CHECK(got == want);

  // the argmax is element 0 of the sorted list
  CHECK(ps.per_part[0][0].x == 30.0);
  CHECK(ps.per_part[0][0].y == 40.0);
  CHECK(ps.per_part[0][0].score == 1.0);
}

TEST_CASE("uniform map resolves ties to map pixel (0,0)") {
  HeatMapStack maps = make_stack(1, 32, 32, 1);
  for (auto& v : maps.v) v = 0.25;
  const DepthImage img = flat_image(32, 32, 1800);
  const ProposalSet ps = extract_proposals(maps, img, 3);

  // peak at the corner; the window shifts inside the map, so the cells are
  // {0,1,2} x {0,1,2} with no duplicates
  std::set<std::pair<int, int>> got;
  for (const auto& p : ps.per_part[0]) got.insert({int(p.x), int(p.y)});
  std::set<std::pair<int, int>> want;
  for (int y = 0; y <= 2; ++y)
    for (int x = 0; x <= 2; ++x) want.insert({x, y});
  CHECK(got == want);
  CHECK(ps.per_part[0][0].x == 0.0);
  CHECK(ps.per_part[0][0].y == 0.0);
}

TEST_CASE("corner peaks still produce a full window of distinct cells") {
  HeatMapStack maps = random_stack(1, 24, 24, 1, 7);
  maps.at(0, 23, 23) = 5.0;
  const DepthImage img = flat_image(24, 24, 2000);
  const ProposalSet ps = extract_proposals(maps, img, 5);
  CHECK(ps.n == 25);
  std::set<std::pair<int, int>> got;
  for (const auto& p : ps.per_part[0]) {
    CHECK(p.x >= 0);
    CHECK(p.x < 24);
    CHECK(p.y >= 0);
    CHECK(p.y < 24);
    got.insert({int(p.x), int(p.y)});
  }
  CHECK(got.size() == 25);
  CHECK(ps.per_part[0][0].score == 5.0);
}

TEST_CASE("proposal centers back-map into the heat map under the stride") {
  const HeatMapStack maps = random_stack(3, 16, 16, 2, 11);
  const DepthImage img = flat_image(32, 32, 2200);
  const ProposalSet ps = extract_proposals(maps, img, 7);
  for (const auto& list : ps.per_part)
    for (const auto& p : list) {
      const int mx = int(p.x) / maps.s;
      const int my = int(p.y) / maps.s;
      CHECK(mx >= 0);
      CHECK(mx < maps.w);
      CHECK(my >= 0);
      CHECK(my < maps.h);
      CHECK(p.score == maps.at(int(&list - ps.per_part.data()), my, mx));
    }
}

TEST_CASE("extraction is deterministic") {
  const HeatMapStack maps = random_stack(4, 20, 20, 2, 13);
  const DepthImage img = flat_image(40, 40, 900);
  const ProposalSet a = extract_proposals(maps, img, 5);
  const ProposalSet b = extract_proposals(maps, img, 5);
  REQUIRE(a.part_count() == b.part_count());
  for (int k = 0; k < a.part_count(); ++k)
    for (int i = 0; i < a.n; ++i) {
      CHECK(a.per_part[k][i].x == b.per_part[k][i].x);
      CHECK(a.per_part[k][i].y == b.per_part[k][i].y);
      CHECK(a.per_part[k][i].z == b.per_part[k][i].z);
      CHECK(a.per_part[k][i].score == b.per_part[k][i].score);
    }
}

TEST_CASE("default box size is 10 and scales with the torso") {
  const auto [w, h] = default_box_size();
  CHECK(w == 10);
  CHECK(h == 10);
  const auto [w2, h2] = default_box_size(2.0 * kReferenceTorsoPx);
  CHECK(w2 == 20);
  CHECK(h2 == 20);

  const HeatMapStack maps = random_stack(19, 16, 16, 1, 17);
  const DepthImage img = flat_image(16, 16, 1000);
  const ProposalSet ps = extract_proposals(maps, img, 3);
  for (const auto& list : ps.per_part)
    for (const auto& p : list) {
      CHECK(p.w == 10);
      CHECK(p.h == 10);
    }
}

TEST_CASE("proposal depth is the lower median of non-zero box pixels") {
  HeatMapStack maps = make_stack(1, 16, 16, 1);
  maps.at(0, 8, 8) = 1.0;
  DepthImage img = flat_image(16, 16, 0);
  // 10x10 box around (8,8) covers x,y in [3,12]; fill three distinct depths
  // plus holes, lower median of {1000 x40, 2000 x30, 3000 x20} (90 values) is
  // the 45th smallest = 2000
  int painted = 0;
  for (int y = 3; y <= 12; ++y)
    for (int x = 3; x <= 12; ++x) {
      if (painted < 40)
        img.at(x, y) = 1000;
      else if (painted < 70)
        img.at(x, y) = 2000;
      else if (painted < 90)
        img.at(x, y) = 3000;
      // remaining 10 pixels stay 0 (holes)
      ++painted;
    }
  const ProposalSet ps = extract_proposals(maps, img, 1);
  REQUIRE(ps.n == 1);
  CHECK(ps.per_part[0][0].z == 2000.0);
}

TEST_CASE("an all-NaN map is a numeric error") {
  HeatMapStack maps = make_stack(1, 8, 8, 1);
  for (auto& v : maps.v) v = std::nan("");
  const DepthImage img = flat_image(8, 8, 1000);
  CHECK_THROWS_AS((void)extract_proposals(maps, img, 3), NumericError);
}

TEST_CASE("invalid windows are contract errors") {
  const HeatMapStack maps = random_stack(1, 8, 8, 1, 19);
  const DepthImage img = flat_image(8, 8, 1000);
  CHECK_THROWS_AS((void)extract_proposals(maps, img, 4), ContractError);   // even
  CHECK_THROWS_AS((void)extract_proposals(maps, img, 9), ContractError);   // > map
  CHECK_THROWS_AS((void)extract_proposals(maps, img, -3), ContractError);  // negative
}

TEST_CASE("proposal dump writes k,x,y,w,h,z,score rows") {
  TempDir tmp("props");
  const HeatMapStack maps = random_stack(2, 12, 12, 1, 23);
  const DepthImage img = flat_image(12, 12, 1700);
  const ProposalSet ps = extract_proposals(maps, img, 3);
  const std::string path = tmp.file("props.csv");
  write_proposal_csv(ps, path);

  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  CHECK(line == "k,x,y,w,h,z,score");
  int rows = 0;
  while (std::getline(is, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 2 * 9);
}
