#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "clickseg/encoding.hpp"
#include "clickseg/error.hpp"
#include "oracles.hpp"

using namespace clickseg;

namespace {

double max_abs_diff(const FloatStack& got, const std::vector<double>& want) {
  REQUIRE(got.data().size() == want.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < want.size(); ++i) worst = std::max(worst, std::abs(double(got.data()[i]) - want[i]));
  return worst;
}

std::vector<Click> random_clicks(int rows, int cols, int n_classes, int count, Rng& rng) {
  std::vector<Click> clicks;
  for (int i = 0; i < count; ++i) {
    clicks.push_back({static_cast<int>(rng() % rows), static_cast<int>(rng() % cols), static_cast<int>(rng() % n_classes)});
  }
  return clicks;
}

}  // namespace

TEST_CASE("encoding matches the brute-force oracle") {
  Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    const int rows = 1 + static_cast<int>(rng() % 64);
    const int cols = 1 + static_cast<int>(rng() % 64);
    const int n = 2 + static_cast<int>(rng() % 4);
    const auto clicks = random_clicks(rows, cols, n, static_cast<int>(rng() % 8), rng);
    for (auto mode : {EncodingMode::kBinary, EncodingMode::kDistance}) {
      for (auto layout : {ChannelLayout::kPerClass, ChannelLayout::kSingle}) {
        EncodingConfig cfg{mode, layout, 1 + static_cast<int>(rng() % 7), 4.0 + double(rng() % 60)};
        const auto got = encode(clicks, {rows, cols}, n, cfg);
        const auto want = oracle::encode(clicks, rows, cols, cfg.channel_count(n), mode == EncodingMode::kBinary,
                                         layout == ChannelLayout::kSingle, cfg.disk_radius, cfg.d_max);
        CHECK(max_abs_diff(got, want) < 1e-6);
      }
    }
  }
}

TEST_CASE("empty click list gives zeros") {
  for (auto layout : {ChannelLayout::kPerClass, ChannelLayout::kSingle}) {
    const auto s = encode({}, {7, 9}, 4, EncodingConfig{EncodingMode::kDistance, layout});
    CHECK(s.channels() == (layout == ChannelLayout::kPerClass ? 4 : 1));
    CHECK(std::all_of(s.data().begin(), s.data().end(), [](float v) { return v == 0.0F; }));
  }
}

TEST_CASE("single click disk and peak") {
  const std::vector<Click> one{{20, 31, 1}};
  const auto bin = encode(one, {48, 48}, 2, EncodingConfig{EncodingMode::kBinary, ChannelLayout::kPerClass, 5});
  for (int r = 0; r < 48; ++r) {
    for (int c = 0; c < 48; ++c) {
      const bool inside = (r - 20) * (r - 20) + (c - 31) * (c - 31) <= 25;
      CHECK(bin.at(1, r, c) == (inside ? 1.0F : 0.0F));
      CHECK(bin.at(0, r, c) == 0.0F);
    }
  }
  const auto dist = encode(one, {48, 48}, 2, EncodingConfig{});
  CHECK(dist.at(1, 20, 31) == 1.0F);
}

TEST_CASE("two same-class clicks combine by pointwise max") {
  const std::vector<Click> a{{10, 10, 0}};
  const std::vector<Click> b{{40, 50, 0}};
  const std::vector<Click> both{{10, 10, 0}, {40, 50, 0}};
  const EncodingConfig cfg{EncodingMode::kDistance, ChannelLayout::kPerClass, 5, 30.0};
  const auto ea = encode(a, {64, 64}, 1 + 1, cfg);
  const auto eb = encode(b, {64, 64}, 2, cfg);
  const auto eab = encode(both, {64, 64}, 2, cfg);
  for (std::size_t i = 0; i < eab.data().size(); ++i) CHECK(eab.data()[i] == std::max(ea.data()[i], eb.data()[i]));
}

TEST_CASE("encoding properties") {
  Rng rng(20);
  const EncodingConfig cfg{EncodingMode::kDistance, ChannelLayout::kPerClass, 3, 20.0};
  for (int trial = 0; trial < 30; ++trial) {
    auto clicks = random_clicks(40, 40, 3, 6, rng);
    const auto base = encode(clicks, {40, 40}, 3, cfg);

    auto shuffled = clicks;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    CHECK(encode(shuffled, {40, 40}, 3, cfg) == base);

    auto more = clicks;
    more.push_back(random_clicks(40, 40, 3, 1, rng)[0]);
    const auto grown = encode(more, {40, 40}, 3, cfg);
    for (std::size_t i = 0; i < base.data().size(); ++i) CHECK(grown.data()[i] >= base.data()[i]);

    // SINGLE == max over PER_CLASS channels
    EncodingConfig single = cfg;
    single.channels = ChannelLayout::kSingle;
    const auto s = encode(clicks, {40, 40}, 3, single);
    for (int r = 0; r < 40; ++r) {
      for (int c = 0; c < 40; ++c) {
        float m = 0.0F;
        for (int k = 0; k < 3; ++k) m = std::max(m, base.at(k, r, c));
        CHECK(s.at(0, r, c) == m);
      }
    }
  }
}

TEST_CASE("region encoding equals the full-frame slice") {
  Rng rng(30);
  const auto clicks = random_clicks(50, 70, 3, 10, rng);
  for (auto mode : {EncodingMode::kBinary, EncodingMode::kDistance}) {
    const EncodingConfig cfg{mode, ChannelLayout::kPerClass, 4, 25.0};
    const auto full = encode(clicks, {50, 70}, 3, cfg);
    const Region region{13, 29, 30, 33};
    const auto part = encode_region(clicks, {50, 70}, region, 3, cfg);
    for (int k = 0; k < 3; ++k) {
      for (int r = 0; r < region.rows; ++r) {
        for (int c = 0; c < region.cols; ++c) CHECK(part.at(k, r, c) == full.at(k, region.row + r, region.col + c));
      }
    }
  }
}

TEST_CASE("encoding errors") {
  const EncodingConfig per_class{};
  CHECK_THROWS_AS(encode(std::vector<Click>{{5, 0, 0}}, {5, 5}, 2, per_class), CoordinateError);
  CHECK_THROWS_AS(encode(std::vector<Click>{{0, -1, 0}}, {5, 5}, 2, per_class), CoordinateError);
  CHECK_THROWS_AS(encode(std::vector<Click>{{0, 0, kBorderLabel}}, {5, 5}, 2, per_class), LabelError);
  CHECK_THROWS_AS(encode(std::vector<Click>{{0, 0, 2}}, {5, 5}, 2, per_class), LabelError);
  EncodingConfig single{};
  single.channels = ChannelLayout::kSingle;
  CHECK_NOTHROW(encode(std::vector<Click>{{0, 0, kErrorLabel}}, {5, 5}, 2, single));
  EncodingConfig bad{};
  bad.d_max = 0.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("network input assembly") {
  Image img(4, 4, 3);
  for (std::size_t i = 0; i < img.data().size(); ++i) img.data()[i] = static_cast<std::uint8_t>(i * 5);
  const auto norm = Normalization::uniform(3);
  SUBCASE("shape and values") {
    const auto stack = encode(std::vector<Click>{{1, 2, 5}}, {4, 4}, 6, EncodingConfig{});
    const auto in = assemble_network_input(img, stack, norm);
    CHECK(in.channels() == 9);
    for (int ch = 0; ch < 3; ++ch) {
      for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) {
          CHECK(in.at(ch, r, c) == doctest::Approx((img.at(r, c, ch) / 255.0 - 0.5) / 0.25).epsilon(1e-6));
        }
      }
    }
    for (int k = 0; k < 6; ++k) {
      for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) CHECK(in.at(3 + k, r, c) == stack.at(k, r, c));
      }
    }
  }
  SUBCASE("channel follows the class id") {
    // A permuted schema changes which id a class carries; annotation mass
    // moves with it.
    const ClassSchema s1({{0, "x", {0, 0, 0}}, {1, "y", {1, 1, 1}}, {2, "z", {2, 2, 2}}});
    const ClassSchema s2({{0, "z", {2, 2, 2}}, {1, "x", {0, 0, 0}}, {2, "y", {1, 1, 1}}});
    auto id_of = [](const ClassSchema& s, const std::string& name) {
      for (const auto& c : s.classes()) {
        if (c.name == name) return c.id;
      }
      return -1;
    };
    const auto e1 = encode(std::vector<Click>{{2, 2, id_of(s1, "y")}}, {4, 4}, s1, EncodingConfig{});
    const auto e2 = encode(std::vector<Click>{{2, 2, id_of(s2, "y")}}, {4, 4}, s2, EncodingConfig{});
    const auto i1 = assemble_network_input(img, e1, norm);
    const auto i2 = assemble_network_input(img, e2, norm);
    CHECK(i1.at(3 + 1, 2, 2) == 1.0F);
    CHECK(i2.at(3 + 2, 2, 2) == 1.0F);
    CHECK(i2.at(3 + 1, 2, 2) == 0.0F);
  }
  SUBCASE("zero annotations leave image channels untouched") {
    const auto a = assemble_network_input(img, FloatStack(0, 4, 4), norm);
    const auto b = assemble_network_input(img, FloatStack(3, 4, 4), norm);
    for (int ch = 0; ch < 3; ++ch) {
      CHECK(std::equal(a.plane(ch).begin(), a.plane(ch).end(), b.plane(ch).begin()));
    }
  }
  SUBCASE("shape mismatch") { CHECK_THROWS_AS(assemble_network_input(img, FloatStack(2, 3, 4), norm), DimensionError); }
}
