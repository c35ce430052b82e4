#include <doctest.h>

#include <cmath>

#include "im/analyzer.hpp"
#include "im/model.hpp"

using namespace im;
using namespace im::analysis;

TEST_CASE("count_params: closed form equals literal enumeration") {
  for (const char* name : {"toy", "T-no-globalmixer"}) {
    std::string detail;
    CHECK(verify_against_enumeration(zoo::preset(name), &detail));
    INFO(name << ": " << detail);
  }
}

TEST_CASE("count_params: an injected mismatch is detected") {
  zoo::ModelConfig cfg = zoo::preset("toy");
  const int64_t closed = count_params(cfg).total_params();
  zoo::Model m = zoo::Model::build(cfg, 1);
  // fixture injects one stray parameter tensor into the enumeration
  const int64_t tampered = m.parameter_count() + 1;
  CHECK(closed == m.parameter_count());
  CHECK(closed != tampered);
}

TEST_CASE("count_params: T lands on the published total") {
  const int64_t p = count_params(zoo::preset("T")).total_params();
  CHECK(std::abs(p / 1e6 - 25.4) / 25.4 <= 0.03);
}

TEST_CASE("count_macs: T at 224 lands on the published total") {
  const int64_t m = count_macs(zoo::preset("T"), 224).total_macs();
  CHECK(std::abs(m / 1e9 - 4.0) / 4.0 <= 0.10);
}

TEST_CASE("count_macs: params are resolution-independent, conv body scales x4") {
  zoo::ModelConfig cfg = zoo::preset("T");
  CostReport r224 = count_macs(cfg, 224);
  CostReport r448 = count_macs(cfg, 448);
  CHECK(r224.total_params() == r448.total_params());
  CHECK(r448.conv_macs_body() == 4 * r224.conv_macs_body());
  CHECK(count_params(cfg).total_params() == r224.total_params());
}

TEST_CASE("count_macs: resolution must match the stem divisor") {
  CHECK_THROWS_AS(count_macs(zoo::preset("T"), 225), Error);
  CHECK_THROWS_AS(count_macs(zoo::preset("T"), 0), Error);
  CHECK_NOTHROW(count_macs(zoo::preset("toy"), 32));
}

TEST_CASE("ablation directions: GlobalMixer adds cost, the bottleneck saves it") {
  CostReport t = count_macs(zoo::preset("T"), 224);
  CostReport nogm = count_macs(zoo::preset("T-no-globalmixer"), 224);
  CostReport plain = count_macs(zoo::preset("T-plain-ss2d"), 224);
  CHECK(nogm.total_params() < t.total_params());
  CHECK(nogm.total_macs() < t.total_macs());
  CHECK(t.total_macs() < plain.total_macs());
  CHECK(t.total_params() < plain.total_params());
}

TEST_CASE("report rendering: text and json carry totals and the calibration note") {
  CostReport r = count_macs(zoo::preset("T"), 224);
  const std::string text = r.text();
  CHECK(text.find("state_dim=16") != std::string::npos);
  CHECK(text.find("total") != std::string::npos);
  const std::string js = r.json();
  CHECK(js.find("total_params") != std::string::npos);
  CHECK(js.find("\"kind\"") != std::string::npos);
}
