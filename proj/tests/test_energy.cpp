#include <cmath>
#include <vector>

#include <doctest.h>

#include "esr/energy.hpp"
#include "esr/rng.hpp"
#include "oracles.hpp"

using esr::Temperature;

TEST_CASE("temperature rejects nonpositive and non-finite values") {
  CHECK_THROWS_AS(Temperature(0.0), std::invalid_argument);
  CHECK_THROWS_AS(Temperature(-1.0), std::invalid_argument);
  CHECK_THROWS_AS(Temperature(std::nan("")), std::invalid_argument);
  CHECK(Temperature(0.001).value() == 0.001);
}

TEST_CASE("energy of a pair negates the selected logit") {
  const std::vector<double> a{2.0, -1.0};
  CHECK(esr::energy_of_pair(a, 0) == -2.0);
  const std::vector<double> zeros{0.0, 0.0, 0.0};
  CHECK(esr::energy_of_pair(zeros, 2) == 0.0);
  CHECK_THROWS_AS(esr::energy_of_pair(a, 2), std::out_of_range);

  esr::Rng rng(11);
  std::vector<double> logits(10);
  for (double& v : logits) v = 20.0 * rng.normal();
  for (std::size_t k = 0; k < logits.size(); ++k) {
    CHECK(esr::energy_of_pair(logits, k) ==
          static_cast<double>(-static_cast<long double>(logits[k])));
  }
}

TEST_CASE("logsumexp matches the extended-precision oracle") {
  const std::vector<double> single{3.25};
  CHECK(esr::stable_logsumexp(single) == 3.25);

  for (std::size_t c : {2, 5, 10}) {
    const std::vector<double> zeros(c, 0.0);
    CHECK(esr::stable_logsumexp(zeros) ==
          doctest::Approx(std::log(static_cast<double>(c))).epsilon(1e-14));
  }

  const std::vector<double> huge{10000.0, 10000.0};
  const double r = esr::stable_logsumexp(huge);
  CHECK(std::isfinite(r));
  CHECK(r == doctest::Approx(10000.0 + std::log(2.0)).epsilon(1e-14));

  CHECK_THROWS_AS(esr::stable_logsumexp(std::vector<double>{}), std::invalid_argument);

  esr::Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(1 + rng.below(32));
    for (double& x : v) x = 50.0 * (2.0 * rng.uniform() - 1.0);
    const long double expect = oracle::logsumexp(v);
    CHECK(esr::stable_logsumexp(v) ==
          doctest::Approx(static_cast<double>(expect)).epsilon(1e-9));
  }

  // Stays finite far beyond exp's overflow range.
  std::vector<double> extreme{1e6, -1e6, 999999.5};
  CHECK(std::isfinite(esr::stable_logsumexp(extreme)));
}

TEST_CASE("free energy follows -T logsumexp(logits / T)") {
  const std::vector<double> zeros(10, 0.0);
  CHECK(esr::free_energy(zeros, Temperature(1.0)) ==
        doctest::Approx(-std::log(10.0)).epsilon(1e-14));

  for (double t : {0.001, 0.5, 1.0, 7.0}) {
    const std::vector<double> one{4.5};
    CHECK(esr::free_energy(one, Temperature(t)) == doctest::Approx(-4.5).epsilon(1e-12));
  }

  esr::Rng rng(23);
  for (double t : {0.01, 0.001, 0.25, 1.0, 3.0}) {
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> v(20);
      for (double& x : v) x = 10.0 * rng.normal();
      const long double expect = oracle::free_energy(v, static_cast<long double>(t));
      CHECK(esr::free_energy(v, Temperature(t)) ==
            doctest::Approx(static_cast<double>(expect)).epsilon(1e-9));
    }
  }
}

TEST_CASE("confidence is the exact negation of free energy") {
  esr::Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(1 + rng.below(12));
    for (double& x : v) x = 30.0 * rng.normal();
    for (double t : {0.001, 0.1, 1.0}) {
      const Temperature temp(t);
      CHECK(esr::confidence_score(v, temp) == -esr::free_energy(v, temp));
    }
  }
}

TEST_CASE("confidence approaches the max logit as T shrinks") {
  const std::vector<double> v{3.0, 1.0, 0.0};
  CHECK(esr::confidence_score(v, Temperature(0.001)) == doctest::Approx(3.0).epsilon(1e-6));
  const std::vector<double> zeros(10, 0.0);
  CHECK(esr::confidence_score(zeros, Temperature(1.0)) ==
        doctest::Approx(std::log(10.0)).epsilon(1e-14));
}

TEST_CASE("confidence is bounded by max logit and max plus T log C") {
  esr::Rng rng(37);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(2 + rng.below(8));
    for (double& x : v) x = 15.0 * rng.normal();
    const double top = *std::max_element(v.begin(), v.end());
    for (double t : {0.001, 0.3, 1.0, 5.0}) {
      const double h = esr::confidence_score(v, Temperature(t));
      CHECK(h >= top - 1e-9);
      CHECK(h <= top + t * std::log(static_cast<double>(v.size())) + 1e-9);
    }
  }
}

TEST_CASE("free energy shifts down by a constant added to every logit") {
  esr::Rng rng(41);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(3 + rng.below(6));
    for (double& x : v) x = 5.0 * rng.normal();
    const double c = 10.0 * rng.normal();
    std::vector<double> shifted = v;
    for (double& x : shifted) x += c;
    for (double t : {0.01, 1.0, 2.0}) {
      const Temperature temp(t);
      CHECK(esr::free_energy(shifted, temp) ==
            doctest::Approx(esr::free_energy(v, temp) - c).epsilon(1e-10));
      CHECK(esr::confidence_score(shifted, temp) ==
            doctest::Approx(esr::confidence_score(v, temp) + c).epsilon(1e-10));
    }
  }
}

TEST_CASE("gibbs probabilities form the tempered softmax") {
  const std::vector<double> zeros(4, 0.0);
  for (double p : esr::gibbs_probabilities(zeros, Temperature(1.0))) {
    CHECK(p == doctest::Approx(0.25).epsilon(1e-14));
  }
  const std::vector<double> constant(7, -3.5);
  for (double t : {0.01, 1.0, 4.0}) {
    for (double p : esr::gibbs_probabilities(constant, Temperature(t))) {
      CHECK(p == doctest::Approx(1.0 / 7.0).epsilon(1e-14));
    }
  }

  const std::vector<double> v{1.0, 2.0, 3.0};
  const auto p = esr::gibbs_probabilities(v, Temperature(1.0));
  const auto expect = oracle::gibbs(v, 1.0L);
  for (std::size_t i = 0; i < p.size(); ++i) {
    CHECK(p[i] == doctest::Approx(static_cast<double>(expect[i])).epsilon(1e-12));
  }

  esr::Rng rng(43);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> logits(2 + rng.below(10));
    for (double& x : logits) x = 8.0 * rng.normal();
    for (double t : {0.001, 0.37, 1.0}) {
      const auto probs = esr::gibbs_probabilities(logits, Temperature(t));
      double sum = 0.0;
      for (double q : probs) {
        // Tiny T with spread logits legitimately underflows losers to exactly 0.
        CHECK(q >= 0.0);
        CHECK(q <= 1.0);
        sum += q;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));

      // Dividing the logits by T first and reading at T=1 is the same thing.
      std::vector<double> scaled = logits;
      for (double& x : scaled) x /= t;
      const auto rescaled = esr::gibbs_probabilities(scaled, Temperature(1.0));
      for (std::size_t i = 0; i < probs.size(); ++i) {
        CHECK(probs[i] == rescaled[i]);
      }
    }
  }
}
