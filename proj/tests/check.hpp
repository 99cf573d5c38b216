#pragma once

#include <cmath>

#include <doctest.h>

// Absolute-tolerance comparisons; doctest::Approx is relative only.
#define CHECK_NEAR(a, b, tol) CHECK_LE(std::abs((a) - (b)), (tol))
#define REQUIRE_NEAR(a, b, tol) REQUIRE_LE(std::abs((a) - (b)), (tol))
