#pragma once

#include "roictrl/gradcheck.hpp"

namespace roictrl::test {
using namespace roictrl::gradcheck;
}  // namespace roictrl::test
