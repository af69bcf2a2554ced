#pragma once

#include "counterfort/attacks.hpp"
#include "counterfort/container.hpp"
#include "counterfort/data.hpp"
#include "counterfort/defenses.hpp"
#include "counterfort/diagnose.hpp"
#include "counterfort/error.hpp"
#include "counterfort/gradcheck.hpp"
#include "counterfort/harness.hpp"
#include "counterfort/layers.hpp"
#include "counterfort/models.hpp"
#include "counterfort/network.hpp"
#include "counterfort/parallel.hpp"
#include "counterfort/rng.hpp"
#include "counterfort/tensor.hpp"
#include "counterfort/training.hpp"
#include "counterfort/version.hpp"
