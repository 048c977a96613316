#pragma once

#include "gradflow/diagnostics.hpp"
#include "gradflow/errors.hpp"
#include "gradflow/flows.hpp"
#include "gradflow/harness.hpp"
#include "gradflow/integrator.hpp"
#include "gradflow/linalg.hpp"
#include "gradflow/network.hpp"
