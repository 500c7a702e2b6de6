#pragma once

#include "mixmfl/binary_io.hpp"
#include "mixmfl/config.hpp"
#include "mixmfl/error.hpp"
#include "mixmfl/experiment_config.hpp"
#include "mixmfl/federation.hpp"
#include "mixmfl/losses.hpp"
#include "mixmfl/metrics.hpp"
#include "mixmfl/modality.hpp"
#include "mixmfl/nets.hpp"
#include "mixmfl/optim.hpp"
#include "mixmfl/param_bundle.hpp"
#include "mixmfl/proto_memory.hpp"
#include "mixmfl/runner.hpp"
#include "mixmfl/synth_data.hpp"
#include "mixmfl/tensor.hpp"
