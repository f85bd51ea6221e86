#pragma once

#include "zapnet/autograd.hpp"
#include "zapnet/checkpoint.hpp"
#include "zapnet/cli.hpp"
#include "zapnet/config.hpp"
#include "zapnet/data.hpp"
#include "zapnet/errors.hpp"
#include "zapnet/gradcheck.hpp"
#include "zapnet/instrumentation.hpp"
#include "zapnet/layers.hpp"
#include "zapnet/metrics.hpp"
#include "zapnet/model.hpp"
#include "zapnet/optim.hpp"
#include "zapnet/protocols.hpp"
#include "zapnet/random.hpp"
#include "zapnet/tensor.hpp"
#include "zapnet/training.hpp"
