#pragma once

#include "usseg/tensor.hpp"
#include "usseg/autodiff.hpp"
#include "usseg/grad_check.hpp"
#include "usseg/raster.hpp"
#include "usseg/losses.hpp"
#include "usseg/metrics.hpp"
#include "usseg/patches.hpp"
#include "usseg/blocks.hpp"
#include "usseg/attention.hpp"
#include "usseg/config.hpp"
#include "usseg/unet.hpp"
#include "usseg/net_check.hpp"
#include "usseg/inference.hpp"
#include "usseg/optim.hpp"
#include "usseg/phantom.hpp"
#include "usseg/trainer.hpp"
