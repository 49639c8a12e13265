#pragma once

#include "snm/autograd.hpp"
#include "snm/checkpoint.hpp"
#include "snm/config.hpp"
#include "snm/dataio.hpp"
#include "snm/eval.hpp"
#include "snm/grad_check.hpp"
#include "snm/model.hpp"
#include "snm/random.hpp"
#include "snm/report_io.hpp"
#include "snm/tensor.hpp"
#include "snm/training.hpp"
