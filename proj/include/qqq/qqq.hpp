#pragma once

// Umbrella header for the W4A8 quantization toolkit.

#include "qqq/binary16.hpp"
#include "qqq/checkpoint.hpp"
#include "qqq/error.hpp"
#include "qqq/gemm.hpp"
#include "qqq/gptq.hpp"
#include "qqq/matrix.hpp"
#include "qqq/pipeline.hpp"
#include "qqq/quantizer.hpp"
#include "qqq/selftest.hpp"
#include "qqq/smoothing.hpp"
#include "qqq/toy_model.hpp"
