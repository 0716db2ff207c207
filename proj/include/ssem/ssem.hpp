#pragma once

#include "ssem/activation.hpp"
#include "ssem/analysis.hpp"
#include "ssem/compression.hpp"
#include "ssem/dsp.hpp"
#include "ssem/engine.hpp"
#include "ssem/fft.hpp"
#include "ssem/loudness.hpp"
#include "ssem/model.hpp"
#include "ssem/model_io.hpp"
#include "ssem/quant.hpp"
#include "ssem/sparse.hpp"
#include "ssem/toy_model.hpp"
#include "ssem/wav.hpp"
