#pragma once

#include "attnscope/analysis.hpp"
#include "attnscope/archive.hpp"
#include "attnscope/attribution.hpp"
#include "attnscope/autodiff.hpp"
#include "attnscope/dataset.hpp"
#include "attnscope/error.hpp"
#include "attnscope/model.hpp"
#include "attnscope/svg.hpp"
#include "attnscope/tensor.hpp"
