#pragma once

#include "hatrain/error.hpp"
#include "hatrain/rng.hpp"
#include "hatrain/hash.hpp"
#include "hatrain/kernels.hpp"
#include "hatrain/autodiff.hpp"
#include "hatrain/model.hpp"
#include "hatrain/data.hpp"
#include "hatrain/hessian.hpp"
#include "hatrain/trainer.hpp"
#include "hatrain/bitflip.hpp"
#include "hatrain/attack.hpp"
#include "hatrain/checksum.hpp"
#include "hatrain/analysis.hpp"
#include "hatrain/desk.hpp"
