#pragma once

#include "fastgp/bench.hpp"
#include "fastgp/dense.hpp"
#include "fastgp/hodlr.hpp"
#include "fastgp/inducing.hpp"
#include "fastgp/kernel.hpp"
#include "fastgp/structured.hpp"
#include "fastgp/trainer.hpp"
#include "fastgp/types.hpp"
