#pragma once

#include "bwa/baselines.hpp"
#include "bwa/dataset.hpp"
#include "bwa/errors.hpp"
#include "bwa/evaluation.hpp"
#include "bwa/model.hpp"
#include "bwa/synthetic.hpp"
