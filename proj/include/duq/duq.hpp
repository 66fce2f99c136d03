#pragma once

#include "duq/artifact.hpp"
#include "duq/calibration.hpp"
#include "duq/data.hpp"
#include "duq/fusion.hpp"
#include "duq/nn.hpp"
#include "duq/posterior.hpp"
#include "duq/predict.hpp"
#include "duq/train.hpp"
