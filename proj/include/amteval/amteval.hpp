#pragma once

#include "amteval/analysis.hpp"
#include "amteval/grading.hpp"
#include "amteval/matching.hpp"
#include "amteval/metrics.hpp"
#include "amteval/midi.hpp"
#include "amteval/ruleset.hpp"
#include "amteval/stats.hpp"
