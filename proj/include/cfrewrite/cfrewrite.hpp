#pragma once

// Umbrella header. remote_scorer.hpp and commands.hpp pull in cpp-httplib;
// include the narrower headers when that is not wanted.

#include "cfrewrite/core.hpp"
#include "cfrewrite/error.hpp"
#include "cfrewrite/metrics.hpp"
#include "cfrewrite/ngram.hpp"
#include "cfrewrite/remote_scorer.hpp"
#include "cfrewrite/sampler.hpp"
#include "cfrewrite/scorer.hpp"
#include "cfrewrite/commands.hpp"
