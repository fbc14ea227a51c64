#pragma once

#include "knnproxy/align.hpp"
#include "knnproxy/binary_io.hpp"
#include "knnproxy/config.hpp"
#include "knnproxy/core.hpp"
#include "knnproxy/datastore.hpp"
#include "knnproxy/detect.hpp"
#include "knnproxy/error.hpp"
#include "knnproxy/eval.hpp"
#include "knnproxy/feature_file.hpp"
#include "knnproxy/http_provider.hpp"
#include "knnproxy/index.hpp"
#include "knnproxy/lm.hpp"
#include "knnproxy/metrics.hpp"
#include "knnproxy/parallel.hpp"
#include "knnproxy/router.hpp"
#include "knnproxy/synth.hpp"
#include "knnproxy/text_io.hpp"
#include "knnproxy/toy_lm.hpp"
