#pragma once

#include "dynens/runtime/alloc.hpp"
#include "dynens/runtime/channel.hpp"
#include "dynens/runtime/ensemble.hpp"
#include "dynens/runtime/messages.hpp"
#include "dynens/runtime/worker.hpp"
