#pragma once

// c10 defines a CHECK macro of its own; doctest's must win.
#include <torch/torch.h>
#undef CHECK
#include <doctest.h>
