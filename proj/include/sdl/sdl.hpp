#pragma once

#include <sdl/base.hpp>
#include <sdl/classify.hpp>
#include <sdl/data.hpp>
#include <sdl/io.hpp>
#include <sdl/model.hpp>
#include <sdl/sparse_coding.hpp>
#include <sdl/training.hpp>
