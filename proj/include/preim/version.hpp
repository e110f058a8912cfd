#pragma once

#define PREIM_VERSION_MAJOR 0
#define PREIM_VERSION_MINOR 1
#define PREIM_VERSION_PATCH 0
#define PREIM_VERSION "0.1.0"
