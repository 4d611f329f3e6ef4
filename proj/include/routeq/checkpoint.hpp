#pragma once

#include <string>

#include "routeq/autodiff.hpp"

namespace routeq {

// Versioned binary container: parameters, optional Adam moments, and batch
// norm running statistics. Layout (all integers and doubles little-endian):
//
//   bytes 0..7   magic "RQCKPT01"
//   u32          section count
//   per section: u32 name length, name bytes, u64 entry count,
//                per entry: u32 name length, name bytes,
//                           u64 rows, u64 cols,
//                           rows*cols f64 values (column-major)
//   u64          Adam step count (0 when no moments are stored)
//
// Sections: "params", then optionally "adam_m"/"adam_v", then "stats"
// (entries "<layer>.mean" / "<layer>.var").
struct Checkpoint {
  ad::ParamStore params;
  ad::StatStore stats;
  ad::AdamState adam;
  bool has_adam = false;
};

void save_checkpoint(const std::string& path, const ad::ParamStore& params,
                     const ad::StatStore& stats, const ad::AdamState* adam = nullptr);

Checkpoint load_checkpoint(const std::string& path);

}  // namespace routeq
