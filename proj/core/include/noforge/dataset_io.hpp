#pragma once

#include <string>
#include <vector>

#include "noforge/data.hpp"

namespace noforge {

// On-disk dataset container: a directory holding manifest.json plus one raw
// little-endian tensor file per field (t1/disp_* as f32, mask as u8, C-order,
// no header). The manifest carries the grid shape and per-sample metadata.

void save_dataset(const std::string& dir, const std::vector<SampleRecord>& records);

std::vector<SampleRecord> load_dataset(const std::string& dir);

// Raw tensor payload helpers shared with checkpoints and prediction output.
void write_raw_f32(const std::string& path, const Tensor& t);
Tensor read_raw_f32(const std::string& path, Shape shape);

} // namespace noforge
