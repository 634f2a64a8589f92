#pragma once

#include "flowood/image_io.hpp"
#include "flowood/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace flowood {

// In-memory image collection with quantized pixels (integers 0..255 stored
// as doubles). Items share one shape; ids are stable, deterministic labels.
struct Dataset {
    Shape item_shape; // {C,H,W}
    std::vector<Tensor> items;
    std::vector<std::string> ids;

    std::size_t size() const { return items.size(); }
};

// Recursively loads every .png/.ppm under root (lexicographic path order),
// converts to `channels`, center-crops and box-downsamples to extent.
// Undecodable or undersized files are recorded in `warnings` (when given)
// and skipped; an unreadable root or an empty result is an error.
Dataset load_image_directory(const std::string& root, std::int64_t extent, std::int64_t channels,
                             std::vector<std::string>* warnings = nullptr);

// Stacks items[indices] into one [B,C,H,W] batch.
Tensor dataset_batch(const Dataset& data, const std::vector<std::size_t>& indices);

} // namespace flowood
