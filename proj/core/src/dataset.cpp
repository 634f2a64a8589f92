#include "flowood/dataset.hpp"

#include "flowood/errors.hpp"

#include <algorithm>
#include <filesystem>

namespace flowood {

namespace fs = std::filesystem;

Dataset load_image_directory(const std::string& root, std::int64_t extent, std::int64_t channels,
                             std::vector<std::string>* warnings) {
    if (extent < 1) throw ValueError("dataset extent must be positive");
    std::error_code ec;
    if (!fs::is_directory(root, ec)) throw IoError("dataset directory not found: " + root);

    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file()) continue;
        std::string ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(),
                       [](unsigned char c) { return std::tolower(c); });
        if (ext == ".png" || ext == ".ppm") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());

    Dataset out;
    out.item_shape = {channels, extent, extent};
    for (const auto& path : files) {
        try {
            Image img = read_image(path.string());
            img = convert_channels(img, channels);
            img = fit_to_extent(img, extent);
            out.items.push_back(image_to_tensor(img));
            out.ids.push_back(fs::relative(path, root).generic_string());
        } catch (const std::exception& e) {
            if (warnings) warnings->push_back(path.string() + ": " + e.what());
        }
    }
    if (out.items.empty()) throw IoError("no usable images under " + root);
    return out;
}

Tensor dataset_batch(const Dataset& data, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw ValueError("dataset_batch needs at least one index");
    const Shape& s = data.item_shape;
    Tensor batch({static_cast<std::int64_t>(indices.size()), s[0], s[1], s[2]});
    auto dst = batch.data();
    const std::int64_t item_numel = shape_numel(s);
    for (std::size_t b = 0; b < indices.size(); ++b) {
        if (indices[b] >= data.items.size()) throw ValueError("dataset index out of range");
        auto src = data.items[indices[b]].data();
        std::copy(src.begin(), src.end(),
                  dst.begin() + static_cast<std::ptrdiff_t>(b) * item_numel);
    }
    return batch;
}

} // namespace flowood
