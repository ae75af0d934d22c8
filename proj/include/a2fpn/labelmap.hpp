#pragma once

#include <cstdint>
#include <cstddef>
#include <vector>

#include "a2fpn/error.hpp"

namespace a2fpn {

// Integer class-index map, B x H x W. Single images use batch = 1.
struct LabelMap {
    std::size_t batch = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::int32_t> values;

    LabelMap() = default;
    LabelMap(std::size_t b, std::size_t h, std::size_t w, std::int32_t fill = 0)
        : batch(b), height(h), width(w), values(b * h * w, fill) {}

    std::int32_t& at(std::size_t b, std::size_t i, std::size_t j) {
        return values[(b * height + i) * width + j];
    }
    std::int32_t at(std::size_t b, std::size_t i, std::size_t j) const {
        return values[(b * height + i) * width + j];
    }
    std::size_t numel() const { return values.size(); }

    bool operator==(const LabelMap& o) const {
        return batch == o.batch && height == o.height && width == o.width && values == o.values;
    }
};

// Concatenate single-image label maps into one batch.
inline LabelMap stack_labels(const std::vector<LabelMap>& items) {
    if (items.empty()) throw UsageError("stack_labels: no inputs");
    LabelMap out(0, items[0].height, items[0].width);
    for (const LabelMap& l : items) {
        if (l.height != out.height || l.width != out.width)
            throw ShapeError("stack_labels: extent mismatch");
        out.batch += l.batch;
        out.values.insert(out.values.end(), l.values.begin(), l.values.end());
    }
    return out;
}

}  // namespace a2fpn
