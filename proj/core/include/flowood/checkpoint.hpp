#pragma once

#include "flowood/bijections.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace flowood {

inline constexpr std::uint8_t kModelKindGlow = 0;
inline constexpr std::uint8_t kModelKindWaveletFlow = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Little-endian binary container:
//   magic "NFCK", version u32, model_kind u8,
//   config blob (u64 length + UTF-8 JSON text),
//   then tensor records until EOF:
//     name length u16, name bytes, rank u8, dims u64 each, f64 payload.
// The JSON blob carries the model/train config echo plus resume state (RNG
// state, step counters, actnorm flags). Round trips are bit-exact.
struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::uint8_t model_kind = kModelKindGlow;
    std::string config_json;
    std::vector<Param> tensors; // values only; requires_grad is not persisted

    // nullptr when absent
    const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// Copies matching tensors from ck into dst by name. Every dst name must be
// present with an identical shape; extra checkpoint tensors are ignored so
// model and optimizer state can be restored separately.
void restore_tensors(const Checkpoint& ck, std::vector<Param>& dst);

} // namespace flowood
