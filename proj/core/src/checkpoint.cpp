#include "flowood/checkpoint.hpp"

#include "flowood/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace flowood {

namespace {

constexpr char kMagic[4] = {'N', 'F', 'C', 'K'};

void put_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void put_le(std::ostream& os, T value) {
    unsigned char buf[sizeof(T)];
    using U = std::conditional_t<sizeof(T) == 2, std::uint16_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>;
    U bits;
    std::memcpy(&bits, &value, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    put_bytes(os, buf, sizeof(T));
}

void put_f64(std::ostream& os, double d) { put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(d)); }

bool get_bytes(std::istream& is, void* p, std::size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    return static_cast<std::size_t>(is.gcount()) == n;
}

template <typename T>
T get_le(std::istream& is, const char* what) {
    unsigned char buf[sizeof(T)];
    if (!get_bytes(is, buf, sizeof(T))) throw IoError(std::string("checkpoint truncated reading ") + what);
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    if constexpr (sizeof(T) == 8) {
        T out;
        std::memcpy(&out, &bits, 8);
        return out;
    } else {
        return static_cast<T>(bits);
    }
}

} // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& p : tensors)
        if (p.name == name) return &p.tensor;
    return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);

    put_bytes(os, kMagic, 4);
    put_le<std::uint32_t>(os, ck.version);
    put_bytes(os, &ck.model_kind, 1);
    put_le<std::uint64_t>(os, ck.config_json.size());
    put_bytes(os, ck.config_json.data(), ck.config_json.size());

    for (const auto& p : ck.tensors) {
        if (p.name.empty() || p.name.size() > std::numeric_limits<std::uint16_t>::max())
            throw ValueError("checkpoint: tensor name empty or too long: " + p.name);
        put_le<std::uint16_t>(os, static_cast<std::uint16_t>(p.name.size()));
        put_bytes(os, p.name.data(), p.name.size());
        const Shape& shape = p.tensor.shape();
        const std::uint8_t rank = static_cast<std::uint8_t>(shape.size());
        put_bytes(os, &rank, 1);
        for (std::int64_t d : shape) put_le<std::uint64_t>(os, static_cast<std::uint64_t>(d));
        for (double v : p.tensor.data()) put_f64(os, v);
    }
    os.flush();
    if (!os) throw IoError("write failed for checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);

    char magic[4];
    if (!get_bytes(is, magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("not a checkpoint file (bad magic): " + path);

    Checkpoint ck;
    ck.version = get_le<std::uint32_t>(is, "version");
    if (ck.version > kCheckpointVersion)
        throw IoError("checkpoint version " + std::to_string(ck.version) + " is newer than supported");
    if (!get_bytes(is, &ck.model_kind, 1)) throw IoError("checkpoint truncated reading model kind");

    const std::uint64_t blob_len = get_le<std::uint64_t>(is, "config length");
    ck.config_json.resize(blob_len);
    if (blob_len > 0 && !get_bytes(is, ck.config_json.data(), blob_len))
        throw IoError("checkpoint truncated reading config blob");

    while (true) {
        unsigned char len_buf[2];
        is.read(reinterpret_cast<char*>(len_buf), 2);
        if (is.gcount() == 0 && is.eof()) break; // clean end
        if (is.gcount() != 2) throw IoError("checkpoint truncated reading tensor name length");
        const std::uint16_t name_len =
            static_cast<std::uint16_t>(len_buf[0] | (static_cast<std::uint16_t>(len_buf[1]) << 8));

        std::string name(name_len, '\0');
        if (!get_bytes(is, name.data(), name_len)) throw IoError("checkpoint truncated reading tensor name");

        std::uint8_t rank;
        if (!get_bytes(is, &rank, 1)) throw IoError("checkpoint truncated reading rank of " + name);
        Shape shape;
        for (std::uint8_t r = 0; r < rank; ++r)
            shape.push_back(static_cast<std::int64_t>(get_le<std::uint64_t>(is, "dims")));

        Tensor t(shape);
        for (auto& v : t.data()) v = get_le<double>(is, name.c_str());
        ck.tensors.push_back({std::move(name), std::move(t)});
    }
    return ck;
}

void restore_tensors(const Checkpoint& ck, std::vector<Param>& dst) {
    for (auto& p : dst) {
        const Tensor* src = ck.find(p.name);
        if (!src) throw IoError("checkpoint is missing tensor: " + p.name);
        if (src->shape() != p.tensor.shape())
            throw ShapeError("checkpoint tensor " + p.name + " has shape " + shape_str(src->shape()) +
                             ", expected " + shape_str(p.tensor.shape()));
        std::copy(src->data().begin(), src->data().end(), p.tensor.data().begin());
    }
}

} // namespace flowood
