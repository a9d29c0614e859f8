#include "eddy/checkpoint.hpp"

#include <fstream>
#include <limits>
#include <stdexcept>

#include "eddy/binary_io.hpp"

namespace eddy {

namespace {

constexpr char kMagic[5] = "EDYW";
constexpr std::uint32_t kMaxNameLength = 4096;

}  // namespace

void write_tensors(std::ostream& out, const std::vector<NamedTensor<float>>& tensors) {
    io::write_magic(out, kMagic);
    io::write_le<std::uint16_t>(out, kCheckpointVersion);
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
        out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        const Shape s = t.value.shape();
        io::write_le<std::uint8_t>(out, 4);
        for (std::size_t d : {s.n, s.c, s.h, s.w}) io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        for (float v : t.value.values()) io::write_f32(out, v);
    }
    if (!out) throw std::runtime_error("checkpoint: write failed");
}

std::vector<NamedTensor<float>> read_tensors(std::istream& in) {
    io::expect_magic(in, kMagic);
    const auto version = io::read_le<std::uint16_t>(in, "checkpoint version");
    if (version != kCheckpointVersion) {
        throw io::FormatError("checkpoint: unsupported version " + std::to_string(version));
    }
    const auto count = io::read_le<std::uint32_t>(in, "tensor count");
    std::vector<NamedTensor<float>> tensors;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = io::read_le<std::uint32_t>(in, "name length");
        if (len > kMaxNameLength) throw io::FormatError("checkpoint: implausible name length " + std::to_string(len));
        std::string name(len, '\0');
        if (!in.read(name.data(), len)) throw io::FormatError("truncated file while reading tensor name");
        const auto ndim = io::read_le<std::uint8_t>(in, "ndim");
        if (ndim == 0 || ndim > 4) throw io::FormatError("checkpoint: unsupported ndim " + std::to_string(ndim));
        // Lower-rank tensors are right-aligned into (n, c, h, w).
        std::size_t dims[4] = {1, 1, 1, 1};
        for (std::size_t d = 4 - ndim; d < 4; ++d) dims[d] = io::read_le<std::uint32_t>(in, "dims");
        const Shape shape{dims[0], dims[1], dims[2], dims[3]};
        std::vector<float> data(shape.size());
        for (float& v : data) v = io::read_f32(in, "tensor payload");
        tensors.push_back({std::move(name), Tensor4<float>(shape, std::move(data))});
    }
    if (in.peek() != std::char_traits<char>::eof()) throw io::FormatError("checkpoint: trailing bytes");
    return tensors;
}

void save_checkpoint(const std::filesystem::path& path, const Network<float>& net) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
    write_tensors(out, net.state_tensors());
}

Network<float> load_checkpoint(const std::filesystem::path& path, const NetworkSpec& spec) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
    Network<float> net(spec);
    net.load_state_tensors(read_tensors(in));
    return net;
}

}  // namespace eddy
