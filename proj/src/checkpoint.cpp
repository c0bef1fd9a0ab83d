#include "vicl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

#include "vicl/config.hpp"
#include "vicl/errors.hpp"

namespace vicl {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");
static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559,
              "checkpoint format assumes IEEE-754 binary32");

namespace {

constexpr char kMagic[4] = {'V', 'I', 'C', 'L'};

template <typename T>
void put(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T take(std::ifstream& in, const std::string& path) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw data_error("truncated checkpoint: " + path);
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("cannot write checkpoint: " + path);
    out.write(kMagic, 4);
    put<uint32_t>(out, ck.version);
    put<uint32_t>(out, (uint32_t)ck.tensors.size());
    for (const auto& e : ck.tensors.entries) {
        if (e.name.size() > 0xffff) throw contract_error("tensor name too long: " + e.name);
        put<uint16_t>(out, (uint16_t)e.name.size());
        out.write(e.name.data(), (std::streamsize)e.name.size());
        put<uint8_t>(out, e.frozen ? 1 : 0);
        put<uint8_t>(out, (uint8_t)e.value.shape.size());
        for (size_t d : e.value.shape) put<uint64_t>(out, (uint64_t)d);
        out.write(reinterpret_cast<const char*>(e.value.data.data()),
                  (std::streamsize)(e.value.data.size() * sizeof(float)));
    }
    put<uint32_t>(out, (uint32_t)ck.config_echo.size());
    out.write(ck.config_echo.data(), (std::streamsize)ck.config_echo.size());
    out.write(reinterpret_cast<const char*>(ck.rng_state.data()),
              (std::streamsize)ck.rng_state.size());
    put<uint64_t>(out, ck.step);
    if (!out) throw data_error("write failed for checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw data_error("bad checkpoint magic: " + path);
    Checkpoint ck;
    ck.version = take<uint32_t>(in, path);
    if (ck.version != 1)
        throw data_error("unsupported checkpoint version " + std::to_string(ck.version) + ": " +
                         path);
    const uint32_t count = take<uint32_t>(in, path);
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t name_len = take<uint16_t>(in, path);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const uint8_t frozen = take<uint8_t>(in, path);
        const uint8_t rank = take<uint8_t>(in, path);
        Shape shape(rank);
        size_t numel = 1;
        for (uint8_t d = 0; d < rank; ++d) {
            shape[d] = (size_t)take<uint64_t>(in, path);
            numel *= shape[d];
        }
        Tensor t(shape);
        in.read(reinterpret_cast<char*>(t.data.data()),
                (std::streamsize)(numel * sizeof(float)));
        if (!in) throw data_error("truncated checkpoint: " + path);
        ck.tensors.add(name, std::move(t), frozen != 0);
    }
    const uint32_t echo_len = take<uint32_t>(in, path);
    ck.config_echo.resize(echo_len);
    in.read(ck.config_echo.data(), echo_len);
    in.read(reinterpret_cast<char*>(ck.rng_state.data()), (std::streamsize)ck.rng_state.size());
    if (!in) throw data_error("truncated checkpoint: " + path);
    ck.step = take<uint64_t>(in, path);
    return ck;
}

Model model_from_checkpoint(const Checkpoint& ck) {
    if (ck.config_echo.empty()) throw data_error("checkpoint carries no config echo");
    const RunConfig rc = parse_run_config(ck.config_echo);
    Rng rng(0);  // every tensor is overwritten from the table
    Model m = Model::init(rc.model, rng);
    for (auto& e : m.params.entries) {
        if (!ck.tensors.has(e.name))
            throw data_error("checkpoint is missing tensor " + e.name);
        const auto& src = ck.tensors.at(e.name);
        if (src.value.shape != e.value.shape)
            throw data_error("checkpoint tensor " + e.name + " is " +
                             shape_str(src.value.shape) + ", model expects " +
                             shape_str(e.value.shape));
        e.value = src.value;
        e.frozen = src.frozen;
    }
    return m;
}

std::vector<std::string> freeze_check(const Checkpoint& before, const Checkpoint& after) {
    std::vector<std::string> violated;
    for (const auto& e : after.tensors.entries) {
        if (!e.frozen || is_optimizer_param(e.name)) continue;
        if (!before.tensors.has(e.name)) {
            violated.push_back(e.name);
            continue;
        }
        const auto& b = before.tensors.at(e.name).value;
        if (b.shape != e.value.shape ||
            std::memcmp(b.data.data(), e.value.data.data(), b.data.size() * sizeof(float)) != 0)
            violated.push_back(e.name);
    }
    return violated;
}

}  // namespace vicl
