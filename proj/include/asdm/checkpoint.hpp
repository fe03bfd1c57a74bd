#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "asdm/unet.hpp"

namespace asdm {

// ---------------------------------------------------------------------------
// Checkpoint container. Self-describing binary, bit-exact round trips.
//
//   magic   "ASDM1"                       5 bytes
//   version u32                           currently 1
//   spec    u64 length + JSON document    architecture, UTF-8
//   count   u64                           number of tensors
//   per tensor, in model enumeration order:
//     name       u32 length + bytes
//     dtype      u8   0 = float64 (the only tag so far)
//     frozen     u8   0 | 1
//     provenance u8   0 fresh, 1 teacher, 2 student
//     ndim       u32, then i64 dims
//     payload    numel * 8 bytes, IEEE-754 doubles, little-endian
//
// All integers are little-endian. Loads are strict: every parameter the spec
// enumerates must appear exactly once with the right shape.
// ---------------------------------------------------------------------------

constexpr char kCheckpointMagic[5] = {'A', 'S', 'D', 'M', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_bytes(std::string& out, const void* p, std::size_t n) {
    out.append(static_cast<const char*>(p), n);
}
inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    put_u64(out, v);
}

// bounds-checked cursor over a loaded file; errors carry the offset
class ByteReader {
public:
    ByteReader(const std::string& buf, const std::string& path) : buf_(buf), path_(path) {}

    std::size_t offset() const { return off_; }

    const char* take(std::size_t n, const char* what) {
        if (off_ + n > buf_.size())
            throw IoError(msg(path_, ": truncated reading ", what, " at offset ", off_, ": expected ", n,
                              " bytes, file has ", buf_.size() - off_, " left"));
        const char* p = buf_.data() + off_;
        off_ += n;
        return p;
    }
    std::uint32_t u32(const char* what) {
        const unsigned char* p = reinterpret_cast<const unsigned char*>(take(4, what));
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
        return v;
    }
    std::uint64_t u64(const char* what) {
        const unsigned char* p = reinterpret_cast<const unsigned char*>(take(8, what));
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
        return v;
    }
    double f64(const char* what) {
        std::uint64_t v = u64(what);
        double d;
        std::memcpy(&d, &v, 8);
        return d;
    }
    void expect_end() {
        if (off_ != buf_.size())
            throw IoError(msg(path_, ": ", buf_.size() - off_, " trailing bytes after offset ", off_));
    }

private:
    const std::string& buf_;
    std::string path_;
    std::size_t off_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const UNetModel& m) {
    std::string out;
    detail::put_bytes(out, kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put_u32(out, kCheckpointVersion);
    std::string spec_doc = to_json(m.spec).dump();
    detail::put_u64(out, spec_doc.size());
    detail::put_bytes(out, spec_doc.data(), spec_doc.size());
    detail::put_u64(out, m.order.size());
    for (const std::string& name : m.order) {
        const Param& p = m.param(name);
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        detail::put_bytes(out, name.data(), name.size());
        out.push_back(0);  // dtype tag: float64
        out.push_back(p.frozen ? 1 : 0);
        out.push_back(static_cast<char>(p.prov));
        const Tensor& t = p.tensor();
        detail::put_u32(out, static_cast<std::uint32_t>(t.ndim()));
        for (std::size_t d = 0; d < t.ndim(); ++d)
            detail::put_u64(out, static_cast<std::uint64_t>(t.dim(d)));
        for (double v : t.data) detail::put_f64(out, v);
    }
    return out;
}

inline void save_checkpoint(const UNetModel& m, const std::string& path) {
    std::string bytes = serialize_checkpoint(m);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError(msg("cannot open ", path, " for writing"));
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError(msg("write failed for ", path));
}

inline UNetModel deserialize_checkpoint(const std::string& bytes, const std::string& path = "<memory>") {
    detail::ByteReader r(bytes, path);
    const char* magic = r.take(sizeof(kCheckpointMagic), "magic");
    if (std::memcmp(magic, kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
        throw IoError(msg(path, ": bad magic, not a checkpoint file"));
    std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion)
        throw IoError(msg(path, ": unsupported format version ", version, ", this build reads version ",
                          kCheckpointVersion));

    std::uint64_t spec_len = r.u64("spec length");
    std::string spec_doc(r.take(spec_len, "spec document"), spec_len);
    UNetSpec spec;
    try {
        spec = spec_from_json(Json::parse(spec_doc));  // resolves + validates
    } catch (const Json::exception& e) {
        throw IoError(msg(path, ": malformed spec document: ", e.what()));
    }

    UNetModel m;
    m.spec = spec;
    std::map<std::string, ParamInfo> expected;
    for (const ParamInfo& info : enumerate_params(m.spec)) {
        m.order.push_back(info.name);
        expected.emplace(info.name, info);
    }

    std::uint64_t count = r.u64("tensor count");
    if (count != expected.size())
        throw IoError(msg(path, ": spec enumerates ", expected.size(), " tensors, file holds ", count));
    for (std::uint64_t i = 0; i < count; ++i) {
        std::uint32_t name_len = r.u32("tensor name length");
        std::string name(r.take(name_len, "tensor name"), name_len);
        auto it = expected.find(name);
        if (it == expected.end()) throw IoError(msg(path, ": tensor ", name, " not in the spec enumeration"));
        if (m.params.count(name)) throw IoError(msg(path, ": duplicate tensor ", name));

        unsigned char dtype = static_cast<unsigned char>(*r.take(1, "dtype tag"));
        if (dtype != 0) throw IoError(msg(path, ": tensor ", name, ": unknown dtype tag ", int(dtype)));
        unsigned char frozen = static_cast<unsigned char>(*r.take(1, "freeze flag"));
        if (frozen > 1) throw IoError(msg(path, ": tensor ", name, ": bad freeze flag ", int(frozen)));
        unsigned char prov = static_cast<unsigned char>(*r.take(1, "provenance tag"));
        if (prov > 2) throw IoError(msg(path, ": tensor ", name, ": bad provenance tag ", int(prov)));

        std::uint32_t ndim = r.u32("rank");
        Shape shape;
        for (std::uint32_t d = 0; d < ndim; ++d)
            shape.push_back(static_cast<std::int64_t>(r.u64("dimension")));
        if (!(shape == it->second.shape))
            throw IoError(msg(path, ": tensor ", name, ": shape ", shape_str(shape), " does not match spec ",
                              shape_str(it->second.shape)));

        Tensor t(shape);
        for (std::int64_t k = 0; k < t.numel(); ++k) t.data[k] = r.f64("tensor payload");

        Param p;
        p.info = it->second;
        p.frozen = frozen != 0;
        p.prov = static_cast<Provenance>(prov);
        p.var = make_var(std::move(t), !p.frozen);
        m.params.emplace(name, std::move(p));
    }
    r.expect_end();
    return m;
}

inline UNetModel load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError(msg("cannot open checkpoint ", path));
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes, path);
}

}  // namespace asdm
