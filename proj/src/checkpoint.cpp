#include "fairproto/checkpoint.hpp"

#include <fstream>

#include <fmt/format.h>

#include "binary_io.hpp"
#include "fairproto/error.hpp"
#include "fairproto/file_util.hpp"

namespace fairproto {

namespace {

template <typename M>
void put(detail::ByteWriter& w, const M& m) {
    w.f64_array({m.data(), static_cast<std::size_t>(m.size())});
}

template <typename M>
void get(detail::ByteReader& r, M& m, const char* what) {
    r.f64_array({m.data(), static_cast<std::size_t>(m.size())}, what);
}

void put_bn(detail::ByteWriter& w, const BatchNormState& bn) {
    put(w, bn.gamma);
    put(w, bn.beta);
    put(w, bn.running_mean);
    put(w, bn.running_var);
}

void get_bn(detail::ByteReader& r, BatchNormState& bn, Eigen::Index width) {
    bn = BatchNormState::fresh(width);
    get(r, bn.gamma, "bn gamma");
    get(r, bn.beta, "bn beta");
    get(r, bn.running_mean, "bn running_mean");
    get(r, bn.running_var, "bn running_var");
    if ((bn.running_var.array() < 0.0).any()) throw ValidationError("checkpoint: negative running variance");
}

}  // namespace

std::uint64_t save_checkpoint(const HeadParams& params, const AdamState* optimizer, std::ostream& sink) {
    params.check_finite();
    const auto dims = params.dims();
    detail::ByteWriter w(sink);
    w.raw(kHeadMagic.data(), kHeadMagic.size());
    w.u16(kCheckpointVersion);
    w.u32(dims.input);
    w.u32(dims.hidden);
    w.u32(dims.output);
    put(w, params.w1);
    put(w, params.b1);
    put_bn(w, params.bn1);
    put(w, params.w2);
    put(w, params.b2);
    put_bn(w, params.bn2);
    w.f64(params.verif_scale);
    w.f64(params.verif_bias);

    if (optimizer != nullptr) {
        if (optimizer->m.size() != optimizer->v.size()) throw ShapeError("checkpoint: Adam m/v sizes differ");
        w.raw(kOptimizerMagic.data(), kOptimizerMagic.size());
        w.u16(kCheckpointVersion);
        w.u64(optimizer->t);
        w.f64(optimizer->beta1);
        w.f64(optimizer->beta2);
        w.f64(optimizer->eps);
        w.u64(optimizer->m.size());
        w.f64_array(optimizer->m);
        w.f64_array(optimizer->v);
    }
    return w.bytes_written();
}

Checkpoint load_checkpoint(std::istream& source) {
    detail::ByteReader r(source);
    std::array<char, 4> magic{};
    r.raw(magic.data(), magic.size(), "magic");
    if (magic != kHeadMagic) throw FormatError("not a head checkpoint (bad magic bytes)");
    auto version = r.u16("version");
    if (version != kCheckpointVersion) throw FormatError(fmt::format("unsupported checkpoint version {}", version));

    HeadDims dims;
    dims.input = r.u32("input dim");
    dims.hidden = r.u32("hidden dim");
    dims.output = r.u32("output dim");
    if (dims.input == 0 || dims.hidden == 0 || dims.output == 0) {
        throw ValidationError("checkpoint: zero head dimension");
    }
    // Cap allocations before trusting the header: 2^28 doubles per matrix.
    constexpr std::uint64_t kMaxEntries = 1ULL << 28;
    if (static_cast<std::uint64_t>(dims.input) * dims.hidden > kMaxEntries ||
        static_cast<std::uint64_t>(dims.hidden) * dims.output > kMaxEntries) {
        throw FormatError("checkpoint: implausible head dimensions");
    }

    Checkpoint ck;
    auto& p = ck.params;
    p.w1.resize(dims.hidden, dims.input);
    p.b1.resize(dims.hidden);
    p.w2.resize(dims.output, dims.hidden);
    p.b2.resize(dims.output);
    get(r, p.w1, "w1");
    get(r, p.b1, "b1");
    get_bn(r, p.bn1, dims.hidden);
    get(r, p.w2, "w2");
    get(r, p.b2, "b2");
    get_bn(r, p.bn2, dims.output);
    p.verif_scale = r.f64("verif_scale");
    p.verif_bias = r.f64("verif_bias");
    p.check_finite();

    if (!r.at_end()) {
        r.raw(magic.data(), magic.size(), "optimizer magic");
        if (magic != kOptimizerMagic) throw FormatError("checkpoint: unknown trailing section");
        auto opt_version = r.u16("optimizer version");
        if (opt_version != kCheckpointVersion) {
            throw FormatError(fmt::format("unsupported optimizer section version {}", opt_version));
        }
        AdamState s;
        s.t = r.u64("adam t");
        s.beta1 = r.f64("adam beta1");
        s.beta2 = r.f64("adam beta2");
        s.eps = r.f64("adam eps");
        auto n = r.u64("adam size");
        std::size_t expected = 0;
        for (auto v : trainable_views(p)) expected += v.size();
        if (n != expected) {
            throw ValidationError(fmt::format("checkpoint: optimizer holds {} moments, head has {} parameters", n,
                                              expected));
        }
        s.m.resize(n);
        s.v.resize(n);
        r.f64_array(s.m, "adam m");
        r.f64_array(s.v, "adam v");
        if (!r.at_end()) throw FormatError("checkpoint: trailing bytes after optimizer section");
        ck.optimizer = std::move(s);
    }
    return ck;
}

std::uint64_t save_checkpoint_file(const HeadParams& params, const AdamState* optimizer,
                                   const std::filesystem::path& path) {
    std::uint64_t n = 0;
    write_file_atomic(path, [&](std::ostream& out) { n = save_checkpoint(params, optimizer, out); });
    return n;
}

Checkpoint load_checkpoint_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
    return load_checkpoint(in);
}

}  // namespace fairproto
