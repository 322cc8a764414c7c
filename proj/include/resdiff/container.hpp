#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "resdiff/core.hpp"
#include "resdiff/field.hpp"

namespace resdiff {

/// On-disk layout: "RSDF" | u16 version | u32 header length | header JSON |
/// payload of named float32 little-endian arrays, row-major, channels
/// outermost. The array directory in the header carries byte offsets into the
/// payload; the arrays tile it exactly, in directory order.
inline constexpr std::uint16_t container_version = 1;

struct NamedArray {
    std::string name;
    std::vector<int> shape;
    std::vector<float> values;

    long long count() const {
        long long n = 1;
        for (int d : shape) n *= d;
        return n;
    }
};

struct Container {
    std::vector<NamedArray> arrays;
    nlohmann::json meta = nlohmann::json::object();

    const NamedArray& array(const std::string& name) const {
        for (const NamedArray& a : arrays)
            if (a.name == name) return a;
        throw error(errc::format, "container has no array named " + name);
    }
    bool has(const std::string& name) const {
        for (const NamedArray& a : arrays)
            if (a.name == name) return true;
        return false;
    }
};

namespace detail {

inline void put_u16(std::string& s, std::uint16_t v) {
    s.push_back(char(v & 0xff));
    s.push_back(char(v >> 8));
}
inline void put_u32(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}

}  // namespace detail

/// Serialize to the exact byte sequence (the file is this string).
inline std::string encode_container(const Container& c) {
    nlohmann::json header = c.meta;
    header["dtype"] = "f32le";
    nlohmann::json dir = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const NamedArray& a : c.arrays) {
        RSD_REQUIRE(!a.name.empty(), parameter, "container array needs a name");
        RSD_REQUIRE(a.count() == (long long)a.values.size(), dimension,
                    "array '" + a.name + "' shape does not match its value count");
        for (std::size_t i = 0; i < a.values.size(); ++i)
            RSD_REQUIRE(std::isfinite(a.values[i]), data,
                        "non-finite value in array '" + a.name + "' at index " +
                            std::to_string(i));
        dir.push_back({{"name", a.name}, {"offset", offset}, {"shape", a.shape}});
        offset += std::uint64_t(a.values.size()) * 4;
    }
    header["arrays"] = std::move(dir);
    const std::string hj = header.dump();
    RSD_REQUIRE(hj.size() < 0xffffffffull, format, "container header too large");

    std::string out;
    out.reserve(10 + hj.size() + offset);
    out += "RSDF";
    detail::put_u16(out, container_version);
    detail::put_u32(out, std::uint32_t(hj.size()));
    out += hj;
    for (const NamedArray& a : c.arrays) {
        std::size_t pos = out.size();
        out.resize(pos + a.values.size() * 4);
        std::memcpy(out.data() + pos, a.values.data(), a.values.size() * 4);
    }
    return out;
}

inline Container decode_container(const std::string& bytes) {
    RSD_REQUIRE(bytes.size() >= 10, format,
                "container truncated at offset " + std::to_string(bytes.size()) +
                    ": 10-byte preamble missing");
    RSD_REQUIRE(bytes.compare(0, 4, "RSDF") == 0, format, "bad magic at offset 0");
    std::uint16_t version = std::uint8_t(bytes[4]) | (std::uint16_t(std::uint8_t(bytes[5])) << 8);
    RSD_REQUIRE(version == container_version, format,
                "unsupported container version " + std::to_string(version) + " at offset 4");
    std::uint32_t hlen = 0;
    for (int i = 0; i < 4; ++i) hlen |= std::uint32_t(std::uint8_t(bytes[6 + i])) << (8 * i);
    RSD_REQUIRE(bytes.size() >= 10 + std::size_t(hlen), format,
                "container truncated at offset " + std::to_string(bytes.size()) + ": header runs to " +
                    std::to_string(10 + std::size_t(hlen)));

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(10, hlen));
    } catch (const std::exception& e) {
        throw error(errc::format, std::string("container header is not valid JSON: ") + e.what());
    }
    RSD_REQUIRE(header.is_object() && header.value("dtype", "") == "f32le", format,
                "container header lacks the f32le dtype tag");
    RSD_REQUIRE(header.contains("arrays") && header["arrays"].is_array(), format,
                "container header lacks an array directory");

    const std::size_t payload_base = 10 + hlen;
    const std::size_t payload_size = bytes.size() - payload_base;
    Container c;
    std::uint64_t cursor = 0;
    for (const auto& ent : header["arrays"]) {
        NamedArray a;
        a.name = ent.at("name").get<std::string>();
        std::uint64_t off = ent.at("offset").get<std::uint64_t>();
        a.shape = ent.at("shape").get<std::vector<int>>();
        long long n = a.count();
        RSD_REQUIRE(n >= 0, format, "array '" + a.name + "' has a negative shape");
        RSD_REQUIRE(off == cursor, format,
                    "array '" + a.name + "' at offset " + std::to_string(off) +
                        (off < cursor ? " overlaps the previous array ending at "
                                      : " leaves a gap after the previous array ending at ") +
                        std::to_string(cursor));
        RSD_REQUIRE(off + std::uint64_t(n) * 4 <= payload_size, format,
                    "payload truncated at offset " + std::to_string(payload_size) + ": array '" +
                        a.name + "' needs bytes [" + std::to_string(off) + ", " +
                        std::to_string(off + std::uint64_t(n) * 4) + ")");
        a.values.resize(std::size_t(n));
        std::memcpy(a.values.data(), bytes.data() + payload_base + off, std::size_t(n) * 4);
        cursor = off + std::uint64_t(n) * 4;
        c.arrays.push_back(std::move(a));
    }
    RSD_REQUIRE(cursor == payload_size, format,
                "payload not tiled exactly: directory ends at offset " + std::to_string(cursor) +
                    " but payload has " + std::to_string(payload_size) + " bytes");
    header.erase("arrays");
    header.erase("dtype");
    c.meta = std::move(header);
    return c;
}

inline void write_container(const std::string& path, const Container& c) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    RSD_REQUIRE(f.good(), io, "cannot open " + path + " for writing");
    const std::string bytes = encode_container(c);
    f.write(bytes.data(), std::streamsize(bytes.size()));
    f.flush();
    RSD_REQUIRE(f.good(), io, "short write to " + path);
}

inline Container read_container(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    RSD_REQUIRE(f.good(), io, "cannot open " + path + " for reading");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_container(bytes);
}

/// Field <-> array adapters. Channel specs ride in the container meta under
/// ["fields"][name] so the Field round-trips with its layout.
inline void append_field(Container& c, const std::string& name, const Field& f) {
    NamedArray a;
    a.name = name;
    a.shape = {f.nchan(), f.height(), f.width()};
    a.values.resize(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) a.values[i] = float(f.data()[i]);
    c.arrays.push_back(std::move(a));

    nlohmann::json chans = nlohmann::json::array();
    for (const ChannelSpec& s : f.channels())
        chans.push_back({{"name", s.name},
                         {"units", s.units},
                         {"role", int(s.role)},
                         {"norm_mean", s.norm_mean},
                         {"norm_std", s.norm_std}});
    c.meta["fields"][name] = {{"channels", std::move(chans)}, {"spacing", f.spacing()}};
}

inline Field extract_field(const Container& c, const std::string& name) {
    const NamedArray& a = c.array(name);
    RSD_REQUIRE(a.shape.size() == 3, format, "array '" + name + "' is not a channel stack");
    RSD_REQUIRE(c.meta.contains("fields") && c.meta["fields"].contains(name), format,
                "container meta lacks channel specs for field " + name);
    const nlohmann::json& fm = c.meta["fields"][name];
    std::vector<ChannelSpec> specs;
    for (const auto& ch : fm.at("channels"))
        specs.push_back({ch.at("name").get<std::string>(), ch.at("units").get<std::string>(),
                         ChannelRole(ch.at("role").get<int>()), ch.value("norm_mean", 0.0),
                         ch.value("norm_std", 1.0)});
    RSD_REQUIRE(int(specs.size()) == a.shape[0], format,
                "channel spec count does not match array shape for field " + name);
    Field f(std::move(specs), a.shape[1], a.shape[2], fm.value("spacing", 1.0));
    for (std::size_t i = 0; i < f.size(); ++i) f.data()[i] = double(a.values[i]);
    return f;
}

}  // namespace resdiff
