#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "simflow/ad/adam.hpp"
#include "simflow/ad/network.hpp"

namespace simflow::ad {

using json = nlohmann::json;

inline std::string to_string(layer_kind k) {
    switch (k) {
    case layer_kind::dense: return "dense";
    case layer_kind::residual_block: return "residual_block";
    case layer_kind::conv_block: return "conv_block";
    case layer_kind::glu_time_conditioning: return "glu_time_conditioning";
    }
    return "?";
}

inline std::string to_string(activation a) {
    switch (a) {
    case activation::none: return "none";
    case activation::elu: return "elu";
    case activation::silu: return "silu";
    }
    return "?";
}

inline layer_kind parse_layer_kind(const std::string& s) {
    if (s == "dense") return layer_kind::dense;
    if (s == "residual_block") return layer_kind::residual_block;
    if (s == "conv_block") return layer_kind::conv_block;
    if (s == "glu_time_conditioning") return layer_kind::glu_time_conditioning;
    throw std::invalid_argument("unknown layer kind '" + s + "'");
}

inline activation parse_activation(const std::string& s) {
    if (s == "none") return activation::none;
    if (s == "elu") return activation::elu;
    if (s == "silu") return activation::silu;
    throw std::invalid_argument("unknown activation '" + s + "'");
}

inline json spec_to_json(const network_spec& s) {
    auto layers = [](const std::vector<layer_spec>& ls) {
        json arr = json::array();
        for (const auto& l : ls)
            arr.push_back({{"kind", to_string(l.kind)},
                           {"in", l.in},
                           {"out", l.out},
                           {"act", to_string(l.act)},
                           {"time_conditioned", l.time_conditioned},
                           {"stride", l.stride},
                           {"groups", l.groups}});
        return arr;
    };
    return {{"input_dim", s.input_dim},   {"output_dim", s.output_dim}, {"time_embed_dim", s.time_embed_dim},
            {"image", {s.image_h, s.image_w, s.image_c}},
            {"encoder", layers(s.encoder)}, {"layers", layers(s.layers)}, {"zero_init_output", s.zero_init_output}};
}

inline network_spec spec_from_json(const json& j) {
    auto layers = [](const json& arr) {
        std::vector<layer_spec> out;
        for (const auto& l : arr) {
            layer_spec s;
            s.kind = parse_layer_kind(l.at("kind").get<std::string>());
            s.in = l.at("in").get<std::size_t>();
            s.out = l.at("out").get<std::size_t>();
            s.act = parse_activation(l.value("act", std::string("elu")));
            s.time_conditioned = l.value("time_conditioned", false);
            s.stride = l.value("stride", std::size_t{2});
            s.groups = l.value("groups", std::size_t{4});
            out.push_back(s);
        }
        return out;
    };
    network_spec s;
    s.input_dim = j.at("input_dim").get<std::size_t>();
    s.output_dim = j.at("output_dim").get<std::size_t>();
    s.time_embed_dim = j.value("time_embed_dim", std::size_t{0});
    if (j.contains("image")) {
        const auto& im = j.at("image");
        s.image_h = im.at(0).get<std::size_t>();
        s.image_w = im.at(1).get<std::size_t>();
        s.image_c = im.at(2).get<std::size_t>();
    }
    if (j.contains("encoder")) s.encoder = layers(j.at("encoder"));
    s.layers = layers(j.at("layers"));
    s.zero_init_output = j.value("zero_init_output", false);
    return s;
}

inline void write_f32_le(std::ostream& os, const std::vector<float>& v) {
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
    } else {
        for (float f : v) {
            auto u = std::bit_cast<std::uint32_t>(f);
            u = __builtin_bswap32(u);
            os.write(reinterpret_cast<const char*>(&u), 4);
        }
    }
}

inline std::vector<float> read_f32_le(std::istream& is, std::size_t n) {
    std::vector<float> v(n);
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (static_cast<std::size_t>(is.gcount()) != n * sizeof(float))
        throw std::runtime_error("truncated binary payload: expected " + std::to_string(n) + " floats");
    if constexpr (std::endian::native != std::endian::little) {
        for (auto& f : v) f = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<std::uint32_t>(f)));
    }
    return v;
}

inline std::string hex64(std::uint64_t h) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << h;
    return os.str();
}

struct checkpoint {
    static constexpr int format_version = 1;

    model<float> net;
    std::uint64_t seed = 0;
    std::string base_hash;  // control nets: checksum of the base flow they were trained against
    json meta = json::object();
    adam_state<float> optimizer;  // step 0 and empty moments when absent

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw std::runtime_error("cannot write checkpoint " + path);
        const bool with_opt = optimizer.step > 0 && optimizer.m.size() == net.params().size();
        os << "simflow-checkpoint " << format_version << "\n";
        os << "spec " << spec_to_json(net.spec()).dump() << "\n";
        os << "param_count " << net.parameter_count() << "\n";
        os << "seed " << seed << "\n";
        os << "checksum " << hex64(net.checksum()) << "\n";
        os << "base_hash " << (base_hash.empty() ? "-" : base_hash) << "\n";
        os << "meta " << meta.dump() << "\n";
        os << "adam_step " << (with_opt ? optimizer.step : 0) << "\n";
        os << "end\n";
        write_f32_le(os, net.flat_values());
        if (with_opt) {
            std::vector<float> m, v;
            for (std::size_t i = 0; i < optimizer.m.size(); ++i) {
                m.insert(m.end(), optimizer.m[i].begin(), optimizer.m[i].end());
                v.insert(v.end(), optimizer.v[i].begin(), optimizer.v[i].end());
            }
            write_f32_le(os, m);
            write_f32_le(os, v);
        }
        if (!os) throw std::runtime_error("failed writing checkpoint " + path);
    }

    static checkpoint load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw std::runtime_error("cannot open checkpoint " + path);
        std::string line;
        std::getline(is, line);
        if (line.rfind("simflow-checkpoint ", 0) != 0) throw std::runtime_error(path + ": not a simflow checkpoint");
        if (std::stoi(line.substr(19)) != format_version)
            throw std::runtime_error(path + ": unsupported checkpoint version " + line.substr(19));
        checkpoint ck;
        network_spec spec;
        std::size_t count = 0;
        std::uint64_t adam_step = 0;
        std::string checksum;
        while (std::getline(is, line) && line != "end") {
            const auto sp = line.find(' ');
            const std::string key = line.substr(0, sp);
            const std::string val = sp == std::string::npos ? "" : line.substr(sp + 1);
            if (key == "spec") spec = spec_from_json(json::parse(val));
            else if (key == "param_count") count = std::stoull(val);
            else if (key == "seed") ck.seed = std::stoull(val);
            else if (key == "checksum") checksum = val;
            else if (key == "base_hash") ck.base_hash = val == "-" ? "" : val;
            else if (key == "meta") ck.meta = json::parse(val);
            else if (key == "adam_step") adam_step = std::stoull(val);
        }
        if (line != "end") throw std::runtime_error(path + ": header not terminated");
        ck.net = model<float>::from_values(spec, read_f32_le(is, count));
        if (!checksum.empty() && hex64(ck.net.checksum()) != checksum)
            throw std::runtime_error(path + ": parameter checksum mismatch");
        if (adam_step > 0) {
            ck.optimizer.reset(ck.net.params());
            ck.optimizer.step = adam_step;
            auto m = read_f32_le(is, count);
            auto v = read_f32_le(is, count);
            std::size_t off = 0;
            for (std::size_t i = 0; i < ck.optimizer.m.size(); ++i) {
                const auto n = ck.optimizer.m[i].size();
                std::copy_n(m.begin() + off, n, ck.optimizer.m[i].begin());
                std::copy_n(v.begin() + off, n, ck.optimizer.v[i].begin());
                off += n;
            }
        }
        return ck;
    }
};

} // namespace simflow::ad
