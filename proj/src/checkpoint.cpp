#include "dfe/autoencoder.hpp"
#include "dfe/error.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dfe {

// Layout:
//   DFE-CHECKPOINT <version>
//   window <w_x> <w_y>
//   channels <c>
//   latent_dim <z>
//   encoder <count>            followed by <count> "layer" lines
//   decoder <count>            followed by <count> "layer" lines
//   layer <kind> <in> <out> <kernel> <stride> <padding>
//   meta <key> <value>         loss, sigma, epochs, final_loss, seed
//   tensor <name> <d0,d1,...> <byte offset into blob>
//   blob <byte count>\n<bytes>
// The blob holds every trainable parameter followed by every running
// statistic, as little-endian IEEE-754 float64.

namespace {

constexpr std::string_view kMagic = "DFE-CHECKPOINT";

std::string fmt_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

[[noreturn]] void corrupt(const std::string& what) { throw Error(ErrorCode::CorruptHeader, "checkpoint header: " + what); }

template <class T>
T parse_number(const std::string& token, const char* what) {
    T v{};
    const auto res = std::from_chars(token.data(), token.data() + token.size(), v);
    if (res.ec != std::errc() || res.ptr != token.data() + token.size()) corrupt(std::string("bad ") + what + " '" + token + "'");
    return v;
}

void put_le(std::string& out, double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
}

double get_le(const char* p) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[b])) << (8 * b);
    return std::bit_cast<double>(bits);
}

void write_layer(std::ostringstream& h, const LayerSpec& l) {
    h << "layer " << to_string(l.kind) << ' ' << l.in_channels << ' ' << l.out_channels << ' ' << l.kernel << ' '
      << l.stride << ' ' << l.padding << '\n';
}

std::string join_shape(const std::vector<int>& shape) {
    std::string s;
    for (std::size_t k = 0; k < shape.size(); ++k) {
        if (k) s += ',';
        s += std::to_string(shape[k]);
    }
    return s;
}

} // namespace

std::string serialize_checkpoint(const Autoencoder& model) {
    const ModelSpec& spec = model.spec();
    const Network& net = model.network();
    std::ostringstream h;
    h << kMagic << ' ' << kCheckpointVersion << '\n';
    h << "window " << spec.input_window.w_x << ' ' << spec.input_window.w_y << '\n';
    h << "channels " << spec.channels << '\n';
    h << "latent_dim " << spec.latent_dim << '\n';
    h << "encoder " << spec.encoder_layers.size() << '\n';
    for (const auto& l : spec.encoder_layers) write_layer(h, l);
    h << "decoder " << spec.decoder_layers.size() << '\n';
    for (const auto& l : spec.decoder_layers) write_layer(h, l);
    h << "meta loss " << model.metadata.loss << '\n';
    h << "meta sigma " << fmt_double(model.metadata.sigma) << '\n';
    h << "meta epochs " << model.metadata.epochs << '\n';
    h << "meta final_loss " << fmt_double(model.metadata.final_loss) << '\n';
    h << "meta seed " << model.metadata.seed << '\n';
    const std::size_t stats_base = net.parameter_count() * sizeof(double);
    for (const TensorSlot& s : net.slots()) {
        const std::size_t offset = (s.trainable ? 0 : stats_base) + s.offset * sizeof(double);
        h << "tensor " << s.name << ' ' << join_shape(s.shape) << ' ' << offset << '\n';
    }
    const std::size_t count = net.parameter_count() + net.statistics().size();
    h << "blob " << count * sizeof(double) << '\n';

    std::string out = h.str();
    out.reserve(out.size() + count * sizeof(double));
    for (double v : net.parameters()) put_le(out, v);
    for (double v : net.statistics()) put_le(out, v);
    return out;
}

Autoencoder deserialize_checkpoint(const std::string& bytes) {
    std::size_t pos = 0;
    auto next_line = [&]() -> std::string {
        const std::size_t nl = bytes.find('\n', pos);
        if (nl == std::string::npos) corrupt("unexpected end of header");
        std::string line = bytes.substr(pos, nl - pos);
        pos = nl + 1;
        return line;
    };
    auto tokens = [](const std::string& line) {
        std::istringstream in(line);
        std::vector<std::string> t;
        for (std::string s; in >> s;) t.push_back(s);
        return t;
    };

    if (bytes.compare(0, kMagic.size(), kMagic) != 0) corrupt("missing magic");
    auto t = tokens(next_line());
    if (t.size() != 2) corrupt("bad first line");
    const int version = parse_number<int>(t[1], "version");
    if (version != kCheckpointVersion) {
        throw Error(ErrorCode::VersionMismatch, "checkpoint format version " + std::to_string(version) +
                                                    ", this build reads version " + std::to_string(kCheckpointVersion));
    }

    ModelSpec spec;
    TrainingMetadata meta;
    struct Entry {
        std::string name;
        std::string shape;
        std::size_t offset;
    };
    std::vector<Entry> entries;
    std::size_t blob_size = 0;
    bool have_blob = false;
    auto read_layers = [&](std::size_t n, std::vector<LayerSpec>& out) {
        for (std::size_t k = 0; k < n; ++k) {
            const auto lt = tokens(next_line());
            if (lt.size() != 7 || lt[0] != "layer") corrupt("expected a layer line");
            LayerSpec l;
            try {
                l.kind = layer_kind_from_string(lt[1]);
            } catch (const Error&) {
                corrupt("unknown layer kind '" + lt[1] + "'");
            }
            l.in_channels = parse_number<int>(lt[2], "channels");
            l.out_channels = parse_number<int>(lt[3], "channels");
            l.kernel = parse_number<int>(lt[4], "kernel");
            l.stride = parse_number<int>(lt[5], "stride");
            l.padding = parse_number<int>(lt[6], "padding");
            out.push_back(l);
        }
    };
    while (!have_blob) {
        t = tokens(next_line());
        if (t.empty()) corrupt("empty header line");
        const std::string& key = t[0];
        if (key == "window" && t.size() == 3) {
            spec.input_window = {parse_number<int>(t[1], "window"), parse_number<int>(t[2], "window")};
        } else if (key == "channels" && t.size() == 2) {
            spec.channels = parse_number<int>(t[1], "channels");
        } else if (key == "latent_dim" && t.size() == 2) {
            spec.latent_dim = parse_number<int>(t[1], "latent_dim");
        } else if (key == "encoder" && t.size() == 2) {
            read_layers(parse_number<std::size_t>(t[1], "layer count"), spec.encoder_layers);
        } else if (key == "decoder" && t.size() == 2) {
            read_layers(parse_number<std::size_t>(t[1], "layer count"), spec.decoder_layers);
        } else if (key == "meta" && t.size() == 3) {
            if (t[1] == "loss") meta.loss = t[2];
            else if (t[1] == "sigma") meta.sigma = parse_number<double>(t[2], "sigma");
            else if (t[1] == "epochs") meta.epochs = parse_number<int>(t[2], "epochs");
            else if (t[1] == "final_loss") meta.final_loss = parse_number<double>(t[2], "final_loss");
            else if (t[1] == "seed") meta.seed = parse_number<std::uint64_t>(t[2], "seed");
            else corrupt("unknown meta key '" + t[1] + "'");
        } else if (key == "tensor" && t.size() == 4) {
            entries.push_back({t[1], t[2], parse_number<std::size_t>(t[3], "offset")});
        } else if (key == "blob" && t.size() == 2) {
            blob_size = parse_number<std::size_t>(t[1], "blob size");
            have_blob = true;
        } else {
            corrupt("unexpected line starting with '" + key + "'");
        }
    }

    Autoencoder model = [&] {
        try {
            return Autoencoder(spec);
        } catch (const Error& e) {
            corrupt(std::string("inconsistent model spec: ") + e.what());
        }
    }();
    model.metadata = meta;
    Network& net = model.network();
    const std::size_t count = net.parameter_count() + net.statistics().size();
    if (blob_size != count * sizeof(double)) {
        corrupt("blob size " + std::to_string(blob_size) + " does not match " + std::to_string(count) + " values");
    }
    const std::size_t stats_base = net.parameter_count() * sizeof(double);
    if (entries.size() != net.slots().size()) corrupt("tensor table does not match the architecture");
    for (std::size_t k = 0; k < entries.size(); ++k) {
        const TensorSlot& s = net.slots()[k];
        const std::size_t offset = (s.trainable ? 0 : stats_base) + s.offset * sizeof(double);
        if (entries[k].name != s.name || entries[k].shape != join_shape(s.shape) || entries[k].offset != offset) {
            corrupt("tensor '" + entries[k].name + "' does not match the architecture");
        }
    }
    if (bytes.size() - pos < blob_size) {
        throw Error(ErrorCode::TruncatedBlob, "checkpoint blob has " + std::to_string(bytes.size() - pos) +
                                                  " bytes, header declares " + std::to_string(blob_size));
    }
    const char* p = bytes.data() + pos;
    for (double& v : net.parameters()) {
        v = get_le(p);
        p += 8;
    }
    for (double& v : net.statistics()) {
        v = get_le(p);
        p += 8;
    }
    return model;
}

void save_checkpoint(const Autoencoder& model, const std::filesystem::path& path) {
    const std::string bytes = serialize_checkpoint(model);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::Io, "cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::Io, "failed writing checkpoint " + path.string());
}

Autoencoder load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, "cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize_checkpoint(ss.str());
}

} // namespace dfe
