#include "stainsep/formats.hpp"

#include <fstream>
#include <nlohmann/json.hpp>

namespace stainsep {

namespace {

using nlohmann::json;

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_u8(std::ostream& os, std::uint8_t v) { os.write(reinterpret_cast<const char*>(&v), 1); }

std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) throw FormatError("unexpected end of file");
    return v;
}
std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 8)) throw FormatError("unexpected end of file");
    return v;
}
std::uint8_t read_u8(std::istream& is) {
    std::uint8_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 1)) throw FormatError("unexpected end of file");
    return v;
}

void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
    const std::uint32_t n = read_u32(is);
    if (n > (1u << 20)) throw FormatError("string length " + std::to_string(n) + " implausible");
    std::string s(n, '\0');
    if (n && !is.read(s.data(), n)) throw FormatError("unexpected end of file");
    return s;
}

void write_floats(std::ostream& os, const std::vector<float>& v) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(float)));
}

void read_floats(std::istream& is, std::vector<float>& v) {
    if (!v.empty() &&
        !is.read(reinterpret_cast<char*>(v.data()),
                 static_cast<std::streamsize>(v.size() * sizeof(float))))
        throw FormatError("unexpected end of file");
}

std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open '" + path + "' for writing");
    return os;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open '" + path + "' for reading");
    return is;
}

void expect_magic(std::istream& is, const char* magic, const std::string& path) {
    char buf[4];
    if (!is.read(buf, 4) || std::string(buf, 4) != magic)
        throw FormatError("'" + path + "' is not a " + magic + " file");
}

void write_tensor_record(std::ostream& os, const TensorRecord& r) {
    write_string(os, r.name);
    write_u32(os, static_cast<std::uint32_t>(r.shape.size()));
    for (int d : r.shape) write_u32(os, static_cast<std::uint32_t>(d));
    if (shape_numel(r.shape) != static_cast<std::int64_t>(r.values.size()))
        throw FormatError("tensor record '" + r.name + "' shape/data mismatch");
    write_floats(os, r.values);
}

TensorRecord read_tensor_record(std::istream& is) {
    TensorRecord r;
    r.name = read_string(is);
    const std::uint32_t ndim = read_u32(is);
    if (ndim > 4) throw FormatError("tensor record '" + r.name + "' has " + std::to_string(ndim) + " dims");
    r.shape.resize(ndim);
    for (auto& d : r.shape) d = static_cast<int>(read_u32(is));
    r.values.resize(static_cast<size_t>(shape_numel(r.shape)));
    read_floats(is, r.values);
    return r;
}

}  // namespace

void save_concentrations(const std::string& path, const ConcentrationMap& c) {
    const int k = c.map.channels;
    if (static_cast<int>(c.names.size()) != k)
        throw FormatError("save_concentrations: " + std::to_string(c.names.size()) +
                          " names for " + std::to_string(k) + " channels");
    auto os = open_out(path);
    os.write("SQC1", 4);
    write_u32(os, static_cast<std::uint32_t>(c.map.height));
    write_u32(os, static_cast<std::uint32_t>(c.map.width));
    write_u32(os, static_cast<std::uint32_t>(k));
    write_floats(os, c.map.values);
    for (const auto& name : c.names) write_string(os, name);
    if (!os) throw FormatError("write failed for '" + path + "'");
}

ConcentrationMap load_concentrations(const std::string& path) {
    auto is = open_in(path);
    expect_magic(is, "SQC1", path);
    const int h = static_cast<int>(read_u32(is));
    const int w = static_cast<int>(read_u32(is));
    const int k = static_cast<int>(read_u32(is));
    if (h < 1 || w < 1 || k < 1 || static_cast<std::int64_t>(h) * w * k > (1ll << 31))
        throw FormatError("'" + path + "': implausible dimensions");
    ConcentrationMap c;
    c.map = Image(h, w, k);
    read_floats(is, c.map.values);
    for (int i = 0; i < k; ++i) c.names.push_back(read_string(is));
    return c;
}

void save_stain_matrix(const std::string& path, const StainMatrix& s) {
    json doc;
    doc["version"] = 1;
    doc["K"] = s.K();
    doc["names"] = s.names;
    json cols = json::array();
    for (const auto& c : s.columns) cols.push_back({c[0], c[1], c[2]});
    doc["columns"] = cols;
    doc["normalized"] = s.normalized;
    auto os = open_out(path);
    os << doc.dump(2) << "\n";
}

StainMatrix load_stain_matrix(const std::string& path) {
    auto is = open_in(path);
    json doc;
    try {
        is >> doc;
    } catch (const json::exception& e) {
        throw FormatError("'" + path + "': " + e.what());
    }
    StainMatrix s;
    try {
        const int k = doc.at("K").get<int>();
        s.names = doc.at("names").get<std::vector<std::string>>();
        for (const auto& col : doc.at("columns"))
            s.columns.push_back({col.at(0).get<double>(), col.at(1).get<double>(), col.at(2).get<double>()});
        s.normalized = doc.value("normalized", false);
        if (s.K() != k || static_cast<int>(s.names.size()) != k)
            throw FormatError("'" + path + "': K does not match names/columns");
    } catch (const json::exception& e) {
        throw FormatError("'" + path + "': " + e.what());
    }
    return s;
}

void save_checkpoint(const std::string& path, const Checkpoint& cp) {
    auto os = open_out(path);
    os.write("SQCK", 4);
    write_u32(os, 1);  // format version
    write_u32(os, static_cast<std::uint32_t>(cp.config.base_channels));
    write_u32(os, static_cast<std::uint32_t>(cp.config.stains));
    write_u32(os, static_cast<std::uint32_t>(cp.config.residual_blocks));
    write_u32(os, static_cast<std::uint32_t>(cp.config.kernel_size));
    write_u64(os, cp.step);
    write_u32(os, static_cast<std::uint32_t>(cp.stain_names.size()));
    for (const auto& n : cp.stain_names) write_string(os, n);
    write_u32(os, static_cast<std::uint32_t>(cp.params.size()));
    for (const auto& r : cp.params) write_tensor_record(os, r);
    write_u8(os, cp.has_optimizer ? 1 : 0);
    if (cp.has_optimizer) {
        write_u32(os, static_cast<std::uint32_t>(cp.optimizer.size()));
        for (const auto& r : cp.optimizer) write_tensor_record(os, r);
    }
    if (!os) throw FormatError("write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    auto is = open_in(path);
    expect_magic(is, "SQCK", path);
    const std::uint32_t version = read_u32(is);
    if (version != 1) throw FormatError("'" + path + "': unsupported checkpoint version " + std::to_string(version));
    Checkpoint cp;
    cp.config.base_channels = static_cast<int>(read_u32(is));
    cp.config.stains = static_cast<int>(read_u32(is));
    cp.config.residual_blocks = static_cast<int>(read_u32(is));
    cp.config.kernel_size = static_cast<int>(read_u32(is));
    cp.step = read_u64(is);
    const std::uint32_t n_names = read_u32(is);
    for (std::uint32_t i = 0; i < n_names; ++i) cp.stain_names.push_back(read_string(is));
    const std::uint32_t n_params = read_u32(is);
    for (std::uint32_t i = 0; i < n_params; ++i) cp.params.push_back(read_tensor_record(is));
    cp.has_optimizer = read_u8(is) != 0;
    if (cp.has_optimizer) {
        const std::uint32_t n_opt = read_u32(is);
        for (std::uint32_t i = 0; i < n_opt; ++i) cp.optimizer.push_back(read_tensor_record(is));
    }
    return cp;
}

void save_tensor_bank(const std::string& path, const std::vector<TensorRecord>& records) {
    auto os = open_out(path);
    os.write("SQFB", 4);
    write_u32(os, 1);
    write_u32(os, static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) write_tensor_record(os, r);
    if (!os) throw FormatError("write failed for '" + path + "'");
}

std::vector<TensorRecord> load_tensor_bank(const std::string& path) {
    auto is = open_in(path);
    expect_magic(is, "SQFB", path);
    if (read_u32(is) != 1) throw FormatError("'" + path + "': unsupported bank version");
    const std::uint32_t n = read_u32(is);
    std::vector<TensorRecord> out;
    for (std::uint32_t i = 0; i < n; ++i) out.push_back(read_tensor_record(is));
    return out;
}

}  // namespace stainsep
