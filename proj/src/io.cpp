#include "fdibench/io.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace fdibench::io {

using nlohmann::json;

std::string sha256_hex(const std::string& bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw InvalidState("SHA-256 digest failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 0xF];
    }
    return out;
}

std::string file_digest(const fs::path& path) { return sha256_hex(read_file(path)); }

void atomic_write(const fs::path& path, const std::string& bytes) {
    std::error_code ec;
    if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw IoError("write to " + tmp.string() + " failed");
    }
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw IoError("cannot move output into place at " + path.string());
    }
}

std::string read_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string number(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::string> channel_names(const std::vector<ChannelTag>& channels) {
    static const char* axes[] = {"x", "y", "z"};
    std::vector<std::string> names;
    int gps = 0, cam = 0;
    for (auto tag : channels) {
        switch (tag) {
            case ChannelTag::GpsPos: names.push_back(std::string("gps_") + axes[gps++ % 3]); break;
            case ChannelTag::CameraPos: names.push_back(std::string("camera_") + axes[cam++ % 3]); break;
            case ChannelTag::MagHeading: names.push_back("mag_heading"); break;
        }
    }
    return names;
}

namespace {

void put_vec(std::ostringstream& os, const Vec& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) os << "," << number(v[i]);
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

double parse_double(const std::string& s, const fs::path& file, long line) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(file.string() + ":" + std::to_string(line) + ": not a number: '" + s + "'");
    }
}

}  // namespace

std::string run_csv(const sim::RunRecord& run) {
    const auto& model = run.scenario.model;
    std::ostringstream os;
    os << "k,label";
    for (int i = 0; i < model.state_dim; ++i) os << ",x" << i;
    for (int i = 0; i < model.input_dim; ++i) os << ",u" << i;
    for (const auto& n : channel_names(model.channels)) os << ",y_" << n;
    os << "\n";
    for (long k = 0; k < run.size(); ++k) {
        os << k << "," << to_string(run.labels[k]);
        put_vec(os, run.states[k]);
        put_vec(os, run.inputs[k]);
        put_vec(os, run.measurements[k]);
        os << "\n";
    }
    return os.str();
}

std::string residues_csv(const ekf::ResidueSequence& seq) {
    const auto names = channel_names(seq.channels);
    const auto m = static_cast<int>(names.size());
    std::ostringstream os;
    os << "k,label,warmup";
    for (const auto& n : names) os << ",r_" << n;
    for (const auto& n : names) os << ",rn_" << n;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) os << ",S_" << i << "_" << j;
    os << "\n";
    for (long k = 0; k < seq.size(); ++k) {
        const auto& s = seq.samples[k];
        os << s.k << "," << to_string(seq.labels[k]) << "," << (s.warmup ? 1 : 0);
        put_vec(os, s.r);
        put_vec(os, s.r_norm);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j) os << "," << number(s.S(i, j));
        os << "\n";
    }
    return os.str();
}

std::string residues_json(const ekf::ResidueSequence& seq, ModelId model, bool labeled) {
    json j;
    j["format_version"] = kFormatVersion;
    j["model"] = to_string(model);
    std::vector<std::string> tags;
    for (auto c : seq.channels) tags.push_back(to_string(c));
    j["channels"] = tags;
    j["warmup_steps"] = seq.warmup_steps;
    j["normalized"] = seq.normalized;
    j["supervision"] = labeled ? "labeled" : "unlabeled";
    j["steps"] = seq.size();
    j["source_digest"] = seq.source_digest;
    return j.dump(2) + "\n";
}

std::string verdicts_csv(const detect::VerdictStream& verdicts, const std::string& detector) {
    std::ostringstream os;
    os << "k,detector,decision,class,score\n";
    for (const auto& v : verdicts)
        os << v.k << "," << detector << "," << (v.attacked() ? "attacked" : "clean") << ","
           << (v.attacked() && v.attack_class != AttackKind::None ? to_string(v.attack_class) : "") << ","
           << number(v.score) << "\n";
    return os.str();
}

std::string events_csv(const std::vector<resilience::Event>& events) {
    std::ostringstream os;
    os << "step,action,sensor,detector,score\n";
    for (const auto& e : events)
        os << e.k << "," << resilience::to_string(e.action) << "," << e.sensor << "," << e.detector << ","
           << number(e.score) << "\n";
    return os.str();
}

ResidueFile read_residues(const fs::path& csv_path) {
    fs::path meta_path = csv_path;
    meta_path.replace_extension(".json");
    ResidueFile out;
    json meta;
    try {
        meta = json::parse(read_file(meta_path));
    } catch (const json::exception& e) {
        throw ConfigError(meta_path.string() + ": " + e.what());
    }
    try {
        if (meta.at("format_version").get<int>() != kFormatVersion)
            throw ConfigError(meta_path.string() + ": unsupported format_version");
        out.model = parse_model_id(meta.at("model").get<std::string>());
        for (const auto& t : meta.at("channels")) {
            const auto s = t.get<std::string>();
            if (s == "gps_pos") out.sequence.channels.push_back(ChannelTag::GpsPos);
            else if (s == "camera_pos") out.sequence.channels.push_back(ChannelTag::CameraPos);
            else if (s == "mag_heading") out.sequence.channels.push_back(ChannelTag::MagHeading);
            else throw ConfigError(meta_path.string() + ": unknown channel tag '" + s + "'");
        }
        out.sequence.warmup_steps = meta.at("warmup_steps").get<int>();
        out.sequence.normalized = meta.at("normalized").get<bool>();
        const auto sup = meta.at("supervision").get<std::string>();
        if (sup != "labeled" && sup != "unlabeled")
            throw ConfigError(meta_path.string() + ": supervision must be labeled or unlabeled");
        out.labeled = sup == "labeled";
        out.sequence.source_digest = meta.value("source_digest", "");
    } catch (const json::exception& e) {
        throw ConfigError(meta_path.string() + ": " + e.what());
    }

    const int m = out.sequence.channel_count();
    std::istringstream in(read_file(csv_path));
    std::string line;
    if (!std::getline(in, line)) throw ConfigError(csv_path.string() + ": empty file");
    const std::size_t cols = 3 + 2 * m + m * m;
    if (split(line).size() != cols) throw ConfigError(csv_path.string() + ":1: header does not match channel list");
    long lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto f = split(line);
        if (f.size() != cols) throw ConfigError(csv_path.string() + ":" + std::to_string(lineno) + ": wrong column count");
        ekf::ResidueSample s;
        s.k = static_cast<long>(parse_double(f[0], csv_path, lineno));
        try {
            out.sequence.labels.push_back(parse_label(f[1]));
        } catch (const std::exception&) {
            throw ConfigError(csv_path.string() + ":" + std::to_string(lineno) + ": bad label '" + f[1] + "'");
        }
        s.warmup = f[2] == "1";
        s.r.resize(m);
        s.r_norm.resize(m);
        s.S.resize(m, m);
        for (int i = 0; i < m; ++i) {
            s.r[i] = parse_double(f[3 + i], csv_path, lineno);
            s.r_norm[i] = parse_double(f[3 + m + i], csv_path, lineno);
        }
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j) s.S(i, j) = parse_double(f[3 + 2 * m + i * m + j], csv_path, lineno);
        out.sequence.samples.push_back(std::move(s));
    }
    return out;
}

std::vector<fs::path> find_residue_files(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("corpus directory not found: " + dir.string());
    std::vector<fs::path> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const auto name = e.path().filename().string();
        if (name.size() >= 12 && name.compare(name.size() - 12, 12, "residues.csv") == 0) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

namespace {

json hyper_json(const transformer::Hyper& h) {
    return {{"window", h.window}, {"channels", h.channels}, {"d_model", h.d_model}, {"heads", h.heads},
            {"layers", h.layers}, {"d_ff", h.d_ff},         {"seed", h.seed}};
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out += static_cast<char>((v >> (8 * i)) & 0xFF);
}

std::uint64_t get_u64(const std::string& in, std::size_t off) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
    return v;
}

}  // namespace

std::string checkpoint_bytes(const transformer::ModelParams& params) {
    json header;
    header["format_version"] = kFormatVersion;
    header["hyper"] = hyper_json(params.hyper);
    json blocks = json::array();
    for (const auto& b : params.blocks()) blocks.push_back({{"name", b.name}, {"size", b.size}});
    header["blocks"] = blocks;
    const std::string h = header.dump();

    std::string out;
    put_u64(out, h.size());
    out += h;
    for (const auto& b : params.blocks())
        for (Eigen::Index i = 0; i < b.size; ++i) {
            std::uint64_t bits;
            std::memcpy(&bits, &b.data[i], sizeof bits);
            put_u64(out, bits);
        }
    return out;
}

transformer::ModelParams parse_checkpoint(const std::string& bytes) {
    if (bytes.size() < 8) throw ConfigError("checkpoint is truncated");
    const auto hlen = get_u64(bytes, 0);
    if (hlen > bytes.size() - 8) throw ConfigError("checkpoint header length exceeds file size");
    json header;
    transformer::Hyper hp;
    try {
        header = json::parse(bytes.substr(8, hlen));
        if (header.at("format_version").get<int>() != kFormatVersion)
            throw ConfigError("unsupported checkpoint format_version");
        const auto& h = header.at("hyper");
        hp.window = h.at("window");
        hp.channels = h.at("channels");
        hp.d_model = h.at("d_model");
        hp.heads = h.at("heads");
        hp.layers = h.at("layers");
        hp.d_ff = h.at("d_ff");
        hp.seed = h.at("seed");
    } catch (const json::exception& e) {
        throw ConfigError(std::string("checkpoint header: ") + e.what());
    }
    auto params = transformer::ModelParams::init(hp);
    auto blocks = params.blocks();
    const auto& listed = header.at("blocks");
    if (listed.size() != blocks.size()) throw ConfigError("checkpoint block list does not match the model");
    std::size_t off = 8 + hlen;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        if (listed[i].at("name").get<std::string>() != blocks[i].name ||
            listed[i].at("size").get<Eigen::Index>() != blocks[i].size)
            throw ConfigError("checkpoint block " + blocks[i].name + " does not match the model");
        if (off + 8 * static_cast<std::size_t>(blocks[i].size) > bytes.size())
            throw ConfigError("checkpoint is truncated in block " + blocks[i].name);
        for (Eigen::Index j = 0; j < blocks[i].size; ++j, off += 8) {
            const std::uint64_t bits = get_u64(bytes, off);
            std::memcpy(&blocks[i].data[j], &bits, sizeof bits);
        }
    }
    if (off != bytes.size()) throw ConfigError("checkpoint has trailing bytes");
    return params;
}

transformer::ModelParams read_checkpoint(const fs::path& path) { return parse_checkpoint(read_file(path)); }

}  // namespace fdibench::io
