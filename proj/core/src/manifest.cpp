#include "sseg/manifest.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace sseg {

namespace {

std::string stem_of(const std::string& path) { return fs::path(path).stem().string(); }

std::string sanitize(std::string s) {
    std::replace(s.begin(), s.end(), '\t', ' ');
    std::replace(s.begin(), s.end(), '\n', ' ');
    std::replace(s.begin(), s.end(), '\r', ' ');
    return s;
}

}  // namespace

std::vector<ManifestRecord> read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_manifest: cannot open " + path);
    std::vector<ManifestRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        ManifestRecord rec;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, '\t')) {
            const auto eq = field.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error("read_manifest: line " + std::to_string(lineno) +
                                         ": field without '=': " + field);
            const std::string key = field.substr(0, eq);
            const std::string val = field.substr(eq + 1);
            if (key == "image")
                rec.image = val;
            else if (key == "text")
                rec.text = val;
            else if (key == "labels")
                rec.labels = val;
            else if (key == "id")
                rec.id = val;
            else
                throw std::runtime_error("read_manifest: line " + std::to_string(lineno) +
                                         ": unknown key '" + key + "'");
        }
        if (rec.image.empty())
            throw std::runtime_error("read_manifest: line " + std::to_string(lineno) +
                                     ": missing image field");
        if (rec.id.empty()) rec.id = stem_of(rec.image);
        out.push_back(std::move(rec));
    }
    return out;
}

void write_manifest(const std::string& path, const std::vector<ManifestRecord>& records) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("write_manifest: cannot open " + path);
    for (const auto& rec : records) {
        out << "image=" << rec.image;
        if (!rec.id.empty() && rec.id != stem_of(rec.image)) out << "\tid=" << rec.id;
        if (!rec.text.empty()) out << "\ttext=" << sanitize(rec.text);
        if (!rec.labels.empty()) out << "\tlabels=" << rec.labels;
        out << '\n';
    }
    if (!out) throw std::runtime_error("write_manifest: write failed for " + path);
}

std::vector<std::string> read_class_names(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_class_names: cannot open " + path);
    std::vector<std::string> names;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) names.push_back(line);
    }
    return names;
}

void write_class_names(const std::string& path, const std::vector<std::string>& names) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("write_class_names: cannot open " + path);
    for (const auto& n : names) out << n << '\n';
}

PairLoader::PairLoader(const std::string& manifest_path)
    : records_(read_manifest(manifest_path)),
      base_dir_(fs::path(manifest_path).parent_path().string()) {}

ImageTextPair PairLoader::load(std::size_t i) const {
    const ManifestRecord& rec = records_.at(i);
    fs::path p(rec.image);
    if (p.is_relative() && !base_dir_.empty()) p = fs::path(base_dir_) / p;
    ImageTextPair pair;
    pair.id = rec.id;
    pair.caption = rec.text;
    try {
        pair.image = read_png(p.string());
    } catch (const std::exception& e) {
        throw std::runtime_error("record '" + rec.id + "': " + e.what());
    }
    if (pair.image.channels != 3)
        throw std::runtime_error("record '" + rec.id + "': expected RGB image");
    return pair;
}

ImageU8 PairLoader::load_labels(std::size_t i) const {
    const ManifestRecord& rec = records_.at(i);
    if (rec.labels.empty())
        throw std::runtime_error("record '" + rec.id + "': no labels field");
    fs::path p(rec.labels);
    if (p.is_relative() && !base_dir_.empty()) p = fs::path(base_dir_) / p;
    ImageU8 labels;
    try {
        labels = read_png(p.string());
    } catch (const std::exception& e) {
        throw std::runtime_error("record '" + rec.id + "': " + e.what());
    }
    if (labels.channels != 1)
        throw std::runtime_error("record '" + rec.id + "': label map must be single channel");
    return labels;
}

}  // namespace sseg
