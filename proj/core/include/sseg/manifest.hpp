#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sseg/image.hpp"

namespace sseg {

/// One line of a dataset manifest. `labels` is empty when the record has no
/// ground-truth label map. `id` defaults to the image filename stem.
struct ManifestRecord {
    std::string id;
    std::string image;
    std::string text;
    std::string labels;
};

struct ImageTextPair {
    std::string id;
    ImageU8 image;  // RGB
    std::string caption;
};

struct LabeledImage {
    ImageU8 image;   // RGB
    ImageU8 labels;  // single channel, class indices
    std::vector<std::string> class_names;
    int ignore_value = 255;
};

/// Parses a manifest: one record per line, TAB-separated `key=value` fields.
/// Recognized keys: image (required), text, labels, id. Blank lines and lines
/// starting with '#' are skipped. Malformed lines raise std::runtime_error
/// naming the line number.
std::vector<ManifestRecord> read_manifest(const std::string& path);

/// Writes records in the same format. Captions must not contain tabs or
/// newlines; offending characters are replaced with spaces.
void write_manifest(const std::string& path, const std::vector<ManifestRecord>& records);

/// Reads one class name per line (index = line number, starting at 0).
std::vector<std::string> read_class_names(const std::string& path);
void write_class_names(const std::string& path, const std::vector<std::string>& names);

/// Lazy image-text loader over a manifest. Images are decoded on demand so a
/// large manifest costs nothing up front.
class PairLoader {
public:
    explicit PairLoader(const std::string& manifest_path);

    std::size_t size() const { return records_.size(); }
    const std::vector<ManifestRecord>& records() const { return records_; }

    /// Decodes record i. Failures raise std::runtime_error carrying the
    /// record id.
    ImageTextPair load(std::size_t i) const;

    /// Decodes the label map for record i (requires a labels field).
    ImageU8 load_labels(std::size_t i) const;

private:
    std::vector<ManifestRecord> records_;
    std::string base_dir_;  // manifest-relative paths resolve against this
};

}  // namespace sseg
