#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace sseg {

/// Flat key=value settings, keys sorted. One pair per line in files; '#'
/// starts a comment and blank lines are skipped. Values keep everything
/// after the first '='.
using ConfigMap = std::map<std::string, std::string>;

/// Parses config text; malformed lines (no '=', empty key, bad key
/// characters) raise std::invalid_argument naming the line number. Keys use
/// [a-z0-9_.] only.
ConfigMap parse_config_text(const std::string& text);

ConfigMap read_config_file(const std::string& path);

/// Later maps win key collisions.
ConfigMap merge_configs(const ConfigMap& base, const ConfigMap& override);

/// Serializes a map back to file form; values must be single-line.
std::string format_config(const ConfigMap& cfg);
void write_config_file(const std::string& path, const ConfigMap& cfg);

/// Binds config keys to typed fields. Defaults are whatever the fields hold
/// when apply runs; apply parses every map entry into its field and rejects
/// unknown keys (listing the valid set). snapshot reads the fields back as
/// strings, so defaults, file values and flag overrides all land in one
/// reproducible record. Doubles round-trip bit-exactly.
class ConfigBinder {
public:
    void bind(const std::string& key, bool* field);
    void bind(const std::string& key, int* field);
    void bind(const std::string& key, std::int64_t* field);
    void bind(const std::string& key, std::uint64_t* field);
    void bind(const std::string& key, double* field);
    void bind(const std::string& key, std::string* field);
    void bind(const std::string& key, std::vector<int>* field);  // comma list

    bool knows(const std::string& key) const;
    std::vector<std::string> keys() const;

    void apply(const ConfigMap& cfg) const;
    ConfigMap snapshot() const;

private:
    struct Entry {
        void* field = nullptr;
        void (*parse)(const std::string& key, const std::string& text, void* field) = nullptr;
        std::string (*print)(const void* field) = nullptr;
    };
    std::map<std::string, Entry> entries_;

    void add(const std::string& key, Entry entry);
};

// Single-value parsers behind the binder, usable on their own for flag
// handling. All throw std::invalid_argument naming the key.
bool parse_bool(const std::string& key, const std::string& text);
std::int64_t parse_int(const std::string& key, const std::string& text);
std::uint64_t parse_uint(const std::string& key, const std::string& text);
double parse_double(const std::string& key, const std::string& text);
std::vector<int> parse_int_list(const std::string& key, const std::string& text);

/// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

}  // namespace sseg
