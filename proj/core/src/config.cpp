#include "sseg/config.hpp"

#include <charconv>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace sseg {

namespace {

bool key_char(char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' || c == '.';
}

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& text, const char* want) {
    throw std::invalid_argument("config: key '" + key + "' expects " + want + ", got '" + text +
                                "'");
}

template <typename T>
T parse_integral(const std::string& key, const std::string& text, const char* want) {
    T out{};
    const char* begin = text.data();
    const char* end = begin + text.size();
    auto [ptr, ec] = std::from_chars(begin, end, out);
    if (ec != std::errc() || ptr != end) bad_value(key, text, want);
    return out;
}

}  // namespace

ConfigMap parse_config_text(const std::string& text) {
    ConfigMap out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        lineno += 1;
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        const std::size_t eq = stripped.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                        " has no '='");
        const std::string key = trim(stripped.substr(0, eq));
        if (key.empty())
            throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                        " has an empty key");
        for (char c : key)
            if (!key_char(c))
                throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                            " has a bad key character in '" + key + "'");
        out[key] = trim(stripped.substr(eq + 1));
    }
    return out;
}

ConfigMap read_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::ostringstream os;
    os << in.rdbuf();
    try {
        return parse_config_text(os.str());
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
}

ConfigMap merge_configs(const ConfigMap& base, const ConfigMap& override) {
    ConfigMap out = base;
    for (const auto& [k, v] : override) out[k] = v;
    return out;
}

std::string format_config(const ConfigMap& cfg) {
    std::string out;
    for (const auto& [k, v] : cfg) {
        if (v.find('\n') != std::string::npos)
            throw std::invalid_argument("config: value of '" + k + "' spans lines");
        out += k;
        out += '=';
        out += v;
        out += '\n';
    }
    return out;
}

void write_config_file(const std::string& path, const ConfigMap& cfg) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("config: cannot write " + path);
    out << format_config(cfg);
}

bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    bad_value(key, text, "true or false");
}

std::int64_t parse_int(const std::string& key, const std::string& text) {
    return parse_integral<std::int64_t>(key, text, "an integer");
}

std::uint64_t parse_uint(const std::string& key, const std::string& text) {
    return parse_integral<std::uint64_t>(key, text, "an unsigned integer");
}

double parse_double(const std::string& key, const std::string& text) {
    double out = 0.0;
    const char* begin = text.data();
    const char* end = begin + text.size();
    auto [ptr, ec] = std::from_chars(begin, end, out);
    if (ec != std::errc() || ptr != end) bad_value(key, text, "a number");
    return out;
}

std::vector<int> parse_int_list(const std::string& key, const std::string& text) {
    std::vector<int> out;
    if (trim(text).empty()) return out;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = text.find(',', start);
        const std::string item = trim(text.substr(start, comma - start));
        out.push_back(static_cast<int>(parse_integral<std::int64_t>(key, item, "an integer list")));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) throw std::runtime_error("config: cannot format double");
    return std::string(buf, ptr);
}

void ConfigBinder::add(const std::string& key, Entry entry) {
    for (char c : key)
        if (!key_char(c)) throw std::invalid_argument("config: bad key '" + key + "'");
    if (!entries_.emplace(key, entry).second)
        throw std::invalid_argument("config: key '" + key + "' bound twice");
}

void ConfigBinder::bind(const std::string& key, bool* field) {
    add(key, {field,
              [](const std::string& k, const std::string& t, void* f) {
                  *static_cast<bool*>(f) = parse_bool(k, t);
              },
              [](const void* f) -> std::string {
                  return *static_cast<const bool*>(f) ? "true" : "false";
              }});
}

void ConfigBinder::bind(const std::string& key, int* field) {
    add(key, {field,
              [](const std::string& k, const std::string& t, void* f) {
                  const std::int64_t v = parse_int(k, t);
                  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
                      throw std::invalid_argument("config: key '" + k + "' out of range");
                  *static_cast<int*>(f) = static_cast<int>(v);
              },
              [](const void* f) -> std::string {
                  return std::to_string(*static_cast<const int*>(f));
              }});
}

void ConfigBinder::bind(const std::string& key, std::int64_t* field) {
    add(key, {field,
              [](const std::string& k, const std::string& t, void* f) {
                  *static_cast<std::int64_t*>(f) = parse_int(k, t);
              },
              [](const void* f) -> std::string {
                  return std::to_string(*static_cast<const std::int64_t*>(f));
              }});
}

void ConfigBinder::bind(const std::string& key, std::uint64_t* field) {
    add(key, {field,
              [](const std::string& k, const std::string& t, void* f) {
                  *static_cast<std::uint64_t*>(f) = parse_uint(k, t);
              },
              [](const void* f) -> std::string {
                  return std::to_string(*static_cast<const std::uint64_t*>(f));
              }});
}

void ConfigBinder::bind(const std::string& key, double* field) {
    add(key, {field,
              [](const std::string& k, const std::string& t, void* f) {
                  *static_cast<double*>(f) = parse_double(k, t);
              },
              [](const void* f) -> std::string {
                  return format_double(*static_cast<const double*>(f));
              }});
}

void ConfigBinder::bind(const std::string& key, std::string* field) {
    add(key, {field,
              [](const std::string&, const std::string& t, void* f) {
                  *static_cast<std::string*>(f) = t;
              },
              [](const void* f) -> std::string { return *static_cast<const std::string*>(f); }});
}

void ConfigBinder::bind(const std::string& key, std::vector<int>* field) {
    add(key, {field,
              [](const std::string& k, const std::string& t, void* f) {
                  *static_cast<std::vector<int>*>(f) = parse_int_list(k, t);
              },
              [](const void* f) -> std::string {
                  const auto& v = *static_cast<const std::vector<int>*>(f);
                  std::string out;
                  for (std::size_t i = 0; i < v.size(); ++i) {
                      if (i) out += ',';
                      out += std::to_string(v[i]);
                  }
                  return out;
              }});
}

bool ConfigBinder::knows(const std::string& key) const { return entries_.count(key) != 0; }

std::vector<std::string> ConfigBinder::keys() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [k, e] : entries_) out.push_back(k);
    return out;
}

void ConfigBinder::apply(const ConfigMap& cfg) const {
    for (const auto& [key, value] : cfg) {
        auto it = entries_.find(key);
        if (it == entries_.end()) {
            std::string known;
            for (const auto& [k, e] : entries_) {
                if (!known.empty()) known += ", ";
                known += k;
            }
            throw std::invalid_argument("config: unknown key '" + key + "' (valid: " + known +
                                        ")");
        }
        it->second.parse(key, value, it->second.field);
    }
}

ConfigMap ConfigBinder::snapshot() const {
    ConfigMap out;
    for (const auto& [key, entry] : entries_) out[key] = entry.print(entry.field);
    return out;
}

}  // namespace sseg
