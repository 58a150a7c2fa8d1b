#include "surgimap/config.hpp"

#include "surgimap/errors.hpp"
#include "surgimap/fsutil.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <sstream>

#include "json.hpp"

namespace surgimap {

namespace {

std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

void flatten(const nlohmann::json& j, const std::string& prefix, std::map<std::string, std::string>& out) {
    if (j.is_object()) {
        for (const auto& [k, v] : j.items()) {
            flatten(v, prefix.empty() ? k : prefix + "." + k, out);
        }
    } else if (j.is_array()) {
        std::string joined;
        for (const auto& v : j) {
            if (!joined.empty()) {
                joined += ",";
            }
            joined += v.is_string() ? v.get<std::string>() : v.dump();
        }
        out[prefix] = joined;
    } else if (j.is_string()) {
        out[prefix] = j.get<std::string>();
    } else {
        out[prefix] = j.dump();
    }
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* kind) {
    throw ValidationError("setting '" + key + "' must be " + kind + ", got '" + value + "'");
}

} // namespace

Settings Settings::load(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) {
        throw IoError("config file not found: " + path.string());
    }
    auto text = read_file(path);
    return path.extension() == ".json" ? parse_json(text) : parse_key_values(text);
}

Settings Settings::parse_json(std::string_view text) {
    Settings s;
    try {
        auto j = nlohmann::json::parse(text);
        if (!j.is_object()) {
            throw FormatError("config JSON must be an object");
        }
        flatten(j, "", s.file_);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("config: ") + e.what());
    }
    return s;
}

Settings Settings::parse_key_values(std::string_view text) {
    Settings s;
    std::istringstream in{std::string(text)};
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (auto hash = line.find('#'); hash != std::string::npos) {
            line.erase(hash);
        }
        auto t = trim(line);
        if (t.empty()) {
            continue;
        }
        auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw FormatError("config line " + std::to_string(n) + ": expected key = value");
        }
        auto key = trim(std::string_view(t).substr(0, eq));
        if (key.empty()) {
            throw FormatError("config line " + std::to_string(n) + ": empty key");
        }
        s.file_[key] = trim(std::string_view(t).substr(eq + 1));
    }
    return s;
}

std::string Settings::env_name(const std::string& key) {
    std::string out = "SURGIMAP_";
    for (char c : key) {
        out.push_back(c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    }
    return out;
}

std::optional<std::string> Settings::get(const std::string& key) const {
    if (auto it = overrides_.find(key); it != overrides_.end()) {
        return it->second;
    }
    if (const char* env = std::getenv(env_name(key).c_str())) {
        return std::string(env);
    }
    if (auto it = file_.find(key); it != file_.end()) {
        return it->second;
    }
    return std::nullopt;
}

std::string Settings::get_string(const std::string& key, const std::string& fallback) const {
    return get(key).value_or(fallback);
}

long Settings::get_int(const std::string& key, long fallback) const {
    auto v = get(key);
    if (!v) {
        return fallback;
    }
    try {
        std::size_t used = 0;
        long x = std::stol(*v, &used);
        if (used == v->size()) {
            return x;
        }
    } catch (const std::exception&) {
    }
    bad_value(key, *v, "an integer");
}

double Settings::get_double(const std::string& key, double fallback) const {
    auto v = get(key);
    if (!v) {
        return fallback;
    }
    try {
        std::size_t used = 0;
        double x = std::stod(*v, &used);
        if (used == v->size()) {
            return x;
        }
    } catch (const std::exception&) {
    }
    bad_value(key, *v, "a number");
}

bool Settings::get_bool(const std::string& key, bool fallback) const {
    auto v = get(key);
    if (!v) {
        return fallback;
    }
    std::string s = *v;
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    if (s == "1" || s == "true" || s == "yes" || s == "on") {
        return true;
    }
    if (s == "0" || s == "false" || s == "no" || s == "off") {
        return false;
    }
    bad_value(key, *v, "a boolean");
}

std::vector<int> Settings::get_int_list(const std::string& key, const std::vector<int>& fallback) const {
    auto v = get(key);
    if (!v) {
        return fallback;
    }
    std::vector<int> out;
    std::string text = *v;
    std::replace(text.begin(), text.end(), '[', ' ');
    std::replace(text.begin(), text.end(), ']', ' ');
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        auto t = trim(item);
        if (t.empty()) {
            continue;
        }
        try {
            std::size_t used = 0;
            int x = std::stoi(t, &used);
            if (used != t.size()) {
                bad_value(key, *v, "a list of integers");
            }
            out.push_back(x);
        } catch (const std::logic_error&) {
            bad_value(key, *v, "a list of integers");
        }
    }
    return out;
}

std::vector<std::string> Settings::unknown_keys(const std::vector<std::string>& known) const {
    std::vector<std::string> out;
    for (const auto& [k, _] : file_) {
        if (std::find(known.begin(), known.end(), k) == known.end()) {
            out.push_back(k);
        }
    }
    return out;
}

} // namespace surgimap
