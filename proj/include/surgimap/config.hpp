#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace surgimap {

// Flat key/value settings with dotted keys ("train.epochs"). Lookup order:
// explicit overrides, then the environment (SURGIMAP_TRAIN_EPOCHS), then the
// loaded file.
class Settings {
public:
    // JSON (nested objects flatten to dotted keys) when the file ends in
    // .json, otherwise "key = value" lines with '#' comments.
    static Settings load(const std::filesystem::path& path);
    static Settings parse_json(std::string_view text);
    static Settings parse_key_values(std::string_view text);

    void set(const std::string& key, const std::string& value) { overrides_[key] = value; }

    std::optional<std::string> get(const std::string& key) const;
    std::string get_string(const std::string& key, const std::string& fallback) const;
    long get_int(const std::string& key, long fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback) const;

    // File keys that are not in `known`.
    std::vector<std::string> unknown_keys(const std::vector<std::string>& known) const;

    static std::string env_name(const std::string& key);

private:
    std::map<std::string, std::string> file_;
    std::map<std::string, std::string> overrides_;
};

} // namespace surgimap
