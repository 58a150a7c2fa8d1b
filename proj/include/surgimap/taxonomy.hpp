#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace surgimap {

enum class Source { manual, ai };

std::string_view to_string(Source source);
Source parse_source(std::string_view text);

// One component tag (e.g. Instrument) and its ordered category list.
struct TagKind {
    std::string name;                    // display form, e.g. "ExtentOfStitch"
    std::string key;                     // identifier form, e.g. "extent_of_stitch"
    std::vector<std::string> categories; // normalized names

    // Index of `category` in the category list, or -1.
    int index_of(std::string_view category) const;
    std::string marker() const { return "<" + key + ">"; }

    bool operator==(const TagKind&) const = default;
};

struct TaskSchema {
    int task_id = 0;
    std::string task_name;
    std::vector<TagKind> tags; // serialization order
    std::string instruction;
    // Binary tag whose AUROC is the task's model-selection metric, if any.
    std::optional<std::string> auroc_tag;

    const TagKind* find_tag(std::string_view key) const;

    bool operator==(const TaskSchema&) const = default;
};

struct Span {
    double start_s = 0.0;
    double end_s = 0.0;

    double duration() const { return end_s - start_s; }
    bool operator==(const Span&) const = default;
};

struct ComponentAnnotation {
    int task_id = 0;
    std::map<std::string, std::string> tag_values; // tag key -> category
    Span span;
    Source source = Source::manual;
    std::map<std::string, double> confidence; // tag key -> probability; empty when absent

    bool operator==(const ComponentAnnotation&) const = default;
};

struct ValidityReport {
    std::vector<std::string> violations;

    bool ok() const { return violations.empty(); }
};

struct TagDefinition {
    std::string name;
    std::vector<std::string> categories;
};

struct TaxonomyDefinition {
    std::optional<int> task_id; // assigned automatically when empty
    std::string task_name;
    std::string instruction;
    std::vector<TagDefinition> tags;
};

// Lowercase, collapse whitespace, map the en-dash to '-'.
std::string normalize_name(std::string_view raw);
// "ExtentOfStitch" -> "extent_of_stitch", "Extent of Stitch" -> "extent_of_stitch".
std::string tag_key(std::string_view name);

// Registry of task schemas. The four built-in tasks are always present;
// custom taxonomies take ids >= 5 and never replace a built-in.
class Taxonomy {
public:
    static constexpr int kFirstCustomTask = 5;

    static Taxonomy builtin();

    const TaskSchema& schema_for_task(int task_id) const;
    bool contains(int task_id) const { return schemas_.contains(task_id); }
    std::vector<int> task_ids() const;
    std::vector<const TaskSchema*> schemas() const;

    int register_custom(const TaxonomyDefinition& definition);
    // Tab-separated definition file; returns the ids registered, in file order.
    std::vector<int> load_definition_file(const std::filesystem::path& path);

    ValidityReport validate(const ComponentAnnotation& annotation) const;

private:
    std::map<int, TaskSchema> schemas_;
};

std::vector<TaxonomyDefinition> parse_definition_text(std::string_view text);

std::size_t total_category_count(const Taxonomy& taxonomy, bool builtin_only = true);

} // namespace surgimap
