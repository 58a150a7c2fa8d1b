#include "surgimap/taxonomy.hpp"

#include "surgimap/errors.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

namespace surgimap {

namespace {

TagKind make_tag(std::string name, std::vector<std::string> raw_categories) {
    TagKind tag;
    tag.key = tag_key(name);
    tag.name = std::move(name);
    tag.categories.reserve(raw_categories.size());
    for (const auto& c : raw_categories) {
        tag.categories.push_back(normalize_name(c));
    }
    return tag;
}

std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) {
        return {};
    }
    auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

} // namespace

std::string_view to_string(Source source) {
    return source == Source::manual ? "manual" : "ai";
}

Source parse_source(std::string_view text) {
    if (text == "manual") {
        return Source::manual;
    }
    if (text == "ai") {
        return Source::ai;
    }
    throw ValidationError("unknown source '" + std::string(text) + "'");
}

int TagKind::index_of(std::string_view category) const {
    auto it = std::find(categories.begin(), categories.end(), category);
    return it == categories.end() ? -1 : static_cast<int>(it - categories.begin());
}

const TagKind* TaskSchema::find_tag(std::string_view key) const {
    for (const auto& t : tags) {
        if (t.key == key) {
            return &t;
        }
    }
    return nullptr;
}

std::string normalize_name(std::string_view raw) {
    // U+2013 (en dash) and U+2014 (em dash) in UTF-8.
    std::string replaced;
    replaced.reserve(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (i + 2 < raw.size() && static_cast<unsigned char>(raw[i]) == 0xE2 &&
            static_cast<unsigned char>(raw[i + 1]) == 0x80 &&
            (static_cast<unsigned char>(raw[i + 2]) == 0x93 ||
             static_cast<unsigned char>(raw[i + 2]) == 0x94)) {
            replaced.push_back('-');
            i += 2;
            continue;
        }
        replaced.push_back(raw[i]);
    }
    std::string out;
    bool pending_space = false;
    for (char ch : replaced) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
    return out;
}

std::string tag_key(std::string_view name) {
    std::string out;
    char prev = 0;
    for (char ch : name) {
        auto uc = static_cast<unsigned char>(ch);
        if (std::isalnum(uc)) {
            if (std::isupper(uc) && !out.empty() && out.back() != '_' &&
                (std::islower(static_cast<unsigned char>(prev)) ||
                 std::isdigit(static_cast<unsigned char>(prev)))) {
                out.push_back('_');
            }
            out.push_back(static_cast<char>(std::tolower(uc)));
        } else if (!out.empty() && out.back() != '_') {
            out.push_back('_');
        }
        prev = ch;
    }
    while (!out.empty() && out.back() == '_') {
        out.pop_back();
    }
    return out;
}

Taxonomy Taxonomy::builtin() {
    Taxonomy t;

    TaskSchema macro;
    macro.task_id = 1;
    macro.task_name = "macro-activity";
    macro.instruction = "map surgical macro activity";
    macro.tags = {
        make_tag("Specialty", {"Bariatric", "Cardiac", "Colorectal", "General", "Gynecology",
                               "Hepatobiliary", "Thoracic", "Urology"}),
        make_tag("Procedure",
                 {"Gastric Bypass", "Atrial Closure", "IMA Harvest", "Mitral Stitching",
                  "Right Colectomy", "Total Mesorectal Excision", "Laparoscopic Cholecystectomy",
                  "Laparoscopic Hernia", "Endometriosis", "Hysterectomy", "Myomectomy",
                  "Pancreaticoduodenectomy", "Right Middle Lobectomy", "Right Upper Lobectomy",
                  "Segmentectomy", "Prostatectomy"}),
        make_tag("Step", {"Suturing", "Dissection"}),
    };

    TaskSchema micro;
    micro.task_id = 2;
    micro.task_name = "micro-activity";
    micro.instruction = "map surgical micro activity";
    micro.tags = {
        make_tag("Action", {"Assistant", "Cold Cut", "Cautery", "Extraction", "Fluorescence",
                            "Hot Cut", "Hook", "Idle", "Clip", "Camera Move", "Mesh", "Push/Peel",
                            "Retraction", "Spread", "Sponge", "Stapler", "Tube", "Tug", "Other"}),
        make_tag("Arm", {"Left", "Right", "Both"}),
        make_tag("Instrument",
                 {"Bipolar Dissector", "Bipolar Forceps", "Bipolar Forceps–Cautery Hook",
                  "Bipolar Forceps–Monopolar Scissors", "Bipolar Forceps–Vessel Sealer",
                  "Bipolar Grasper", "Bipolar Grasper–Monopolar Scissors", "Cadiere Forceps",
                  "Cadiere Forceps–Bipolar Grasper", "Cautery Spatula", "Cautery Hook",
                  "Clip Applier", "Clipper", "Fenestrated Forceps", "Fenestrated Grasper",
                  "Fenestrated Grasper–Bipolar Grasper", "Grasper", "Hook Monopolar",
                  "Maryland Grasper", "Monopolar Scissors", "Needle Driver", "Prograsp Forceps",
                  "Scissors", "Shears", "Stapler", "Suction", "Vessel Sealer"}),
    };

    TaskSchema proficiency;
    proficiency.task_id = 3;
    proficiency.task_name = "proficiency";
    proficiency.instruction = "assess suturing proficiency";
    proficiency.tags = {
        make_tag("Phase", {"Needle Handling", "Driving", "Withdrawal"}),
        make_tag("Proficiency", {"Low", "High"}),
    };
    proficiency.auroc_tag = "proficiency";

    TaskSchema context;
    context.task_id = 4;
    context.task_name = "context";
    context.instruction = "map suturing context";
    context.tags = {
        make_tag("Anatomy",
                 {"Bile Duct", "Bile Duct–Small Intestine", "Bladder", "Bladder–Urethra",
                  "Colon", "Left Atrium", "Mitral Annulus", "Pancreas",
                  "Pancreas–Small Intestine", "Peritoneum", "Small Intestine",
                  "Small Intestine–Bile Duct", "Small Intestine–Stomach", "Stomach",
                  "Stomach–Small Intestine", "Urethra", "Uterus", "Vagina"}),
        make_tag("ExtentOfStitch", {"Single", "Double", "Surface"}),
        make_tag("Directionality", {"In", "Out", "Both"}),
    };

    for (auto* s : {&macro, &micro, &proficiency, &context}) {
        t.schemas_.emplace(s->task_id, std::move(*s));
    }
    return t;
}

const TaskSchema& Taxonomy::schema_for_task(int task_id) const {
    auto it = schemas_.find(task_id);
    if (it == schemas_.end()) {
        throw NotFoundError("unknown task id " + std::to_string(task_id));
    }
    return it->second;
}

std::vector<int> Taxonomy::task_ids() const {
    std::vector<int> ids;
    for (const auto& [id, _] : schemas_) {
        ids.push_back(id);
    }
    return ids;
}

std::vector<const TaskSchema*> Taxonomy::schemas() const {
    std::vector<const TaskSchema*> out;
    for (const auto& [_, s] : schemas_) {
        out.push_back(&s);
    }
    return out;
}

int Taxonomy::register_custom(const TaxonomyDefinition& definition) {
    int id = 0;
    if (definition.task_id) {
        id = *definition.task_id;
        if (id < kFirstCustomTask) {
            throw ValidationError("custom task id " + std::to_string(id) + " collides with built-ins");
        }
        if (schemas_.contains(id)) {
            throw ValidationError("task id " + std::to_string(id) + " already registered");
        }
    } else {
        id = kFirstCustomTask;
        while (schemas_.contains(id)) {
            ++id;
        }
    }
    if (definition.tags.empty()) {
        throw ValidationError("custom taxonomy needs at least one tag");
    }

    TaskSchema schema;
    schema.task_id = id;
    schema.task_name = definition.task_name.empty() ? "task " + std::to_string(id)
                                                    : normalize_name(definition.task_name);
    schema.instruction = definition.instruction.empty() ? "map task " + std::to_string(id)
                                                        : normalize_name(definition.instruction);
    if (schema.instruction.find_first_of("<>") != std::string::npos) {
        throw ValidationError("instruction may not contain '<' or '>'");
    }

    std::set<std::string> tag_keys;
    for (const auto& def : definition.tags) {
        auto tag = make_tag(trim(def.name), def.categories);
        if (tag.key.empty()) {
            throw ValidationError("empty tag name");
        }
        if (tag.key == "eos" || tag.key == "pad") {
            throw ValidationError("reserved tag name '" + def.name + "'");
        }
        if (!tag_keys.insert(tag.key).second) {
            throw ValidationError("duplicate tag name '" + def.name + "'");
        }
        if (tag.categories.size() < 2) {
            throw ValidationError("tag '" + def.name + "' needs at least two categories");
        }
        std::set<std::string> seen;
        for (const auto& c : tag.categories) {
            if (c.empty()) {
                throw ValidationError("empty category in tag '" + def.name + "'");
            }
            if (c.find_first_of("<>") != std::string::npos) {
                throw ValidationError("category '" + c + "' may not contain '<' or '>'");
            }
            if (!seen.insert(c).second) {
                throw ValidationError("duplicate category '" + c + "' in tag '" + def.name + "'");
            }
        }
        schema.tags.push_back(std::move(tag));
    }
    schemas_.emplace(id, std::move(schema));
    return id;
}

std::vector<TaxonomyDefinition> parse_definition_text(std::string_view text) {
    std::vector<TaxonomyDefinition> out;
    std::map<int, std::size_t> index;
    std::istringstream in{std::string(text)};
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        auto stripped = trim(line);
        if (stripped.empty() || stripped.front() == '#') {
            continue;
        }
        std::vector<std::string> fields;
        std::stringstream ls(line);
        std::string field;
        while (std::getline(ls, field, '\t')) {
            fields.push_back(trim(field));
        }
        if (fields.size() != 3) {
            throw FormatError("line " + std::to_string(line_no) + ": expected 3 tab-separated fields");
        }
        int task_id = 0;
        try {
            std::size_t used = 0;
            task_id = std::stoi(fields[0], &used);
            if (used != fields[0].size()) {
                throw std::invalid_argument("trailing");
            }
        } catch (const std::exception&) {
            throw FormatError("line " + std::to_string(line_no) + ": bad task id '" + fields[0] + "'");
        }
        auto [it, inserted] = index.emplace(task_id, out.size());
        if (inserted) {
            TaxonomyDefinition def;
            def.task_id = task_id;
            out.push_back(std::move(def));
        }
        auto& def = out[it->second];
        if (fields[1] == "@instruction") {
            def.instruction = fields[2];
        } else if (fields[1] == "@name") {
            def.task_name = fields[2];
        } else {
            TagDefinition tag;
            tag.name = fields[1];
            std::stringstream cs(fields[2]);
            std::string category;
            while (std::getline(cs, category, ',')) {
                tag.categories.push_back(trim(category));
            }
            def.tags.push_back(std::move(tag));
        }
    }
    return out;
}

std::vector<int> Taxonomy::load_definition_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open taxonomy file " + path.string());
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    std::vector<int> ids;
    for (const auto& def : parse_definition_text(buffer.str())) {
        ids.push_back(register_custom(def));
    }
    return ids;
}

ValidityReport Taxonomy::validate(const ComponentAnnotation& annotation) const {
    ValidityReport report;
    auto it = schemas_.find(annotation.task_id);
    if (it == schemas_.end()) {
        report.violations.push_back("unknown task " + std::to_string(annotation.task_id));
        return report;
    }
    const auto& schema = it->second;
    for (const auto& tag : schema.tags) {
        auto value = annotation.tag_values.find(tag.key);
        if (value == annotation.tag_values.end()) {
            report.violations.push_back("missing tag " + tag.name);
        } else if (tag.index_of(value->second) < 0) {
            report.violations.push_back("unknown category '" + value->second + "' for tag " +
                                        tag.name);
        }
    }
    for (const auto& [key, _] : annotation.tag_values) {
        if (!schema.find_tag(key)) {
            report.violations.push_back("unexpected tag " + key);
        }
    }
    for (const auto& [key, p] : annotation.confidence) {
        if (!(p >= 0.0 && p <= 1.0)) {
            report.violations.push_back("confidence for " + key + " outside [0,1]");
        }
    }
    const auto& span = annotation.span;
    if (!(span.start_s >= 0.0)) {
        report.violations.push_back("negative start");
    }
    if (!(span.start_s < span.end_s)) {
        report.violations.push_back("empty span");
    }
    return report;
}

std::size_t total_category_count(const Taxonomy& taxonomy, bool builtin_only) {
    std::size_t total = 0;
    for (const auto* schema : taxonomy.schemas()) {
        if (builtin_only && schema->task_id >= Taxonomy::kFirstCustomTask) {
            continue;
        }
        for (const auto& tag : schema->tags) {
            total += tag.categories.size();
        }
    }
    return total;
}

} // namespace surgimap
