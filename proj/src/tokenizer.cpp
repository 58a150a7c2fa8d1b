#include "surgimap/tokenizer.hpp"

#include "surgimap/errors.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace surgimap {

std::optional<TokenId> Vocabulary::find(std::string_view word) const {
    auto it = index_.find(std::string(word));
    if (it == index_.end()) {
        return std::nullopt;
    }
    return it->second;
}

std::size_t Vocabulary::instruction_size() const {
    return static_cast<std::size_t>(
        std::count_if(flags_.begin(), flags_.end(), [](auto f) { return (f & kInstruction) != 0; }));
}

TokenId Vocabulary::add(const std::string& word, std::uint8_t flag) {
    auto it = index_.find(word);
    if (it != index_.end()) {
        flags_[static_cast<std::size_t>(it->second)] |= flag;
        return it->second;
    }
    auto id = static_cast<TokenId>(words_.size());
    words_.push_back(word);
    flags_.push_back(flag);
    index_.emplace(word, id);
    return id;
}

void Vocabulary::finalize() {
    local_.assign(words_.size(), -1);
    annotation_ids_.clear();
    for (std::size_t i = 0; i < words_.size(); ++i) {
        if ((flags_[i] & kAnnotation) != 0) {
            local_[i] = static_cast<int>(annotation_ids_.size());
            annotation_ids_.push_back(static_cast<TokenId>(i));
        }
    }
}

std::string Vocabulary::serialize() const {
    std::ostringstream out;
    out << "SMVOCAB 1\n";
    for (std::size_t i = 0; i < words_.size(); ++i) {
        std::string f;
        if ((flags_[i] & kInstruction) != 0) {
            f += 'I';
        }
        if ((flags_[i] & kAnnotation) != 0) {
            f += 'A';
        }
        out << i << '\t' << words_[i] << '\t' << f << '\n';
    }
    return out.str();
}

Vocabulary Vocabulary::parse(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line) || line != "SMVOCAB 1") {
        throw FormatError("vocabulary: missing 'SMVOCAB 1' header");
    }
    Vocabulary v;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        auto t1 = line.find('\t');
        auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
        if (t2 == std::string::npos) {
            throw FormatError("vocabulary line " + std::to_string(line_no) + ": expected 3 fields");
        }
        auto id = std::stoul(line.substr(0, t1));
        if (id != v.words_.size()) {
            throw FormatError("vocabulary line " + std::to_string(line_no) + ": ids must be dense");
        }
        std::string word = line.substr(t1 + 1, t2 - t1 - 1);
        std::uint8_t flag = 0;
        for (char c : line.substr(t2 + 1)) {
            if (c == 'I') {
                flag |= kInstruction;
            } else if (c == 'A') {
                flag |= kAnnotation;
            } else {
                throw FormatError("vocabulary line " + std::to_string(line_no) + ": bad flag");
            }
        }
        if (v.index_.contains(word)) {
            throw FormatError("vocabulary line " + std::to_string(line_no) + ": duplicate word");
        }
        v.add(word, flag);
    }
    if (v.size() < 2 || v.words_[kPad] != "<pad>" || v.words_[kEos] != "<eos>") {
        throw FormatError("vocabulary: <pad> and <eos> must be ids 0 and 1");
    }
    v.finalize();
    return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write vocabulary " + path.string());
    }
    out << serialize();
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open vocabulary " + path.string());
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse(buffer.str());
}

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string current;
    for (char ch : text) {
        if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r') {
            if (!current.empty()) {
                words.push_back(std::move(current));
                current.clear();
            }
        } else {
            current.push_back(ch);
        }
    }
    if (!current.empty()) {
        words.push_back(std::move(current));
    }
    return words;
}

Vocabulary build_vocab(const std::vector<const TaskSchema*>& schemas) {
    if (schemas.empty()) {
        throw ValidationError("build_vocab: no task schemas");
    }
    Vocabulary v;
    v.add("<pad>", Vocabulary::kInstruction);
    v.add("<eos>", Vocabulary::kAnnotation);
    for (const auto* schema : schemas) {
        for (const auto& tag : schema->tags) {
            v.add(tag.marker(), Vocabulary::kAnnotation);
        }
    }
    for (const auto* schema : schemas) {
        for (const auto& word : split_words(normalize_name(schema->instruction))) {
            v.add(word, Vocabulary::kInstruction);
        }
    }
    for (const auto* schema : schemas) {
        for (const auto& tag : schema->tags) {
            for (const auto& category : tag.categories) {
                for (const auto& word : split_words(category)) {
                    v.add(word, Vocabulary::kAnnotation);
                }
            }
        }
    }
    v.finalize();
    return v;
}

Vocabulary build_vocab(const Taxonomy& taxonomy) {
    return build_vocab(taxonomy.schemas());
}

TokenSequence encode_instruction(const Vocabulary& vocab, std::string_view text, int slots) {
    auto words = split_words(normalize_name(text));
    if (static_cast<int>(words.size()) > slots) {
        throw ValidationError("instruction has " + std::to_string(words.size()) +
                              " words but only " + std::to_string(slots) + " slots");
    }
    TokenSequence seq;
    seq.kind = SequenceKind::instruction;
    for (const auto& w : words) {
        auto id = vocab.find(w);
        if (!id || !vocab.in_instruction(*id)) {
            throw NotFoundError("instruction word '" + w + "' is out of vocabulary");
        }
        seq.ids.push_back(*id);
    }
    seq.ids.resize(static_cast<std::size_t>(slots), Vocabulary::kPad);
    return seq;
}

TokenSequence encode_tags(const Vocabulary& vocab, const Taxonomy& taxonomy,
                          const ComponentAnnotation& annotation) {
    auto report = taxonomy.validate(annotation);
    if (!report.ok()) {
        throw ValidationError("invalid annotation: " + report.violations.front());
    }
    const auto& schema = taxonomy.schema_for_task(annotation.task_id);
    TokenSequence seq;
    seq.kind = SequenceKind::annotation;
    auto lookup = [&](const std::string& w) {
        auto id = vocab.find(w);
        if (!id || !vocab.in_annotation(*id)) {
            throw NotFoundError("annotation word '" + w + "' is out of vocabulary");
        }
        return *id;
    };
    for (const auto& tag : schema.tags) {
        seq.ids.push_back(lookup(tag.marker()));
        for (const auto& w : split_words(annotation.tag_values.at(tag.key))) {
            seq.ids.push_back(lookup(w));
        }
    }
    seq.ids.push_back(Vocabulary::kEos);
    return seq;
}

DecodeResult decode_tags(const Vocabulary& vocab, const TaskSchema& schema,
                         const std::vector<TokenId>& ids) {
    DecodeResult result;
    auto fail = [&](std::string why) {
        result.failure = std::move(why);
        return result;
    };
    auto is_marker = [&](TokenId id) {
        const auto& w = vocab.word(id);
        return w.size() > 2 && w.front() == '<' && w.back() == '>' && id != Vocabulary::kEos &&
               id != Vocabulary::kPad;
    };

    ComponentAnnotation ann;
    ann.task_id = schema.task_id;
    std::size_t pos = 0;
    for (std::size_t k = 0; k < schema.tags.size(); ++k) {
        const auto& tag = schema.tags[k];
        if (pos >= ids.size()) {
            return fail("unterminated");
        }
        TokenId id = ids[pos];
        if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) {
            return fail("token id " + std::to_string(id) + " out of range");
        }
        if (vocab.word(id) != tag.marker()) {
            if (is_marker(id)) {
                bool in_schema = false;
                for (const auto& other : schema.tags) {
                    in_schema = in_schema || vocab.word(id) == other.marker();
                }
                return fail(in_schema ? "tag order" : "unexpected marker " + vocab.word(id));
            }
            if (id == Vocabulary::kEos) {
                return fail("missing tag " + tag.name);
            }
            return fail("expected marker " + tag.marker());
        }
        ++pos;
        std::string category;
        while (pos < ids.size()) {
            TokenId w = ids[pos];
            if (w < 0 || static_cast<std::size_t>(w) >= vocab.size()) {
                return fail("token id " + std::to_string(w) + " out of range");
            }
            if (w == Vocabulary::kEos || is_marker(w)) {
                break;
            }
            if (!vocab.in_annotation(w)) {
                return fail("non-annotation token '" + vocab.word(w) + "'");
            }
            if (!category.empty()) {
                category.push_back(' ');
            }
            category += vocab.word(w);
            ++pos;
        }
        if (category.empty()) {
            return fail(pos >= ids.size() ? "unterminated" : "empty category for tag " + tag.name);
        }
        if (tag.index_of(category) < 0) {
            return fail("unknown category '" + category + "' for tag " + tag.name);
        }
        ann.tag_values.emplace(tag.key, std::move(category));
    }
    if (pos >= ids.size()) {
        return fail("unterminated");
    }
    if (ids[pos] != Vocabulary::kEos) {
        return fail(is_marker(ids[pos]) ? "tag order" : "expected <eos>");
    }
    if (pos + 1 != ids.size()) {
        return fail("tokens after <eos>");
    }
    result.annotation = std::move(ann);
    return result;
}

int longest_serialization(const TaskSchema& schema) {
    int total = 1; // <eos>
    for (const auto& tag : schema.tags) {
        std::size_t longest = 0;
        for (const auto& c : tag.categories) {
            longest = std::max(longest, split_words(c).size());
        }
        total += 1 + static_cast<int>(longest);
    }
    return total;
}

int max_generated_length(const Taxonomy& taxonomy) {
    int longest = 0;
    for (const auto* schema : taxonomy.schemas()) {
        longest = std::max(longest, longest_serialization(*schema));
    }
    return longest + 2;
}

SchemaGrammar::SchemaGrammar(const Vocabulary& vocab, const TaskSchema& schema) {
    auto lookup = [&](const std::string& w) {
        auto id = vocab.find(w);
        if (!id || !vocab.in_annotation(*id)) {
            throw NotFoundError("annotation word '" + w + "' is out of vocabulary");
        }
        return *id;
    };
    for (const auto& tag : schema.tags) {
        markers_.push_back(lookup(tag.marker()));
        auto& cats = categories_.emplace_back();
        for (const auto& c : tag.categories) {
            auto& words = cats.emplace_back();
            for (const auto& w : split_words(c)) {
                words.push_back(lookup(w));
            }
        }
    }
}

const std::vector<TokenId>& SchemaGrammar::category_tokens(std::size_t tag_index,
                                                          int category) const {
    return categories_.at(tag_index).at(static_cast<std::size_t>(category));
}

std::vector<TokenId> SchemaGrammar::allowed_next(const std::vector<TokenId>& prefix) const {
    std::vector<TokenId> allowed;
    std::size_t pos = 0;
    for (std::size_t k = 0; k < markers_.size(); ++k) {
        if (pos == prefix.size()) {
            return {markers_[k]};
        }
        if (prefix[pos] != markers_[k]) {
            return {};
        }
        ++pos;
        // Words emitted so far for this tag: up to the next marker or <eos>.
        TokenId next_marker = k + 1 < markers_.size() ? markers_[k + 1] : Vocabulary::kEos;
        std::size_t begin = pos;
        while (pos < prefix.size() && prefix[pos] != next_marker) {
            ++pos;
        }
        std::vector<TokenId> words(prefix.begin() + static_cast<std::ptrdiff_t>(begin),
                                   prefix.begin() + static_cast<std::ptrdiff_t>(pos));
        bool complete = false;
        bool any_prefix = false;
        for (const auto& cat : categories_[k]) {
            if (cat.size() < words.size() || !std::equal(words.begin(), words.end(), cat.begin())) {
                continue;
            }
            any_prefix = true;
            if (cat.size() == words.size()) {
                complete = true;
            } else if (pos == prefix.size()) {
                allowed.push_back(cat[words.size()]);
            }
        }
        if (!any_prefix) {
            return {};
        }
        if (pos == prefix.size()) {
            if (complete) {
                allowed.push_back(next_marker);
            }
            std::sort(allowed.begin(), allowed.end());
            allowed.erase(std::unique(allowed.begin(), allowed.end()), allowed.end());
            return allowed;
        }
        if (!complete) {
            return {};
        }
    }
    // Every tag consumed; the prefix ends with <eos> (pos points at it).
    return {};
}

} // namespace surgimap
