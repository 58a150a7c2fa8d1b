#pragma once

#include "surgimap/taxonomy.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace surgimap {

using TokenId = int;

enum class SequenceKind { instruction, annotation };

struct TokenSequence {
    std::vector<TokenId> ids;
    SequenceKind kind = SequenceKind::annotation;

    bool operator==(const TokenSequence&) const = default;
};

// Unified word vocabulary V = V_I ∪ V_A. Ids are dense; the annotation subset
// additionally has a dense "local" index used by the output head.
class Vocabulary {
public:
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kEos = 1;
    static constexpr std::uint8_t kInstruction = 1;
    static constexpr std::uint8_t kAnnotation = 2;

    std::size_t size() const { return words_.size(); }
    const std::string& word(TokenId id) const { return words_.at(static_cast<std::size_t>(id)); }
    std::optional<TokenId> find(std::string_view word) const;
    std::uint8_t flags(TokenId id) const { return flags_.at(static_cast<std::size_t>(id)); }
    bool in_instruction(TokenId id) const { return (flags(id) & kInstruction) != 0; }
    bool in_annotation(TokenId id) const { return (flags(id) & kAnnotation) != 0; }

    std::size_t annotation_size() const { return annotation_ids_.size(); }
    std::size_t instruction_size() const;
    // -1 when `id` is not in V_A.
    int to_local(TokenId id) const { return local_.at(static_cast<std::size_t>(id)); }
    TokenId to_global(int local) const { return annotation_ids_.at(static_cast<std::size_t>(local)); }
    const std::vector<TokenId>& annotation_ids() const { return annotation_ids_; }

    std::string serialize() const;
    static Vocabulary parse(std::string_view text);
    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);

    bool operator==(const Vocabulary& other) const {
        return words_ == other.words_ && flags_ == other.flags_;
    }

private:
    friend Vocabulary build_vocab(const std::vector<const TaskSchema*>& schemas);
    TokenId add(const std::string& word, std::uint8_t flag);
    void finalize();

    std::vector<std::string> words_;
    std::vector<std::uint8_t> flags_;
    std::unordered_map<std::string, TokenId> index_;
    std::vector<int> local_;
    std::vector<TokenId> annotation_ids_;
};

std::vector<std::string> split_words(std::string_view text);

// Specials (<pad>, <eos>, tag markers) first, then instruction words in
// first-seen order, then category words in schema order.
Vocabulary build_vocab(const std::vector<const TaskSchema*>& schemas);
Vocabulary build_vocab(const Taxonomy& taxonomy);

TokenSequence encode_instruction(const Vocabulary& vocab, std::string_view text, int slots);
TokenSequence encode_tags(const Vocabulary& vocab, const Taxonomy& taxonomy,
                          const ComponentAnnotation& annotation);

struct DecodeResult {
    std::optional<ComponentAnnotation> annotation;
    std::string failure; // first violation when `annotation` is empty

    bool ok() const { return annotation.has_value(); }
};

// Inverse of encode_tags. Span and source are left default; callers fill them.
DecodeResult decode_tags(const Vocabulary& vocab, const TaskSchema& schema,
                         const std::vector<TokenId>& ids);

// Tokens in the longest serialization of `schema` (markers + words + <eos>).
int longest_serialization(const TaskSchema& schema);
// Generation budget: longest serialization over all schemas plus two tokens.
int max_generated_length(const Taxonomy& taxonomy);

// Serialization grammar of one schema, used for constrained decoding.
class SchemaGrammar {
public:
    SchemaGrammar(const Vocabulary& vocab, const TaskSchema& schema);

    // Admissible next tokens after `prefix` (sorted by id). Empty once <eos>
    // has been emitted or the prefix is already off-grammar.
    std::vector<TokenId> allowed_next(const std::vector<TokenId>& prefix) const;
    // Token ids of the words of `category` under tag `tag_index`.
    const std::vector<TokenId>& category_tokens(std::size_t tag_index, int category) const;
    TokenId marker(std::size_t tag_index) const { return markers_.at(tag_index); }
    std::size_t tag_count() const { return markers_.size(); }

private:
    std::vector<TokenId> markers_;
    std::vector<std::vector<std::vector<TokenId>>> categories_; // tag -> category -> words
};

} // namespace surgimap
