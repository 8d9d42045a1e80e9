#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace sseg {

enum class WordFilter { keep_all, content_words };

/// Lowercases and splits on anything outside [a-z0-9]. content_words also
/// drops entries from the shipped stop-word list.
std::vector<std::string> extract_words(const std::string& caption, WordFilter mode);

/// The shipped English function-word list used by content_words.
const std::vector<std::string>& stop_words();

/// Word-level vocabulary with four reserved entries at fixed ids.
class Vocab {
public:
    static constexpr std::int64_t kPad = 0;
    static constexpr std::int64_t kStart = 1;
    static constexpr std::int64_t kEos = 2;
    static constexpr std::int64_t kUnk = 3;

    Vocab() = default;

    /// Builds from caption word lists: frequency-ranked (ties broken
    /// alphabetically), truncated to `cap` total entries.
    static Vocab build(const std::vector<std::vector<std::string>>& corpus, std::size_t cap = 8192);

    /// Restores from a stored word table (first four entries must be the
    /// reserved tokens, as produced by words()).
    static Vocab from_words(std::vector<std::string> words);

    std::int64_t size() const { return static_cast<std::int64_t>(words_.size()); }
    std::int64_t id_of(const std::string& w) const;  // kUnk for unknown words
    const std::string& word_of(std::int64_t id) const { return words_.at(static_cast<std::size_t>(id)); }
    const std::vector<std::string>& words() const { return words_; }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, std::int64_t> index_;
};

struct CaptionTokens {
    std::vector<std::int64_t> ids;  // length == context_length
    std::int64_t eos_index = 0;
    std::int64_t context_length = 0;
};

/// [start] + word ids + [eos], truncated so eos always fits, padded out to
/// context_length. context_length < 3 is a configuration error.
CaptionTokens tokenize(const std::vector<std::string>& words, const Vocab& vocab,
                       std::int64_t context_length);

}  // namespace sseg
