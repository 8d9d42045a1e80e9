#include "sseg/text.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <stdexcept>
#include <unordered_set>

namespace sseg {

const std::vector<std::string>& stop_words() {
    static const std::vector<std::string> list = {
        // articles, conjunctions
        "a", "an", "the", "and", "or", "but", "nor", "so", "yet", "if", "then", "than",
        "because", "while", "although", "though", "as", "until", "once",
        // prepositions
        "of", "in", "on", "at", "by", "for", "with", "about", "against", "between", "into",
        "through", "during", "before", "after", "above", "below", "to", "from", "up", "down",
        "out", "off", "over", "under", "again", "further", "near",
        // pronouns and determiners
        "i", "me", "my", "myself", "we", "our", "ours", "ourselves", "you", "your", "yours",
        "yourself", "he", "him", "his", "himself", "she", "her", "hers", "herself", "it",
        "its", "itself", "they", "them", "their", "theirs", "themselves", "what", "which",
        "who", "whom", "this", "that", "these", "those",
        // be/have/do and modals
        "am", "is", "are", "was", "were", "be", "been", "being", "have", "has", "had",
        "having", "do", "does", "did", "doing", "will", "would", "shall", "should", "can",
        "could", "may", "might", "must", "ought",
        // function adverbs and quantifiers
        "not", "no", "only", "own", "same", "too", "very", "just", "also", "ever", "never",
        "here", "there", "when", "where", "why", "how", "all", "any", "both", "each", "few",
        "more", "most", "other", "some", "such",
        // contraction fragments left by punctuation splitting
        "s", "t", "d", "ll", "m", "re", "ve",
    };
    return list;
}

std::vector<std::string> extract_words(const std::string& caption, WordFilter mode) {
    static const std::unordered_set<std::string> stops(stop_words().begin(), stop_words().end());
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (cur.empty()) return;
        if (mode == WordFilter::keep_all || stops.find(cur) == stops.end()) out.push_back(cur);
        cur.clear();
    };
    for (char ch : caption) {
        const unsigned char u = static_cast<unsigned char>(ch);
        if (std::isalnum(u))
            cur.push_back(static_cast<char>(std::tolower(u)));
        else
            flush();
    }
    flush();
    return out;
}

Vocab Vocab::build(const std::vector<std::vector<std::string>>& corpus, std::size_t cap) {
    if (cap < 5) throw std::invalid_argument("Vocab::build: cap too small for reserved tokens");
    std::map<std::string, std::int64_t> counts;  // ordered map keeps ties alphabetical
    for (const auto& words : corpus)
        for (const auto& w : words) ++counts[w];

    std::vector<std::pair<std::string, std::int64_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });

    Vocab v;
    v.words_ = {"<pad>", "<start>", "<eos>", "<unk>"};
    for (const auto& [word, count] : ranked) {
        if (v.words_.size() >= cap) break;
        v.words_.push_back(word);
    }
    for (std::size_t i = 0; i < v.words_.size(); ++i)
        v.index_[v.words_[i]] = static_cast<std::int64_t>(i);
    return v;
}

Vocab Vocab::from_words(std::vector<std::string> words) {
    if (words.size() < 4 || words[0] != "<pad>" || words[1] != "<start>" || words[2] != "<eos>" ||
        words[3] != "<unk>")
        throw std::invalid_argument("Vocab::from_words: reserved tokens missing or misplaced");
    Vocab v;
    v.words_ = std::move(words);
    for (std::size_t i = 0; i < v.words_.size(); ++i)
        v.index_[v.words_[i]] = static_cast<std::int64_t>(i);
    return v;
}

std::int64_t Vocab::id_of(const std::string& w) const {
    const auto it = index_.find(w);
    return it == index_.end() ? kUnk : it->second;
}

CaptionTokens tokenize(const std::vector<std::string>& words, const Vocab& vocab,
                       std::int64_t context_length) {
    if (context_length < 3)
        throw std::invalid_argument("tokenize: context_length must be at least 3");
    CaptionTokens t;
    t.context_length = context_length;
    t.ids.assign(static_cast<std::size_t>(context_length), Vocab::kPad);
    t.ids[0] = Vocab::kStart;
    const std::int64_t keep =
        std::min<std::int64_t>(static_cast<std::int64_t>(words.size()), context_length - 2);
    for (std::int64_t i = 0; i < keep; ++i)
        t.ids[static_cast<std::size_t>(1 + i)] = vocab.id_of(words[static_cast<std::size_t>(i)]);
    t.eos_index = 1 + keep;
    t.ids[static_cast<std::size_t>(t.eos_index)] = Vocab::kEos;
    return t;
}

}  // namespace sseg
