#pragma once

// Closed-vocabulary tokenizer. The vocabulary ships as a versioned text
// file: one token per line, line index = token id, specials first in the
// fixed order [PAD],[BOS],[EOS],[UNK],[REF#1..6].

#include <algorithm>
#include <cctype>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmtryon/errors.hpp"

namespace mmtryon::instruction {

struct Vocabulary {
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;
    static constexpr int kRefBase = 4;  // [REF#1] = 4 ... [REF#6] = 9
    static constexpr int kMaxRefTokens = 6;

    std::vector<std::string> words;
    std::unordered_map<std::string, int> index;

    static Vocabulary load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw FormatError("vocabulary: cannot open " + path);
        Vocabulary v;
        std::string line;
        while (std::getline(in, line)) {
            while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
            if (line.empty()) continue;
            v.index.emplace(line, static_cast<int>(v.words.size()));
            v.words.push_back(line);
        }
        static const char* specials[] = {"[PAD]", "[BOS]", "[EOS]", "[UNK]", "[REF#1]",
                                         "[REF#2]", "[REF#3]", "[REF#4]", "[REF#5]", "[REF#6]"};
        if (v.words.size() < 10) throw FormatError("vocabulary: missing special tokens");
        for (int i = 0; i < 10; ++i)
            if (v.words[static_cast<size_t>(i)] != specials[i])
                throw FormatError("vocabulary: special token order violated at line " +
                                  std::to_string(i) + " (" + v.words[static_cast<size_t>(i)] + ")");
        return v;
    }

    int size() const { return static_cast<int>(words.size()); }
    int id_of(const std::string& w) const {
        auto it = index.find(w);
        return it == index.end() ? kUnk : it->second;
    }
    const std::string& word(int id) const { return words[static_cast<size_t>(id)]; }
    static int ref_id(int ref_index) { return kRefBase + ref_index - 1; }
    static bool is_ref(int id) { return id >= kRefBase && id < kRefBase + kMaxRefTokens; }
};

class Tokenizer {
public:
    Tokenizer(Vocabulary vocab, int max_len = 32) : vocab_(std::move(vocab)), max_len_(max_len) {}

    const Vocabulary& vocab() const { return vocab_; }
    int max_len() const { return max_len_; }

    // Lowercase whitespace/punctuation split; unknown words become [UNK];
    // "[ref#N]" survives as an atomic placeholder token. Output is padded
    // or truncated to max_len with [BOS]/[EOS] framing.
    std::vector<int> tokenize(const std::string& text) const {
        std::vector<int> ids{Vocabulary::kBos};
        for (const std::string& piece : split(text)) {
            if (static_cast<int>(ids.size()) >= max_len_ - 1) break;
            ids.push_back(vocab_.id_of(piece));
        }
        ids.push_back(Vocabulary::kEos);
        while (static_cast<int>(ids.size()) < max_len_) ids.push_back(Vocabulary::kPad);
        ids.resize(static_cast<size_t>(max_len_));
        return ids;
    }

    // Inverse of tokenize on in-vocabulary text: renders words, keeps
    // placeholders in their bracket form, drops framing/padding. No space
    // is emitted before punctuation.
    std::string detokenize(const std::vector<int>& ids) const {
        std::string out;
        for (int id : ids) {
            if (id == Vocabulary::kPad || id == Vocabulary::kBos || id == Vocabulary::kEos) continue;
            const std::string& w = vocab_.word(id);
            bool punct = (w == "," || w == ".");
            if (!out.empty() && !punct) out += ' ';
            out += w;
        }
        return out;
    }

    // Raw token pieces (lowercased), before vocabulary lookup.
    static std::vector<std::string> split(const std::string& text) {
        std::string s;
        s.reserve(text.size());
        for (char c : text) s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        std::vector<std::string> out;
        size_t i = 0;
        auto word_char = [](char c) {
            return std::isalnum(static_cast<unsigned char>(c)) || c == '#' || c == '-';
        };
        while (i < s.size()) {
            char c = s[i];
            if (std::isspace(static_cast<unsigned char>(c))) {
                ++i;
                continue;
            }
            if (c == '[') {
                size_t j = s.find(']', i);
                if (j != std::string::npos) {
                    std::string token = s.substr(i, j - i + 1);
                    if (token.rfind("[ref#", 0) == 0) {
                        // normalize to the canonical uppercase form
                        std::string canon = "[REF#" + token.substr(5);
                        canon.pop_back();
                        canon += "]";
                        out.push_back(canon);
                        i = j + 1;
                        continue;
                    }
                }
                ++i;  // stray bracket
                continue;
            }
            if (word_char(c)) {
                size_t j = i;
                while (j < s.size() && word_char(s[j])) ++j;
                out.push_back(s.substr(i, j - i));
                i = j;
                continue;
            }
            out.push_back(std::string(1, c));  // punctuation as its own piece
            ++i;
        }
        return out;
    }

private:
    Vocabulary vocab_;
    int max_len_;
};

}  // namespace mmtryon::instruction
