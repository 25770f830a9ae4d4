#pragma once

#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace uvlm {

using Report = std::vector<int>;  // token ids, BOS ... EOS

// Word-level vocabulary over the report template grammar.
// Special ids are fixed: PAD=0, BOS=1, EOS=2, UNK=3. The word list follows
// in a fixed order, so a vocabulary is fully determined by the class count.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  explicit Vocab(int num_classes) {
    add("<pad>");
    add("<bos>");
    add("<eos>");
    add("<unk>");
    add(".");
    add("is");
    add("no");
    add("present");
    add("seen");
    for (int k = 0; k < num_classes; ++k) add("lesion-" + std::to_string(k));
  }

  explicit Vocab(const std::vector<std::string>& words) {
    for (const auto& w : words) add(w);
  }

  int size() const { return static_cast<int>(words_.size()); }

  int id(const std::string& w) const {
    auto it = ids_.find(w);
    return it == ids_.end() ? kUnk : it->second;
  }

  const std::string& word(int id) const { return words_[static_cast<std::size_t>(id)]; }

  Report tokenize(const std::string& text) const {
    Report r{kBos};
    std::istringstream ss(text);
    std::string w;
    while (ss >> w) r.push_back(id(w));
    r.push_back(kEos);
    return r;
  }

  std::string detokenize(const Report& r) const {
    std::string out;
    for (int t : r) {
      if (t == kBos || t == kEos || t == kPad) continue;
      if (!out.empty()) out += " ";
      out += word(t);
    }
    return out;
  }

  // One token per line, line number = id.
  std::string to_file_text() const {
    std::string s;
    for (const auto& w : words_) s += w + "\n";
    return s;
  }

 private:
  void add(const std::string& w) {
    ids_[w] = static_cast<int>(words_.size());
    words_.push_back(w);
  }
  std::vector<std::string> words_;
  std::map<std::string, int> ids_;
};

}  // namespace uvlm
