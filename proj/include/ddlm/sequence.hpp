#pragma once

#include "ddlm/common.hpp"

#include <map>
#include <string>
#include <vector>

namespace ddlm {

enum class Segment : uint8_t { Prompt, Answer, Pad };

struct Turn {
  int begin = 0;  // token index, inclusive
  int end = 0;    // token index, exclusive
  bool assistant = false;
};

/// A token sequence split into prompt/answer/pad segments, with turn
/// boundaries for multi-turn samples.
struct Sequence {
  std::vector<int> tokens;
  std::vector<Segment> segments;
  std::vector<Turn> turns;

  int size() const { return int(tokens.size()); }

  std::vector<int> positions_of(Segment s) const {
    std::vector<int> out;
    for (int i = 0; i < size(); ++i)
      if (segments[i] == s) out.push_back(i);
    return out;
  }

  /// Answer and Pad positions: the slots the noising process may touch.
  std::vector<int> maskable_positions() const {
    std::vector<int> out;
    for (int i = 0; i < size(); ++i)
      if (segments[i] != Segment::Prompt) out.push_back(i);
    return out;
  }

  void validate(int vocab_size) const {
    require(tokens.size() == segments.size(), "Sequence: tokens/segments length mismatch");
    for (int t : tokens)
      require(t >= 0 && t < vocab_size, "Sequence: token id out of range");
    int prev_end = 0;
    for (const Turn& t : turns) {
      require(t.begin == prev_end && t.end > t.begin && t.end <= size(),
              "Sequence: turns must tile the token list");
      prev_end = t.end;
    }
    if (!turns.empty()) require(prev_end == size(), "Sequence: turns do not cover all tokens");
    // Pad only trails the answer of its turn.
    for (const Turn& t : turns) {
      bool saw_pad = false;
      for (int i = t.begin; i < t.end; ++i) {
        if (segments[i] == Segment::Pad) saw_pad = true;
        else require(!saw_pad, "Sequence: non-pad token after pad within a turn");
      }
    }
  }
};

/// Token id <-> display text. Ids 0..size-1 in table order; symbol strings
/// are unique, which makes text round-trips lossless.
struct Vocab {
  std::vector<std::string> symbols;
  std::map<std::string, int> index;

  int add(const std::string& s) {
    require(index.find(s) == index.end(), "Vocab: duplicate symbol " + s);
    index[s] = int(symbols.size());
    symbols.push_back(s);
    return int(symbols.size()) - 1;
  }

  int size() const { return int(symbols.size()); }

  const std::string& text(int id) const {
    require(id >= 0 && id < size(), "Vocab: id out of range");
    return symbols[size_t(id)];
  }

  int id(const std::string& s) const {
    auto it = index.find(s);
    require(it != index.end(), "Vocab: unknown symbol '" + s + "'");
    return it->second;
  }

  bool contains(const std::string& s) const { return index.find(s) != index.end(); }
};

}  // namespace ddlm
