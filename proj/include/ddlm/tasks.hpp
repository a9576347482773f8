#pragma once

#include "ddlm/rng.hpp"
#include "ddlm/sequence.hpp"

#include <string>
#include <vector>

namespace ddlm {

enum class TaskKind { Copy, KeyValueExtract, Arithmetic };

inline const char* to_string(TaskKind k) {
  switch (k) {
    case TaskKind::Copy: return "copy";
    case TaskKind::KeyValueExtract: return "kv_extract";
    case TaskKind::Arithmetic: return "arithmetic";
  }
  return "?";
}

inline TaskKind task_kind_from(const std::string& s) {
  if (s == "copy") return TaskKind::Copy;
  if (s == "kv_extract") return TaskKind::KeyValueExtract;
  if (s == "arithmetic") return TaskKind::Arithmetic;
  fail("unknown task kind '" + s + "'");
}

/// Fixed symbol table shared by all tasks. Specials occupy ids 0..3 in the
/// SpecialTokens default order.
inline Vocab task_vocab() {
  Vocab v;
  v.add("[MASK]");
  v.add("[PAD]");
  v.add("[BOS]");
  v.add("[EOS]");
  for (int d = 0; d <= 9; ++d) v.add(std::to_string(d));
  for (char c = 'a'; c <= 'p'; ++c) v.add(std::string(1, c));
  v.add("copy:");
  v.add("extract:");
  v.add("date:");
  v.add("time:");
  v.add("city:");
  v.add("temp:");
  v.add("qty:");
  v.add("id:");
  v.add("code:");
  v.add("row:");
  v.add("{");
  v.add("}");
  v.add(",");
  v.add("+");
  v.add("=");
  return v;
}

struct TaskSpec {
  TaskKind kind = TaskKind::Copy;
  uint64_t seed = 1;
  int min_answer_len = 4;  // Copy: number of symbols to repeat
  int max_answer_len = 10;
  int kv_pairs = 4;  // KeyValueExtract: pairs in the prompt, incl. date/time
  int value_digits = 2;
  int filler_symbols = 0;  // KeyValueExtract: inert letters mixed into the prompt
  int max_operand = 9;     // Arithmetic: operands in [0, max_operand]

  void validate() const {
    require(min_answer_len >= 1 && max_answer_len >= min_answer_len,
            "TaskSpec: bad answer length range");
    require(kv_pairs >= 2, "TaskSpec: kv_pairs must include date and time");
    require(value_digits >= 1 && value_digits <= 4, "TaskSpec: bad value_digits");
    require(filler_symbols >= 0, "TaskSpec: filler_symbols must be >= 0");
    require(max_operand >= 0 && max_operand <= 9, "TaskSpec: operands are single digits");
  }
};

/// One training/eval sample. Multi-turn records alternate user prompt and
/// assistant answer; the generated tasks are single-turn.
struct CorpusRecord {
  struct RTurn {
    std::vector<int> prompt;
    std::vector<int> answer;
  };
  TaskKind kind = TaskKind::Copy;
  std::vector<RTurn> turns;
};

struct Corpus {
  Vocab vocab;
  SpecialTokens special;
  std::vector<CorpusRecord> samples;
};

namespace detail {

inline int digit_id(const Vocab& v, int d) { return v.id(std::to_string(d)); }

inline std::vector<int> digits_of(const Vocab& v, int value) {
  std::vector<int> out;
  for (char c : std::to_string(value)) out.push_back(v.id(std::string(1, c)));
  return out;
}

inline std::vector<int> kv_schema_answer(const Vocab& v, const std::vector<int>& date_val,
                                         const std::vector<int>& time_val) {
  std::vector<int> a = {v.id("{"), v.id("date:")};
  a.insert(a.end(), date_val.begin(), date_val.end());
  a.push_back(v.id(","));
  a.push_back(v.id("time:"));
  a.insert(a.end(), time_val.begin(), time_val.end());
  a.push_back(v.id("}"));
  return a;
}

}  // namespace detail

/// Recomputes the unique correct answer from a prompt. This is the task
/// oracle used for corpus self-checks and exact-match scoring.
inline std::vector<int> reference_answer(TaskKind kind, const Vocab& v,
                                         const std::vector<int>& prompt) {
  switch (kind) {
    case TaskKind::Copy: {
      require(!prompt.empty() && prompt[0] == v.id("copy:"), "reference: not a copy prompt");
      return {prompt.begin() + 1, prompt.end()};
    }
    case TaskKind::KeyValueExtract: {
      auto find_value = [&](const char* key) {
        const int key_id = v.id(key);
        for (size_t i = 0; i + 1 < prompt.size(); ++i) {
          if (prompt[i] == key_id) {
            std::vector<int> val;
            for (size_t j = i + 1; j < prompt.size(); ++j) {
              const std::string& text = v.text(prompt[j]);
              if (text.size() == 1 && text[0] >= '0' && text[0] <= '9')
                val.push_back(prompt[j]);
              else
                break;
            }
            return val;
          }
        }
        fail(std::string("reference: key not found: ") + key);
      };
      return detail::kv_schema_answer(v, find_value("date:"), find_value("time:"));
    }
    case TaskKind::Arithmetic: {
      require(prompt.size() == 4 && prompt[1] == v.id("+") && prompt[3] == v.id("="),
              "reference: not an arithmetic prompt");
      auto digit = [&](int tok) {
        const std::string& s = v.text(tok);
        require(s.size() == 1 && s[0] >= '0' && s[0] <= '9', "reference: bad operand");
        return s[0] - '0';
      };
      return detail::digits_of(v, digit(prompt[0]) + digit(prompt[2]));
    }
  }
  fail("reference_answer: unknown task");
}

inline CorpusRecord gen_sample(const TaskSpec& spec, const Vocab& v, Rng& rng) {
  spec.validate();
  CorpusRecord rec;
  rec.kind = spec.kind;
  CorpusRecord::RTurn turn;
  switch (spec.kind) {
    case TaskKind::Copy: {
      const int l = int(rng.uniform_int(spec.min_answer_len, spec.max_answer_len));
      turn.prompt.push_back(v.id("copy:"));
      for (int i = 0; i < l; ++i) {
        const char c = char('a' + rng.uniform_int(0, 15));
        turn.prompt.push_back(v.id(std::string(1, c)));
      }
      turn.answer = reference_answer(spec.kind, v, turn.prompt);
      break;
    }
    case TaskKind::KeyValueExtract: {
      static const char* kDistractors[] = {"city:", "temp:", "qty:", "id:", "code:", "row:"};
      auto rand_value = [&] {
        std::vector<int> val;
        for (int i = 0; i < spec.value_digits; ++i)
          val.push_back(detail::digit_id(v, int(rng.uniform_int(0, 9))));
        return val;
      };
      // date: and time: appear exactly once; distractor keys may repeat.
      std::vector<std::vector<int>> pairs;
      pairs.push_back([&] {
        std::vector<int> p = {v.id("date:")};
        auto val = rand_value();
        p.insert(p.end(), val.begin(), val.end());
        return p;
      }());
      pairs.push_back([&] {
        std::vector<int> p = {v.id("time:")};
        auto val = rand_value();
        p.insert(p.end(), val.begin(), val.end());
        return p;
      }());
      for (int i = 2; i < spec.kv_pairs; ++i) {
        std::vector<int> p = {v.id(kDistractors[rng.uniform_int(0, 5)])};
        auto val = rand_value();
        p.insert(p.end(), val.begin(), val.end());
        pairs.push_back(p);
      }
      // Filler letters stand in for long uninformative context; they mix
      // between pairs but never split one.
      for (int i = 0; i < spec.filler_symbols; ++i) {
        const char c = char('a' + rng.uniform_int(0, 15));
        pairs.push_back({v.id(std::string(1, c))});
      }
      rng.shuffle(pairs);
      turn.prompt.push_back(v.id("extract:"));
      for (const auto& p : pairs) turn.prompt.insert(turn.prompt.end(), p.begin(), p.end());
      turn.answer = reference_answer(spec.kind, v, turn.prompt);
      break;
    }
    case TaskKind::Arithmetic: {
      const int a = int(rng.uniform_int(0, spec.max_operand));
      const int b = int(rng.uniform_int(0, spec.max_operand));
      turn.prompt = {detail::digit_id(v, a), v.id("+"), detail::digit_id(v, b), v.id("=")};
      turn.answer = reference_answer(spec.kind, v, turn.prompt);
      break;
    }
  }
  rec.turns.push_back(std::move(turn));
  return rec;
}

/// Deterministic corpus of n samples; every answer is validated against the
/// reference oracle before the corpus is returned.
inline Corpus gen_corpus(const TaskSpec& spec, int n) {
  require(n >= 1, "gen_corpus: n must be >= 1");
  Corpus c;
  c.vocab = task_vocab();
  Rng rng(spec.seed);
  for (int i = 0; i < n; ++i) {
    Rng srng = rng.child(uint64_t(i));
    CorpusRecord rec = gen_sample(spec, c.vocab, srng);
    for (const auto& t : rec.turns)
      require(t.answer == reference_answer(rec.kind, c.vocab, t.prompt),
              "gen_corpus: sample failed self-check");
    c.samples.push_back(std::move(rec));
  }
  return c;
}

/// Interleaves several task corpora into one shuffled corpus.
inline Corpus mixed_corpus(const std::vector<std::pair<TaskSpec, int>>& parts, uint64_t seed) {
  Corpus c;
  c.vocab = task_vocab();
  for (const auto& [spec, n] : parts) {
    Corpus part = gen_corpus(spec, n);
    for (auto& s : part.samples) c.samples.push_back(std::move(s));
  }
  Rng rng(seed);
  rng.shuffle(c.samples);
  return c;
}

/// Splits off the trailing fraction as a held-out set.
inline std::pair<Corpus, Corpus> split_holdout(const Corpus& c, double holdout_fraction) {
  require(holdout_fraction > 0.0 && holdout_fraction < 1.0, "split_holdout: bad fraction");
  const size_t keep = size_t(double(c.samples.size()) * (1.0 - holdout_fraction));
  require(keep >= 1 && keep < c.samples.size(), "split_holdout: corpus too small");
  Corpus train, held;
  train.vocab = held.vocab = c.vocab;
  train.special = held.special = c.special;
  train.samples.assign(c.samples.begin(), c.samples.begin() + long(keep));
  held.samples.assign(c.samples.begin() + long(keep), c.samples.end());
  return {train, held};
}

/// Raw training form: each user turn is [BOS] prompt [EOS] (all Prompt),
/// each assistant turn is [BOS] answer [EOS] with the answer and EOS
/// supervised.
inline Sequence build_raw_sequence(const CorpusRecord& rec, const SpecialTokens& sp) {
  Sequence s;
  auto push = [&](int tok, Segment seg) {
    s.tokens.push_back(tok);
    s.segments.push_back(seg);
  };
  for (const auto& turn : rec.turns) {
    int b = int(s.tokens.size());
    push(sp.bos, Segment::Prompt);
    for (int tok : turn.prompt) push(tok, Segment::Prompt);
    push(sp.eos, Segment::Prompt);
    s.turns.push_back({b, int(s.tokens.size()), false});

    b = int(s.tokens.size());
    push(sp.bos, Segment::Prompt);
    for (int tok : turn.answer) push(tok, Segment::Answer);
    push(sp.eos, Segment::Answer);
    s.turns.push_back({b, int(s.tokens.size()), true});
  }
  return s;
}

/// Context handed to the decoder: the user turn plus the assistant BOS.
/// The answer window starts right after.
inline std::vector<int> decode_prompt(const CorpusRecord& rec, const SpecialTokens& sp) {
  require(rec.turns.size() == 1, "decode_prompt: expected a single-turn record");
  std::vector<int> p = {sp.bos};
  p.insert(p.end(), rec.turns[0].prompt.begin(), rec.turns[0].prompt.end());
  p.push_back(sp.eos);
  p.push_back(sp.bos);
  return p;
}

}  // namespace ddlm
