#include <catch2/catch_amalgamated.hpp>

#include "ddlm/harness.hpp"
#include "ddlm/render.hpp"

#include <set>

using namespace ddlm;

namespace {

ModelConfig harness_config(int vocab) {
  ModelConfig cfg;
  cfg.vocab_size = vocab;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_model = 16;
  cfg.d_ff = 32;
  cfg.max_seq_len = 64;
  return cfg;
}

std::vector<int> ids(const Vocab& v, const std::vector<std::string>& words) {
  std::vector<int> out;
  for (const auto& w : words) out.push_back(v.id(w));
  return out;
}

}  // namespace

TEST_CASE("reference answers match the task definitions") {
  Vocab v = task_vocab();

  REQUIRE(reference_answer(TaskKind::Copy, v, ids(v, {"copy:", "a", "b", "c"})) ==
          ids(v, {"a", "b", "c"}));

  REQUIRE(reference_answer(TaskKind::Arithmetic, v, ids(v, {"3", "+", "4", "="})) ==
          ids(v, {"7"}));
  REQUIRE(reference_answer(TaskKind::Arithmetic, v, ids(v, {"9", "+", "9", "="})) ==
          ids(v, {"1", "8"}));

  const auto prompt =
      ids(v, {"extract:", "qty:", "5", "5", "time:", "4", "7", "date:", "1", "8"});
  REQUIRE(reference_answer(TaskKind::KeyValueExtract, v, prompt) ==
          ids(v, {"{", "date:", "1", "8", ",", "time:", "4", "7", "}"}));
}

TEST_CASE("gen_corpus is deterministic, self-checked, and splittable") {
  TaskSpec spec;
  spec.kind = TaskKind::KeyValueExtract;
  spec.seed = 123;
  spec.kv_pairs = 4;
  Corpus a = gen_corpus(spec, 50);
  Corpus b = gen_corpus(spec, 50);
  REQUIRE(a.samples.size() == 50);
  for (size_t i = 0; i < a.samples.size(); ++i) {
    REQUIRE(a.samples[i].turns[0].prompt == b.samples[i].turns[0].prompt);
    REQUIRE(a.samples[i].turns[0].answer == b.samples[i].turns[0].answer);
    // kv answers share the fixed schema
    const auto& ans = a.samples[i].turns[0].answer;
    REQUIRE(ans.front() == a.vocab.id("{"));
    REQUIRE(ans.back() == a.vocab.id("}"));
  }

  auto [train, held] = split_holdout(a, 0.1);
  REQUIRE(train.samples.size() == 45);
  REQUIRE(held.samples.size() == 5);
}

TEST_CASE("mixed corpus interleaves tasks deterministically") {
  TaskSpec copy;
  copy.kind = TaskKind::Copy;
  copy.seed = 1;
  TaskSpec arith;
  arith.kind = TaskKind::Arithmetic;
  arith.seed = 2;
  Corpus m1 = mixed_corpus({{copy, 20}, {arith, 20}}, 5);
  Corpus m2 = mixed_corpus({{copy, 20}, {arith, 20}}, 5);
  REQUIRE(m1.samples.size() == 40);
  int n_copy = 0, n_arith = 0;
  for (size_t i = 0; i < m1.samples.size(); ++i) {
    REQUIRE(m1.samples[i].kind == m2.samples[i].kind);
    REQUIRE(m1.samples[i].turns[0].prompt == m2.samples[i].turns[0].prompt);
    n_copy += m1.samples[i].kind == TaskKind::Copy;
    n_arith += m1.samples[i].kind == TaskKind::Arithmetic;
  }
  REQUIRE(n_copy == 20);
  REQUIRE(n_arith == 20);
  // shuffled, not blocked
  bool interleaved = false;
  for (size_t i = 1; i < 20; ++i)
    if (m1.samples[i].kind != m1.samples[0].kind) interleaved = true;
  REQUIRE(interleaved);
}

TEST_CASE("decode_prompt wraps the user turn and opens the assistant turn") {
  Vocab v = task_vocab();
  SpecialTokens sp;
  CorpusRecord rec;
  rec.kind = TaskKind::Copy;
  rec.turns.push_back({ids(v, {"copy:", "a"}), ids(v, {"a"})});
  const std::vector<int> p = decode_prompt(rec, sp);
  REQUIRE(p.front() == sp.bos);
  REQUIRE(p[1] == v.id("copy:"));
  REQUIRE(p[2] == v.id("a"));
  REQUIRE(p[3] == sp.eos);
  REQUIRE(p.back() == sp.bos);
}

TEST_CASE("evaluate runs the full loop and reports consistent counters") {
  Vocab v = task_vocab();
  ModelConfig cfg = harness_config(v.size());
  auto params = ModelParams<float>::init(cfg, 17);
  TaskSpec spec;
  spec.kind = TaskKind::Copy;
  spec.seed = 4;
  spec.min_answer_len = 2;
  spec.max_answer_len = 4;
  Corpus corpus = gen_corpus(spec, 12);

  EvalOptions opt;
  opt.decode.algorithm = DecodeAlgorithm::MaskGit;
  opt.decode.maskgit_k = 1;
  EvalResult r = evaluate(params, corpus, opt);
  REQUIRE(r.n == 12);
  REQUIRE(r.outcomes.size() == 12);
  for (const auto& o : r.outcomes) {
    REQUIRE(o.complete);
    REQUIRE(o.iterations == o.remaining);  // one token per step
    REQUIRE(o.response_length == o.remaining);
  }
  // Untrained models almost surely fail exact match; the metric must still
  // be a valid frequency.
  REQUIRE(r.exact_match >= 0.0);
  REQUIRE(r.exact_match <= 1.0);
  REQUIRE(r.tps > 0.0);

  EvalResult again = evaluate(params, corpus, opt);
  REQUIRE(again.exact_match == r.exact_match);
  REQUIRE(again.mean_iterations == r.mean_iterations);
}

TEST_CASE("measure_prefill_effect reports exact analytic step costs") {
  Vocab v = task_vocab();
  ModelConfig cfg = harness_config(v.size());
  auto params = ModelParams<float>::init(cfg, 19);
  TaskSpec spec;
  spec.kind = TaskKind::KeyValueExtract;
  spec.seed = 6;
  spec.kv_pairs = 8;  // prompt: 1 + 8*3 tokens, plus BOS/EOS/BOS
  Corpus corpus = gen_corpus(spec, 6);

  EvalOptions base;
  base.decode.algorithm = DecodeAlgorithm::MaskGit;
  base.decode.maskgit_k = 1;
  PrefillReport rep = measure_prefill_effect(params, corpus, 10, base);
  REQUIRE(rep.n == 6);
  REQUIRE(rep.per_step_counts_exact);
  REQUIRE(rep.measured_score_ratio == Catch::Approx(rep.analytic_score_ratio).epsilon(1e-9));
  // prompt = 28 tokens + window 10: ratio (28+10)/10
  REQUIRE(rep.analytic_score_ratio == Catch::Approx(3.8).epsilon(1e-9));
}

TEST_CASE("render_history: markers, wrapping, and gradient colors") {
  HistoryFile f;
  f.response_length = 5;
  f.remaining_tokens = 3;
  f.actual_iterations = 2;
  Vocab v = task_vocab();
  auto rec = [&](int slot, const char* text, GenerationHistory::SlotKind kind, int iter) {
    HistoryRecord r;
    r.slot = slot;
    r.token_text = text;
    r.token_id = v.id(text);
    r.kind = kind;
    r.iteration = iter;
    return r;
  };
  using K = GenerationHistory::SlotKind;
  f.records = {rec(0, "a", K::Prior, 0), rec(1, "b", K::Committed, 1),
               rec(2, "date:", K::Committed, 2), rec(3, "c", K::Committed, 1),
               rec(4, "[PAD]", K::Pad, 0)};

  const std::string plain = render_history(f);
  REQUIRE(plain.find("response_length=5") != std::string::npos);
  REQUIRE(plain.find("pad") != std::string::npos);
  REQUIRE(plain.find('-') != std::string::npos);

  HistoryFile back = parse_rendering(plain, v);
  REQUIRE(back.response_length == f.response_length);
  REQUIRE(back.remaining_tokens == f.remaining_tokens);
  REQUIRE(back.actual_iterations == f.actual_iterations);
  REQUIRE(back.records.size() == f.records.size());
  for (size_t i = 0; i < f.records.size(); ++i) {
    REQUIRE(back.records[i].slot == f.records[i].slot);
    REQUIRE(back.records[i].token_id == f.records[i].token_id);
    REQUIRE(back.records[i].token_text == f.records[i].token_text);
    REQUIRE(back.records[i].kind == f.records[i].kind);
    REQUIRE(back.records[i].iteration == f.records[i].iteration);
  }

  // Two iterations means exactly two distinct colors.
  RenderOptions copt;
  copt.color = true;
  const std::string colored = render_history(f, copt);
  std::set<std::string> colors;
  for (size_t pos = colored.find("\x1b[38;2;"); pos != std::string::npos;
       pos = colored.find("\x1b[38;2;", pos + 1)) {
    colors.insert(colored.substr(pos, colored.find('m', pos) - pos + 1));
  }
  REQUIRE(colors.size() == 2);
  HistoryFile back2 = parse_rendering(colored, v);
  REQUIRE(back2.records.size() == f.records.size());

  // Wrapping keeps rows paired.
  RenderOptions wopt;
  wopt.wrap = 2;
  HistoryFile back3 = parse_rendering(render_history(f, wopt), v);
  REQUIRE(back3.records.size() == f.records.size());
}

TEST_CASE("render_history: all-prior histories render as a dash row") {
  HistoryFile f;
  f.response_length = 3;
  f.remaining_tokens = 0;
  f.actual_iterations = 0;
  Vocab v = task_vocab();
  for (int s = 0; s < 3; ++s) {
    HistoryRecord r;
    r.slot = s;
    r.token_text = "a";
    r.token_id = v.id("a");
    r.kind = GenerationHistory::SlotKind::Prior;
    f.records.push_back(r);
  }
  const std::string out = render_history(f);
  std::istringstream in(out);
  std::string header, tokens, markers;
  std::getline(in, header);
  std::getline(in, tokens);
  std::getline(in, markers);
  std::istringstream ms(markers);
  std::string m;
  int dashes = 0;
  while (ms >> m) {
    REQUIRE(m == "-");
    ++dashes;
  }
  REQUIRE(dashes == 3);
}

TEST_CASE("early answer probe runs on arithmetic samples") {
  Vocab v = task_vocab();
  ModelConfig cfg = harness_config(v.size());
  auto params = ModelParams<float>::init(cfg, 23);
  TaskSpec spec;
  spec.kind = TaskKind::Arithmetic;
  spec.seed = 8;
  Corpus corpus = gen_corpus(spec, 10);

  EvalOptions base;
  base.decode.algorithm = DecodeAlgorithm::Confident;
  base.decode.gamma = 0.5;
  EarlyAnswerProbe probe = early_answer_probe(params, corpus, 8, 3, base);
  REQUIRE(probe.n > 0);
  for (double r : probe.commit_ratios) {
    REQUIRE(r > 0.0);
    REQUIRE(r <= 1.0);
  }
}
