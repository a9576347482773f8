#pragma once

#include "ddlm/decoder.hpp"
#include "ddlm/model.hpp"
#include "ddlm/tasks.hpp"

#include <json.hpp>

#include <bit>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace ddlm {

using Json = nlohmann::ordered_json;

namespace detail {

inline void require_little_endian() {
  require(std::endian::native == std::endian::little,
          "checkpoint format is little-endian; big-endian hosts are unsupported");
}

inline Json special_to_json(const SpecialTokens& sp) {
  return Json{{"mask", sp.mask}, {"pad", sp.pad}, {"bos", sp.bos}, {"eos", sp.eos}};
}

inline SpecialTokens special_from_json(const Json& j) {
  SpecialTokens sp;
  sp.mask = j.at("mask").get<int>();
  sp.pad = j.at("pad").get<int>();
  sp.bos = j.at("bos").get<int>();
  sp.eos = j.at("eos").get<int>();
  return sp;
}

}  // namespace detail

inline Json model_config_to_json(const ModelConfig& cfg) {
  return Json{{"vocab_size", cfg.vocab_size},   {"n_layers", cfg.n_layers},
              {"n_heads", cfg.n_heads},         {"d_model", cfg.d_model},
              {"d_ff", cfg.d_ff},               {"max_seq_len", cfg.max_seq_len},
              {"special_tokens", detail::special_to_json(cfg.special)}};
}

inline ModelConfig model_config_from_json(const Json& j) {
  ModelConfig cfg;
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.d_ff = j.at("d_ff").get<int>();
  cfg.max_seq_len = j.at("max_seq_len").get<int>();
  if (j.contains("special_tokens")) cfg.special = detail::special_from_json(j.at("special_tokens"));
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Checkpoint container: a text header (magic line, then one JSON line holding
// the config and the tensor directory with byte offsets), followed by raw
// row-major little-endian float32 tensor data in directory order.
// ---------------------------------------------------------------------------

inline constexpr const char* kCheckpointMagic = "ddlm-checkpoint-v1";

inline void save_checkpoint(const std::string& path, const ModelParams<float>& params,
                            const Vocab* vocab = nullptr) {
  detail::require_little_endian();
  Json dir = Json::array();
  int64_t offset = 0;
  params.for_each_tensor([&](const std::string& name, const Matrix<float>& m) {
    dir.push_back(Json{{"name", name},
                       {"rows", int64_t(m.rows())},
                       {"cols", int64_t(m.cols())},
                       {"offset", offset}});
    offset += int64_t(m.size()) * int64_t(sizeof(float));
  });
  Json header{{"config", model_config_to_json(params.config)}};
  header["vocab"] = vocab ? Json(vocab->symbols) : Json::array();
  header["tensors"] = dir;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "save_checkpoint: cannot open " + path);
  out << kCheckpointMagic << "\n" << header.dump() << "\n";
  params.for_each_tensor([&](const std::string&, const Matrix<float>& m) {
    out.write(reinterpret_cast<const char*>(m.data()),
              std::streamsize(sizeof(float) * size_t(m.size())));
  });
  require(out.good(), "save_checkpoint: write failed for " + path);
}

struct Checkpoint {
  ModelParams<float> params;
  Vocab vocab;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  detail::require_little_endian();
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "load_checkpoint: cannot open " + path);
  std::string magic, header_line;
  std::getline(in, magic);
  require(magic == kCheckpointMagic, "load_checkpoint: bad magic in " + path);
  std::getline(in, header_line);
  Json header = Json::parse(header_line);

  Checkpoint ck;
  ck.params = ModelParams<float>::zeros(model_config_from_json(header.at("config")));
  for (const auto& sym : header.at("vocab")) ck.vocab.add(sym.get<std::string>());

  const std::streampos data_start = in.tellg();
  size_t idx = 0;
  const Json& dir = header.at("tensors");
  ck.params.for_each_tensor([&](const std::string& name, Matrix<float>& m) {
    require(idx < dir.size(), "load_checkpoint: tensor directory too short");
    const Json& e = dir[idx++];
    require(e.at("name").get<std::string>() == name, "load_checkpoint: directory order mismatch");
    require(e.at("rows").get<int64_t>() == m.rows() && e.at("cols").get<int64_t>() == m.cols(),
            "load_checkpoint: tensor shape mismatch for " + name);
    in.seekg(data_start + std::streampos(e.at("offset").get<int64_t>()));
    in.read(reinterpret_cast<char*>(m.data()), std::streamsize(sizeof(float) * size_t(m.size())));
    require(in.good(), "load_checkpoint: truncated data for " + name);
  });
  require(idx == dir.size(), "load_checkpoint: extra tensors in directory");
  return ck;
}

// ---------------------------------------------------------------------------
// Corpus file: one header line, then one JSON record per sample. Turn
// boundaries are the flat lengths [prompt_1, answer_1, prompt_2, ...], in
// token counts, alternating user prompt and assistant answer.
// ---------------------------------------------------------------------------

inline void save_corpus(const std::string& path, const Corpus& corpus) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "save_corpus: cannot open " + path);
  Json header{{"format", "ddlm-corpus-v1"},
              {"vocab", corpus.vocab.symbols},
              {"special_tokens", detail::special_to_json(corpus.special)}};
  out << header.dump() << "\n";
  for (const CorpusRecord& rec : corpus.samples) {
    Json prompt = Json::array(), answer = Json::array(), bounds = Json::array();
    for (const auto& turn : rec.turns) {
      for (int t : turn.prompt) prompt.push_back(t);
      for (int t : turn.answer) answer.push_back(t);
      bounds.push_back(int(turn.prompt.size()));
      bounds.push_back(int(turn.answer.size()));
    }
    Json line{{"task", to_string(rec.kind)},
              {"prompt_tokens", prompt},
              {"answer_tokens", answer},
              {"turn_boundaries", bounds}};
    out << line.dump() << "\n";
  }
  require(out.good(), "save_corpus: write failed");
}

inline Corpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "load_corpus: cannot open " + path);
  std::string line;
  require(bool(std::getline(in, line)), "load_corpus: empty file");
  Json header = Json::parse(line);
  require(header.at("format").get<std::string>() == "ddlm-corpus-v1",
          "load_corpus: unknown format");
  Corpus corpus;
  for (const auto& sym : header.at("vocab")) corpus.vocab.add(sym.get<std::string>());
  corpus.special = detail::special_from_json(header.at("special_tokens"));

  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Json j = Json::parse(line);
    CorpusRecord rec;
    rec.kind = task_kind_from(j.at("task").get<std::string>());
    const auto prompt = j.at("prompt_tokens").get<std::vector<int>>();
    const auto answer = j.at("answer_tokens").get<std::vector<int>>();
    const auto bounds = j.at("turn_boundaries").get<std::vector<int>>();
    require(bounds.size() % 2 == 0, "load_corpus: odd turn boundary list");
    size_t p = 0, a = 0;
    for (size_t i = 0; i < bounds.size(); i += 2) {
      CorpusRecord::RTurn turn;
      turn.prompt.assign(prompt.begin() + long(p), prompt.begin() + long(p + size_t(bounds[i])));
      turn.answer.assign(answer.begin() + long(a),
                         answer.begin() + long(a + size_t(bounds[i + 1])));
      p += size_t(bounds[i]);
      a += size_t(bounds[i + 1]);
      rec.turns.push_back(std::move(turn));
    }
    require(p == prompt.size() && a == answer.size(), "load_corpus: boundary/token mismatch");
    corpus.samples.push_back(std::move(rec));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Generation history: one JSON record per answer slot, then a summary line.
// A slot's "iteration" field is its 1-indexed commit step, or "prior" for
// structure-prior slots, or "pad" for padding emitted by the model.
// ---------------------------------------------------------------------------

struct HistoryRecord {
  int slot = 0;
  int token_id = 0;
  std::string token_text;
  GenerationHistory::SlotKind kind = GenerationHistory::SlotKind::Committed;
  int iteration = 0;  // 0 unless kind == Committed
};

struct HistoryFile {
  std::vector<HistoryRecord> records;
  int response_length = 0;
  int remaining_tokens = 0;
  int actual_iterations = 0;
};

inline HistoryFile history_from_result(const DecodeResult& res, const Vocab& vocab) {
  HistoryFile f;
  f.response_length = res.history.response_length;
  f.remaining_tokens = res.history.remaining_tokens;
  f.actual_iterations = res.history.actual_iterations;
  for (int s = 0; s < res.history.response_length; ++s) {
    HistoryRecord r;
    r.slot = s;
    r.token_id = res.window[size_t(s)];
    r.token_text = vocab.size() > r.token_id ? vocab.text(r.token_id) : std::to_string(r.token_id);
    r.kind = res.history.slots[size_t(s)].kind;
    if (r.kind == GenerationHistory::SlotKind::Committed)
      r.iteration = res.history.slots[size_t(s)].iteration;
    f.records.push_back(std::move(r));
  }
  return f;
}

inline std::string history_to_jsonl(const HistoryFile& f) {
  std::ostringstream out;
  for (const HistoryRecord& r : f.records) {
    Json j{{"slot", r.slot}, {"token_id", r.token_id}, {"token_text", r.token_text}};
    switch (r.kind) {
      case GenerationHistory::SlotKind::Committed: j["iteration"] = r.iteration; break;
      case GenerationHistory::SlotKind::Prior: j["iteration"] = "prior"; break;
      case GenerationHistory::SlotKind::Pad: j["iteration"] = "pad"; break;
    }
    out << j.dump() << "\n";
  }
  Json summary{{"response_length", f.response_length},
               {"remaining_tokens", f.remaining_tokens},
               {"actual_iterations", f.actual_iterations}};
  out << summary.dump() << "\n";
  return out.str();
}

inline HistoryFile parse_history_jsonl(const std::string& text) {
  HistoryFile f;
  std::istringstream in(text);
  std::string line;
  bool saw_summary = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Json j = Json::parse(line);
    if (j.contains("response_length")) {
      f.response_length = j.at("response_length").get<int>();
      f.remaining_tokens = j.at("remaining_tokens").get<int>();
      f.actual_iterations = j.at("actual_iterations").get<int>();
      saw_summary = true;
      continue;
    }
    HistoryRecord r;
    r.slot = j.at("slot").get<int>();
    r.token_id = j.at("token_id").get<int>();
    r.token_text = j.at("token_text").get<std::string>();
    const Json& it = j.at("iteration");
    if (it.is_string()) {
      const std::string s = it.get<std::string>();
      if (s == "prior") r.kind = GenerationHistory::SlotKind::Prior;
      else if (s == "pad") r.kind = GenerationHistory::SlotKind::Pad;
      else fail("parse_history: bad iteration marker '" + s + "'");
    } else {
      r.kind = GenerationHistory::SlotKind::Committed;
      r.iteration = it.get<int>();
    }
    f.records.push_back(std::move(r));
  }
  require(saw_summary, "parse_history: missing summary record");
  return f;
}

// ---------------------------------------------------------------------------
// Config parsing for the CLI surfaces.
// ---------------------------------------------------------------------------

inline DecodeConfig decode_config_from_json(const Json& j) {
  DecodeConfig cfg;
  if (j.contains("response_length")) cfg.response_length = j.at("response_length").get<int>();
  if (j.contains("max_steps")) cfg.max_steps = j.at("max_steps").get<int>();
  if (j.contains("gamma")) cfg.gamma = j.at("gamma").get<double>();
  if (j.contains("temperature")) cfg.temperature = j.at("temperature").get<double>();
  if (j.contains("top_p")) cfg.top_p = j.at("top_p").get<double>();
  if (j.contains("algorithm")) {
    const std::string a = j.at("algorithm").get<std::string>();
    if (a == "maskgit") cfg.algorithm = DecodeAlgorithm::MaskGit;
    else if (a == "confident") cfg.algorithm = DecodeAlgorithm::Confident;
    else fail("decode config: unknown algorithm '" + a + "'");
  }
  if (j.contains("maskgit_k")) cfg.maskgit_k = j.at("maskgit_k").get<int>();
  if (j.contains("fallback")) {
    const std::string fb = j.at("fallback").get<std::string>();
    if (fb == "highest_confidence") cfg.fallback = FallbackKind::HighestConfidence;
    else if (fb == "random") cfg.fallback = FallbackKind::Random;
    else fail("decode config: unknown fallback '" + fb + "'");
  }
  if (j.contains("fallback_k")) cfg.fallback_k = j.at("fallback_k").get<int>();
  if (j.contains("confidence_measure")) {
    const std::string m = j.at("confidence_measure").get<std::string>();
    if (m == "max_prob") cfg.confidence_measure = ConfidenceMeasure::MaxProb;
    else if (m == "neg_entropy") cfg.confidence_measure = ConfidenceMeasure::NegEntropy;
    else if (m == "margin") cfg.confidence_measure = ConfidenceMeasure::Margin;
    else fail("decode config: unknown confidence measure '" + m + "'");
  }
  if (j.contains("confidence_source")) {
    const std::string s = j.at("confidence_source").get<std::string>();
    if (s == "pre_revision") cfg.confidence_source = ConfidenceSource::PreRevision;
    else if (s == "post_revision") cfg.confidence_source = ConfidenceSource::PostRevision;
    else fail("decode config: unknown confidence source '" + s + "'");
  }
  if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
  cfg.validate();
  return cfg;
}

/// Priors: [{"pos": -3, "token": "date:"}] or [{"pos": 0, "token_id": 7}].
inline StructurePrior priors_from_json(const Json& j, const Vocab& vocab) {
  StructurePrior p;
  for (const auto& e : j) {
    const int pos = e.at("pos").get<int>();
    int tok;
    if (e.contains("token_id")) tok = e.at("token_id").get<int>();
    else tok = vocab.id(e.at("token").get<std::string>());
    p.entries.emplace_back(pos, tok);
  }
  return p;
}

inline TaskSpec task_spec_from_json(const Json& j) {
  TaskSpec spec;
  spec.kind = task_kind_from(j.at("kind").get<std::string>());
  if (j.contains("seed")) spec.seed = j.at("seed").get<uint64_t>();
  if (j.contains("min_answer_len")) spec.min_answer_len = j.at("min_answer_len").get<int>();
  if (j.contains("max_answer_len")) spec.max_answer_len = j.at("max_answer_len").get<int>();
  if (j.contains("kv_pairs")) spec.kv_pairs = j.at("kv_pairs").get<int>();
  if (j.contains("value_digits")) spec.value_digits = j.at("value_digits").get<int>();
  if (j.contains("max_operand")) spec.max_operand = j.at("max_operand").get<int>();
  spec.validate();
  return spec;
}

inline Json load_json_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open config file " + path);
  return Json::parse(in);
}

}  // namespace ddlm
