#pragma once

#include "ddlm/serialize.hpp"

#include <sstream>
#include <string>
#include <vector>

namespace ddlm {

struct RenderOptions {
  bool color = false;
  int wrap = 16;  // slots per block
};

namespace detail {

// Commit-order gradient: earliest iterations render blue, latest red.
inline std::string gradient_color(int iteration, int actual_iterations) {
  const double r = actual_iterations <= 1
                       ? 0.0
                       : double(iteration - 1) / double(actual_iterations - 1);
  const int blue[3] = {31, 119, 180};
  const int red[3] = {214, 39, 40};
  int rgb[3];
  for (int i = 0; i < 3; ++i) rgb[i] = int(blue[i] + r * (red[i] - blue[i]) + 0.5);
  return "\x1b[38;2;" + std::to_string(rgb[0]) + ";" + std::to_string(rgb[1]) + ";" +
         std::to_string(rgb[2]) + "m";
}

inline std::string strip_ansi(const std::string& s) {
  std::string out;
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\x1b') {
      while (i < s.size() && s[i] != 'm') ++i;
      continue;
    }
    out.push_back(s[i]);
  }
  return out;
}

}  // namespace detail

/// Text table in the generation-history style: a token row over a marker
/// row, where markers are the commit iteration, "-" for prior slots, and
/// "pad" for padding. With color on, committed tokens are tinted from blue
/// (early) to red (late).
inline std::string render_history(const HistoryFile& f, const RenderOptions& opt = {}) {
  std::ostringstream out;
  out << "response_length=" << f.response_length
      << " remaining_tokens=" << f.remaining_tokens
      << " actual_iterations=" << f.actual_iterations << "\n";

  const int wrap = opt.wrap > 0 ? opt.wrap : int(f.records.size());
  for (size_t begin = 0; begin < f.records.size(); begin += size_t(wrap)) {
    const size_t end = std::min(f.records.size(), begin + size_t(wrap));
    std::vector<std::string> markers;
    std::vector<size_t> widths;
    for (size_t i = begin; i < end; ++i) {
      const HistoryRecord& r = f.records[i];
      std::string m;
      switch (r.kind) {
        case GenerationHistory::SlotKind::Committed: m = std::to_string(r.iteration); break;
        case GenerationHistory::SlotKind::Prior: m = "-"; break;
        case GenerationHistory::SlotKind::Pad: m = "pad"; break;
      }
      markers.push_back(m);
      widths.push_back(std::max(r.token_text.size(), m.size()));
    }
    for (size_t i = begin; i < end; ++i) {
      const HistoryRecord& r = f.records[i];
      const size_t w = widths[i - begin];
      if (opt.color && r.kind == GenerationHistory::SlotKind::Committed)
        out << detail::gradient_color(r.iteration, f.actual_iterations);
      out << r.token_text;
      if (opt.color && r.kind == GenerationHistory::SlotKind::Committed) out << "\x1b[0m";
      out << std::string(w - r.token_text.size(), ' ');
      if (i + 1 < end) out << "  ";
    }
    out << "\n";
    for (size_t i = begin; i < end; ++i) {
      const size_t w = widths[i - begin];
      out << markers[i - begin] << std::string(w - markers[i - begin].size(), ' ');
      if (i + 1 < end) out << "  ";
    }
    out << "\n";
  }
  return out.str();
}

/// Inverse of render_history given the vocabulary: recovers slots, token ids
/// (via the unique symbol strings), markers and the summary counters.
inline HistoryFile parse_rendering(const std::string& text, const Vocab& vocab) {
  std::istringstream in(detail::strip_ansi(text));
  std::string line;
  require(bool(std::getline(in, line)), "parse_rendering: empty input");
  HistoryFile f;
  {
    std::istringstream hdr(line);
    std::string field;
    while (hdr >> field) {
      const auto eq = field.find('=');
      require(eq != std::string::npos, "parse_rendering: bad header field " + field);
      const std::string key = field.substr(0, eq);
      const int value = std::stoi(field.substr(eq + 1));
      if (key == "response_length") f.response_length = value;
      else if (key == "remaining_tokens") f.remaining_tokens = value;
      else if (key == "actual_iterations") f.actual_iterations = value;
      else fail("parse_rendering: unknown header field " + key);
    }
  }

  int slot = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> tokens;
    {
      std::istringstream row(line);
      std::string cell;
      while (row >> cell) tokens.push_back(cell);
    }
    require(bool(std::getline(in, line)), "parse_rendering: token row without marker row");
    std::vector<std::string> markers;
    {
      std::istringstream row(line);
      std::string cell;
      while (row >> cell) markers.push_back(cell);
    }
    require(tokens.size() == markers.size(), "parse_rendering: row length mismatch");
    for (size_t i = 0; i < tokens.size(); ++i) {
      HistoryRecord r;
      r.slot = slot++;
      r.token_text = tokens[i];
      r.token_id = vocab.id(tokens[i]);
      if (markers[i] == "-") {
        r.kind = GenerationHistory::SlotKind::Prior;
      } else if (markers[i] == "pad") {
        r.kind = GenerationHistory::SlotKind::Pad;
      } else {
        r.kind = GenerationHistory::SlotKind::Committed;
        r.iteration = std::stoi(markers[i]);
      }
      f.records.push_back(std::move(r));
    }
  }
  return f;
}

}  // namespace ddlm
