#include "llavaseg/orchestrator.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <regex>
#include <sstream>

#include "llavaseg/hash.hpp"

namespace llavaseg {

using nlohmann::json;

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

bool is_placeholder_name(std::string_view name) {
  if (name.empty() || !std::isupper(static_cast<unsigned char>(name.front()))) return false;
  return std::all_of(name.begin(), name.end(), [](char c) {
    return std::isupper(static_cast<unsigned char>(c)) || std::isdigit(static_cast<unsigned char>(c)) ||
           c == ' ' || c == '_';
  });
}

/// Byte index one past the end of the sentence starting at `start`.
std::size_t sentence_end(std::string_view text, std::size_t start) {
  for (std::size_t i = start; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '\n') return i + 1;
    if (c == '.' || c == '!' || c == '?') {
      if (i + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[i + 1]))) return i + 1;
    }
  }
  return text.size();
}

std::size_t skip_space(std::string_view text, std::size_t i) {
  while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
  return i;
}

/// Length of a leading list marker such as "(1)", "1." or "2)".
std::size_t enumerator_length(std::string_view text, std::size_t i) {
  static const std::regex kEnum(R"(^(\(\d+\)|\d+[.)])\s*)");
  std::match_results<std::string_view::const_iterator> m;
  if (std::regex_search(text.begin() + static_cast<std::ptrdiff_t>(i), text.end(), m, kEnum)) {
    return static_cast<std::size_t>(m.length(0));
  }
  return 0;
}

std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream in{std::string(s)};
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::string join(const std::vector<std::string>& words, std::size_t from, std::size_t to) {
  std::string out;
  for (std::size_t i = from; i < to; ++i) {
    if (!out.empty()) out.push_back(' ');
    out += words[i];
  }
  return out;
}

std::string strip_edges(std::string s) {
  static const std::string kPunct = ".,;:!?\"'()";
  while (!s.empty() && (kPunct.find(s.back()) != std::string::npos || std::isspace(static_cast<unsigned char>(s.back()))))
    s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && (kPunct.find(s[i]) != std::string::npos || std::isspace(static_cast<unsigned char>(s[i])))) ++i;
  return s.substr(i);
}

GenerationResult call_backend(const MllmBackend& backend, std::string_view image, const ConversationState& conv,
                              int retries, int step, const CoTTrace& partial) {
  const std::string history = conv.render();
  for (int attempt = 0;; ++attempt) {
    try {
      GenerationResult r = backend.generate(image, history);
      r.validate();
      return r;
    } catch (const BackendError& e) {
      if (e.retryable() && attempt < retries) continue;
      throw ChainError("step " + std::to_string(step) + ": " + e.what(), step, partial);
    } catch (const Error& e) {
      throw ChainError("step " + std::to_string(step) + ": " + e.what(), step, partial);
    }
  }
}

Span merge(const Span& a, const Span& b) { return {std::min(a.begin, b.begin), std::max(a.end, b.end)}; }

/// Locates the longest run of target words inside text[begin, end).
std::optional<std::pair<std::size_t, std::size_t>> find_target_text(std::string_view text, std::size_t begin,
                                                                    std::size_t end, const std::string& target) {
  const std::string hay = lower(text.substr(begin, end - begin));
  const auto words = split_words(target);
  for (std::size_t len = words.size(); len > 0; --len) {
    for (std::size_t from = 0; from + len <= words.size(); ++from) {
      const std::string needle = join(words, from, from + len);
      if (const auto pos = hay.find(needle); pos != std::string::npos) {
        return std::pair{begin + pos, begin + pos + needle.size()};
      }
    }
  }
  return std::nullopt;
}

std::vector<std::pair<std::size_t, std::size_t>> sentences_in(std::string_view text, std::size_t begin,
                                                              std::size_t end) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t i = skip_space(text, begin);
  while (i < end) {
    std::size_t e = std::min(sentence_end(text, i), end);
    std::size_t te = e;
    while (te > i && std::isspace(static_cast<unsigned char>(text[te - 1]))) --te;
    if (te > i) out.emplace_back(i, te);
    i = skip_space(text, e);
  }
  return out;
}

/// Fills target/attribute spans against `trace.span_source`. The step-2 text
/// occupies [0, target_end); attribute text lies in [attr_begin, attr_end).
void resolve_spans(CoTTrace& trace, std::size_t target_sentence_begin, std::size_t target_sentence_end,
                   std::size_t attr_begin, std::size_t attr_end) {
  const auto& src = trace.span_source;
  std::optional<Span> target_span;
  if (auto hit = find_target_text(src.text, target_sentence_begin, target_sentence_end, trace.target)) {
    target_span = tokens_covering(src, hit->first, hit->second);
  }
  if (!target_span) {
    target_span = tokens_covering(src, target_sentence_begin, target_sentence_end);
    trace.notes.push_back("target text not found verbatim; using the whole target sentence span");
  }
  trace.target_token_span = target_span.value_or(Span{});

  trace.attribute_token_spans.clear();
  if (trace.segmentation == AttributeSegmentation::whole) {
    if (auto s = tokens_covering(src, attr_begin, attr_end)) trace.attribute_token_spans.push_back(*s);
  } else {
    for (const auto& [b, e] : sentences_in(src.text, attr_begin, attr_end)) {
      if (auto s = tokens_covering(src, b, e)) trace.attribute_token_spans.push_back(*s);
    }
  }
  // Keep attribute spans disjoint from the target span.
  std::vector<Span> cleaned;
  for (Span s : trace.attribute_token_spans) {
    if (!cleaned.empty() && s.begin < cleaned.back().end) s.begin = cleaned.back().end;
    if (s.begin < trace.target_token_span.end && s.end > trace.target_token_span.begin) {
      if (s.begin >= trace.target_token_span.begin) s.begin = trace.target_token_span.end;
      else s.end = trace.target_token_span.begin;
    }
    if (s.end > s.begin) cleaned.push_back(s);
  }
  trace.attribute_token_spans = std::move(cleaned);
}

void finish_steps_2_3(CoTTrace& trace, std::string_view image, ConversationState& conv, const MllmBackend& backend,
                      const ChainConfig& config, const std::string& question) {
  trace.merged_steps_2_3 = config.mode == ChainMode::merged;
  trace.segmentation = config.segmentation;
  const auto& tpl = config.templates;

  auto parse_or_throw = [&](const std::string& text) {
    try {
      ParsedTargets parsed = parse_targets(text);
      trace.target = parsed.target;
      trace.other_targets = parsed.others;
      if (!parsed.others.empty()) {
        trace.notes.push_back("multiple targets named; kept the first of " +
                              std::to_string(parsed.others.size() + 1));
      }
    } catch (const ParseError& e) {
      throw ChainError(std::string("step 2: ") + e.what(), 2, trace);
    }
  };

  if (config.mode == ChainMode::merged) {
    conv.ask(build_merged_target_attribute_prompt(question, trace.reason_answer, tpl), "");
    GenerationResult r = call_backend(backend, image, conv, config.retries, 2, trace);
    conv.answer(r.text);
    trace.step_latency_ms.push_back(r.latency_ms);
    trace.target_response = r.text;
    parse_or_throw(r.text);
    trace.completed_steps = 2;

    const std::string_view text = r.text;
    std::size_t first = skip_space(text, 0);
    first += enumerator_length(text, first);
    const std::size_t first_end = sentence_end(text, first);
    const std::size_t attr_begin = skip_space(text, first_end);
    trace.attributes = std::string(trim(text.substr(attr_begin)));
    trace.span_source = std::move(r);
    trace.completed_steps = 3;
    resolve_spans(trace, first, first_end, attr_begin, trace.span_source.text.size());
    return;
  }

  const SeparatePrompts prompts = build_separate_prompts(question, trace.reason_answer, "", tpl);
  conv.ask(prompts.target, "");
  GenerationResult r2 = call_backend(backend, image, conv, config.retries, 2, trace);
  conv.answer(r2.text);
  trace.step_latency_ms.push_back(r2.latency_ms);
  trace.target_response = r2.text;
  parse_or_throw(r2.text);
  trace.completed_steps = 2;

  conv.ask(build_separate_prompts(question, trace.reason_answer, trace.target, tpl).attribute, "");
  GenerationResult r3 = call_backend(backend, image, conv, config.retries, 3, trace);
  conv.answer(r3.text);
  trace.step_latency_ms.push_back(r3.latency_ms);
  trace.attribute_response = r3.text;
  trace.attributes = std::string(trim(r3.text));

  const std::size_t step2_len = r2.text.size();
  trace.span_source = concat_results(r2, r3, "\n");
  trace.completed_steps = 3;
  std::size_t first = skip_space(trace.span_source.text, 0);
  first += enumerator_length(trace.span_source.text, first);
  resolve_spans(trace, first, std::min(sentence_end(trace.span_source.text, first), step2_len), step2_len + 1,
                trace.span_source.text.size());
}

}  // namespace

// ---------------------------------------------------------------------------

std::string to_string(PromptStep step) {
  switch (step) {
    case PromptStep::reason: return "reason";
    case PromptStep::target: return "target";
    case PromptStep::attribute: return "attribute";
    case PromptStep::merged_target_attribute: return "merged_target_attribute";
  }
  return "?";
}

PromptStep parse_prompt_step(std::string_view name) {
  if (name == "reason") return PromptStep::reason;
  if (name == "target") return PromptStep::target;
  if (name == "attribute") return PromptStep::attribute;
  if (name == "merged_target_attribute" || name == "merged") return PromptStep::merged_target_attribute;
  throw ConfigError("unknown prompt step '" + std::string(name) + "'");
}

std::set<std::string> find_placeholders(std::string_view text) {
  std::set<std::string> out;
  for (std::size_t i = text.find('['); i != std::string_view::npos; i = text.find('[', i + 1)) {
    const auto close = text.find(']', i + 1);
    if (close == std::string_view::npos) break;
    const auto name = text.substr(i + 1, close - i - 1);
    if (is_placeholder_name(name)) out.emplace(name);
  }
  return out;
}

std::string PromptTemplate::render(const std::map<std::string, std::string>& values) const {
  std::string out;
  out.reserve(body.size());
  std::size_t i = 0;
  while (i < body.size()) {
    const auto open = body.find('[', i);
    if (open == std::string::npos) break;
    const auto close = body.find(']', open + 1);
    if (close == std::string::npos) break;
    const std::string name = body.substr(open + 1, close - open - 1);
    out.append(body, i, open - i);
    if (is_placeholder_name(name)) {
      const auto it = values.find(name);
      if (it == values.end()) {
        throw RenderError("template '" + template_id + "' has unfilled placeholder [" + name + "]");
      }
      out += it->second;
    } else {
      out.append(body, open, close - open + 1);
    }
    i = close + 1;
  }
  out.append(body, i);
  return out;
}

TemplateSet TemplateSet::defaults() {
  static const std::string kConversation =
      "Here is the conversation:\nThe question is: [QUESTION]\nThe answer is: [ANSWER]\n";
  static const std::string kTargetInstruction =
      "Please analyze the conversation and identify the distinct physical objects or areas that the user "
      "wants from the image.";
  static const std::string kAttributeInstruction =
      "Briefly describe the target entity or part's visual attributes that can discriminate them from the "
      "image. Each visual attribute can be color, shape, and relative position to other objects in the image.";
  TemplateSet t;
  t.reason = {"default-reason", "What is the object or part that is [USER QUERY] in this image?", PromptStep::reason};
  t.target = {"default-target", kConversation + kTargetInstruction, PromptStep::target};
  t.attribute = {"default-attribute", "Here is the target:\nThe target is: [TARGET]\n" + kAttributeInstruction,
                 PromptStep::attribute};
  t.merged = {"default-merged",
              kConversation + "Follow these guidelines strictly:\n(1) " + kTargetInstruction + "\n(2) " +
                  kAttributeInstruction,
              PromptStep::merged_target_attribute};
  return t;
}

TemplateSet TemplateSet::parse(std::string_view text) {
  TemplateSet out = defaults();
  std::set<PromptStep> seen;
  PromptTemplate* current = nullptr;
  std::string body;
  auto flush = [&] {
    if (current == nullptr) return;
    while (!body.empty() && (body.back() == '\n' || body.back() == '\r')) body.pop_back();
    current->body = body;
    body.clear();
  };
  std::istringstream in{std::string(text)};
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("### ", 0) == 0) {
      flush();
      std::istringstream header(line.substr(4));
      std::string step_name, id;
      header >> step_name >> id;
      const PromptStep step = parse_prompt_step(step_name);
      if (!seen.insert(step).second) throw ConfigError("template for step '" + step_name + "' given twice");
      switch (step) {
        case PromptStep::reason: current = &out.reason; break;
        case PromptStep::target: current = &out.target; break;
        case PromptStep::attribute: current = &out.attribute; break;
        case PromptStep::merged_target_attribute: current = &out.merged; break;
      }
      current->step = step;
      current->template_id = id.empty() ? step_name : id;
      continue;
    }
    if (current == nullptr) {
      if (!trim(line).empty()) throw ConfigError("template text before the first '### <step>' header");
      continue;
    }
    body += line;
    body.push_back('\n');
  }
  flush();

  auto require = [](const PromptTemplate& t, std::initializer_list<const char*> names) {
    const auto have = find_placeholders(t.body);
    for (const char* n : names) {
      if (!have.contains(n)) {
        throw ConfigError("template '" + t.template_id + "' lacks placeholder [" + std::string(n) + "]");
      }
    }
  };
  require(out.reason, {"USER QUERY"});
  require(out.target, {"QUESTION", "ANSWER"});
  require(out.attribute, {"TARGET"});
  require(out.merged, {"QUESTION", "ANSWER"});
  return out;
}

TemplateSet TemplateSet::load(const std::string& path) { return parse(read_file(path)); }

std::string TemplateSet::serialize() const {
  std::string out;
  for (const PromptTemplate* t : {&reason, &target, &attribute, &merged}) {
    out += "### " + to_string(t->step) + " " + t->template_id + "\n" + t->body + "\n";
  }
  return out;
}

bool is_question(std::string_view query) {
  const auto q = trim(query);
  if (q.empty()) return false;
  if (q.back() == '?') return true;
  const std::string first = lower(q.substr(0, q.find_first_of(" \t\n,")));
  static const std::set<std::string> kInterrogatives{"what", "which", "where", "who", "how"};
  return kInterrogatives.contains(first);
}

std::string build_reason_prompt(std::string_view query, bool query_is_question, const TemplateSet& templates) {
  if (trim(query).empty()) throw InvalidInput("user query is empty");
  if (query_is_question) return std::string(query);
  return templates.reason.render({{"USER QUERY", std::string(query)}});
}

std::string build_merged_target_attribute_prompt(std::string_view question, std::string_view answer,
                                                 const TemplateSet& templates) {
  if (trim(question).empty()) throw InvalidInput("question is empty");
  if (trim(answer).empty()) throw InvalidInput("step-1 answer is empty");
  return templates.merged.render({{"QUESTION", std::string(question)}, {"ANSWER", std::string(answer)}});
}

SeparatePrompts build_separate_prompts(std::string_view question, std::string_view answer, std::string_view target,
                                       const TemplateSet& templates) {
  if (trim(question).empty()) throw InvalidInput("question is empty");
  if (trim(answer).empty()) throw InvalidInput("step-1 answer is empty");
  SeparatePrompts out;
  out.target = templates.target.render({{"QUESTION", std::string(question)}, {"ANSWER", std::string(answer)}});
  if (!trim(target).empty()) out.attribute = templates.attribute.render({{"TARGET", std::string(target)}});
  return out;
}

ParsedTargets parse_targets(std::string_view step2_response) {
  const std::string_view raw = trim(step2_response);
  if (raw.empty()) throw ParseError("response has no extractable target", std::string(step2_response));

  std::size_t start = enumerator_length(raw, 0);
  std::string s = lower(trim(raw.substr(start, sentence_end(raw, start) - start)));
  s = strip_edges(s);

  static const std::vector<std::string> kFrames{"the user wants", "the user is asking for", "the target is",
                                                "target:",        "the target:",            "it is",
                                                "this is",        "that is",                "there is"};
  for (bool changed = true; changed;) {
    changed = false;
    for (const auto& f : kFrames) {
      if (s.rfind(f, 0) == 0 && (s.size() == f.size() || !std::isalnum(static_cast<unsigned char>(s[f.size()])))) {
        s = strip_edges(s.substr(f.size()));
        changed = true;
      }
    }
  }
  static const std::vector<std::string> kTrailers{"from the image", "in the image", "in this image",
                                                  "from this image", "of the image", "of this image"};
  for (const auto& t : kTrailers) {
    if (const auto pos = s.rfind(t); pos != std::string::npos && pos + t.size() == s.size()) {
      s = strip_edges(s.substr(0, pos));
    }
  }

  // "a, the b and the c" names several targets.
  static const std::regex kSplit(R"(\s*(,\s*and|,|\s+and)\s+(?=(the|a|an)\s))");
  std::vector<std::string> parts;
  for (std::sregex_token_iterator it(s.begin(), s.end(), kSplit, -1), end; it != end; ++it) {
    std::string p = strip_edges(*it);
    if (!p.empty()) parts.push_back(std::move(p));
  }

  static const std::set<std::string> kStop{"and", "or", "of", "in", "from", "with", "to", "at",
                                           "on",  "the", "a", "an", "that", "which", "is"};
  for (auto& p : parts) {
    auto words = split_words(p);
    while (!words.empty() && kStop.contains(words.back())) words.pop_back();
    p = join(words, 0, words.size());
  }
  std::erase_if(parts, [](const std::string& p) { return p.empty(); });
  if (parts.empty()) throw ParseError("response has no extractable target", std::string(step2_response));

  ParsedTargets out;
  out.target = parts.front();
  out.others.assign(parts.begin() + 1, parts.end());
  return out;
}

std::string parse_target(std::string_view step2_response) { return parse_targets(step2_response).target; }

// ---------------------------------------------------------------------------

std::string Turn::prompt() const {
  if (find_placeholders(task_prompt).contains("USER QUERY")) {
    return PromptTemplate{"turn", task_prompt, PromptStep::reason}.render({{"USER QUERY", user_query}});
  }
  if (task_prompt.empty()) return user_query;
  if (user_query.empty()) return task_prompt;
  return task_prompt + " " + user_query;
}

void ConversationState::ask(std::string task_prompt, std::string user_query) {
  if (!turns_.empty() && !turns_.back().answer) throw InvalidInput("previous turn has no answer yet");
  turns_.push_back({std::move(task_prompt), std::move(user_query), std::nullopt});
}

void ConversationState::answer(std::string text) {
  if (turns_.empty() || turns_.back().answer) throw InvalidInput("no pending turn to answer");
  turns_.back().answer = std::move(text);
}

std::string ConversationState::render_turn(const Turn& turn) {
  std::string out = "USER: " + turn.prompt() + "\nASSISTANT:";
  if (turn.answer) out += " " + *turn.answer + "\n";
  return out;
}

std::string ConversationState::render() const {
  std::string out;
  for (const auto& t : turns_) out += render_turn(t);
  return out;
}

std::string to_string(ChainMode mode) { return mode == ChainMode::merged ? "merged" : "separate"; }

ChainMode parse_chain_mode(std::string_view name) {
  if (name == "merged") return ChainMode::merged;
  if (name == "separate") return ChainMode::separate;
  throw ConfigError("unknown chain mode '" + std::string(name) + "'");
}

std::optional<Span> tokens_covering(const GenerationResult& result, std::size_t begin, std::size_t end) {
  std::optional<Span> out;
  for (std::size_t i = 0; i < result.tokens.size(); ++i) {
    const auto& o = result.tokens[i].offsets;
    if (o.begin < end && o.end > begin) out = out ? merge(*out, Span{i, i + 1}) : Span{i, i + 1};
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string CoTTrace::to_json_line() const {
  auto spans_json = [](const std::vector<Span>& spans) {
    json a = json::array();
    for (const auto& s : spans) a.push_back({s.begin, s.end});
    return a;
  };
  const json j{{"image_digest", image_digest},
               {"query", user_query},
               {"query_is_question", query_is_question},
               {"simulated_step1", simulated_step1},
               {"reason_prompt", reason_prompt},
               {"reason_answer", reason_answer},
               {"target_response", target_response},
               {"attribute_response", attribute_response},
               {"target", target},
               {"other_targets", other_targets},
               {"attributes", attributes},
               {"target_span", {target_token_span.begin, target_token_span.end}},
               {"attribute_spans", spans_json(attribute_token_spans)},
               {"merged_steps_2_3", merged_steps_2_3},
               {"attribute_segmentation", segmentation == AttributeSegmentation::whole ? "whole" : "per-sentence"},
               {"completed_steps", completed_steps},
               {"step_latency_ms", step_latency_ms},
               {"notes", notes}};
  return j.dump();
}

CoTTrace CoTTrace::from_json_line(std::string_view line) {
  CoTTrace t;
  try {
    const json j = json::parse(line);
    t.image_digest = j.at("image_digest");
    t.user_query = j.at("query");
    t.query_is_question = j.at("query_is_question");
    t.simulated_step1 = j.value("simulated_step1", false);
    t.reason_prompt = j.at("reason_prompt");
    t.reason_answer = j.at("reason_answer");
    t.target_response = j.at("target_response");
    t.attribute_response = j.at("attribute_response");
    t.target = j.at("target");
    t.other_targets = j.at("other_targets").get<std::vector<std::string>>();
    t.attributes = j.at("attributes");
    const auto ts = j.at("target_span");
    t.target_token_span = {ts.at(0).get<std::size_t>(), ts.at(1).get<std::size_t>()};
    for (const auto& s : j.at("attribute_spans")) {
      t.attribute_token_spans.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()});
    }
    t.merged_steps_2_3 = j.at("merged_steps_2_3");
    t.segmentation = j.at("attribute_segmentation") == "whole" ? AttributeSegmentation::whole
                                                               : AttributeSegmentation::per_sentence;
    t.completed_steps = j.at("completed_steps");
    t.step_latency_ms = j.at("step_latency_ms").get<std::vector<double>>();
    t.notes = j.at("notes").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("malformed trace record: ") + e.what());
  }
  return t;
}

// ---------------------------------------------------------------------------

CoTTrace run_chain(std::string_view image_bytes, std::string_view query, const MllmBackend& backend,
                   const ChainConfig& config) {
  if (trim(query).empty()) throw InvalidInput("user query is empty");
  CoTTrace trace;
  trace.image_digest = image_digest(image_bytes);
  trace.user_query = std::string(query);
  trace.query_is_question = is_question(query);
  trace.merged_steps_2_3 = config.mode == ChainMode::merged;
  trace.segmentation = config.segmentation;

  ConversationState conv(trace.image_digest);
  trace.reason_prompt = build_reason_prompt(query, trace.query_is_question, config.templates);
  if (trace.query_is_question) {
    conv.ask("", std::string(query));
  } else {
    conv.ask(config.templates.reason.body, std::string(query));
  }
  GenerationResult r1 = call_backend(backend, image_bytes, conv, config.retries, 1, trace);
  conv.answer(r1.text);
  trace.step_latency_ms.push_back(r1.latency_ms);
  trace.reason_answer = r1.text;
  trace.reason_result = std::move(r1);
  trace.completed_steps = 1;
  if (trim(trace.reason_answer).empty()) throw ChainError("step 1: empty response", 1, trace);

  finish_steps_2_3(trace, image_bytes, conv, backend, config, trace.reason_prompt);
  return trace;
}

CoTTrace run_chain_from_step1(std::string_view image_bytes, std::string_view question, std::string_view answer,
                              const MllmBackend& backend, const ChainConfig& config) {
  if (trim(question).empty() || trim(answer).empty()) throw InvalidInput("step-1 question and answer are required");
  CoTTrace trace;
  trace.image_digest = image_digest(image_bytes);
  trace.user_query = std::string(question);
  trace.query_is_question = true;
  trace.simulated_step1 = true;
  trace.reason_prompt = std::string(question);
  trace.reason_answer = std::string(answer);
  trace.reason_result = materialize_mock(std::string(answer), backend.embedding_width());
  trace.step_latency_ms.push_back(0.0);
  trace.completed_steps = 1;

  ConversationState conv(trace.image_digest);
  conv.ask("", std::string(question));
  conv.answer(std::string(answer));
  finish_steps_2_3(trace, image_bytes, conv, backend, config, trace.reason_prompt);
  return trace;
}

}  // namespace llavaseg
