#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "llavaseg/backend.hpp"
#include "llavaseg/error.hpp"

namespace llavaseg {

enum class PromptStep { reason, target, attribute, merged_target_attribute };

std::string to_string(PromptStep step);
PromptStep parse_prompt_step(std::string_view name);

/// Placeholder names (`[NAME]`, upper-case) appearing in `text`.
std::set<std::string> find_placeholders(std::string_view text);

struct PromptTemplate {
  std::string template_id;
  std::string body;
  PromptStep step = PromptStep::reason;

  /// Single-pass substitution; inserted values are never rescanned. Throws
  /// RenderError if a placeholder in the body has no value.
  std::string render(const std::map<std::string, std::string>& values) const;
};

/// One template per step. The text file format is a sequence of sections,
/// each introduced by a `### <step> [id]` line.
struct TemplateSet {
  PromptTemplate reason;
  PromptTemplate target;
  PromptTemplate attribute;
  PromptTemplate merged;

  static TemplateSet defaults();
  static TemplateSet load(const std::string& path);
  static TemplateSet parse(std::string_view text);
  std::string serialize() const;
};

/// Queries ending in '?' or opening with what/which/where/who/how.
bool is_question(std::string_view query);

std::string build_reason_prompt(std::string_view query, bool query_is_question,
                                const TemplateSet& templates = TemplateSet::defaults());
std::string build_merged_target_attribute_prompt(std::string_view question, std::string_view answer,
                                                 const TemplateSet& templates = TemplateSet::defaults());
struct SeparatePrompts {
  std::string target;
  std::string attribute;
};
/// `target` may be empty, in which case only the target prompt is rendered.
SeparatePrompts build_separate_prompts(std::string_view question, std::string_view answer,
                                       std::string_view target,
                                       const TemplateSet& templates = TemplateSet::defaults());

struct ParsedTargets {
  std::string target;
  std::vector<std::string> others;  // further targets named in the same sentence
};
ParsedTargets parse_targets(std::string_view step2_response);
std::string parse_target(std::string_view step2_response);

struct Turn {
  std::string task_prompt;
  std::string user_query;
  std::optional<std::string> answer;

  /// {T_p, T_q}: the query fills `[USER QUERY]` when the task prompt has it,
  /// otherwise the two are joined by a space.
  std::string prompt() const;
};

/// Multi-turn conversation bound to one image. Turns are append-only and each
/// answer is set once.
class ConversationState {
 public:
  explicit ConversationState(std::string image_ref) : image_ref_(std::move(image_ref)) {}

  void ask(std::string task_prompt, std::string user_query);
  void answer(std::string text);

  std::string render() const;
  static std::string render_turn(const Turn& turn);

  const std::vector<Turn>& turns() const noexcept { return turns_; }
  const std::string& image_ref() const noexcept { return image_ref_; }

 private:
  std::string image_ref_;
  std::vector<Turn> turns_;
};

enum class ChainMode { merged, separate };
enum class AttributeSegmentation { whole, per_sentence };

std::string to_string(ChainMode mode);
ChainMode parse_chain_mode(std::string_view name);

struct ChainConfig {
  ChainMode mode = ChainMode::merged;
  AttributeSegmentation segmentation = AttributeSegmentation::whole;
  int retries = 1;
  TemplateSet templates = TemplateSet::defaults();
};

struct CoTTrace {
  std::string image_digest;
  std::string user_query;
  bool query_is_question = false;
  bool simulated_step1 = false;

  std::string reason_prompt;
  std::string reason_answer;
  std::string target_response;     // step-2 output (the whole reply in merged mode)
  std::string attribute_response;  // step-3 output (empty in merged mode)

  std::string target;
  std::vector<std::string> other_targets;
  std::string attributes;

  /// Spans index `span_source.tokens`.
  Span target_token_span;
  std::vector<Span> attribute_token_spans;
  bool merged_steps_2_3 = true;
  AttributeSegmentation segmentation = AttributeSegmentation::whole;

  int completed_steps = 0;
  std::vector<double> step_latency_ms;
  std::vector<std::string> notes;

  // Not serialized: raw backend output for embedding extraction.
  GenerationResult reason_result;
  GenerationResult span_source;

  std::string to_json_line() const;
  /// Restores the serialized fields; the two results stay empty.
  static CoTTrace from_json_line(std::string_view line);
};

/// Chain stopped before completing; `step()` is the 1-based step that failed.
class ChainError : public Error {
 public:
  ChainError(const std::string& what, int step, CoTTrace partial)
      : Error("chain", what), step_(step), partial_(std::move(partial)) {}
  int step() const noexcept { return step_; }
  const CoTTrace& partial_trace() const noexcept { return partial_; }

 private:
  int step_;
  CoTTrace partial_;
};

CoTTrace run_chain(std::string_view image_bytes, std::string_view query, const MllmBackend& backend,
                   const ChainConfig& config = {});

/// Runs steps 2-3 after an externally supplied step-1 exchange (used for
/// datasets whose step 1 is simulated from a Q-A template).
CoTTrace run_chain_from_step1(std::string_view image_bytes, std::string_view question,
                              std::string_view answer, const MllmBackend& backend,
                              const ChainConfig& config = {});

/// Token span covering every token that overlaps text bytes [begin, end).
std::optional<Span> tokens_covering(const GenerationResult& result, std::size_t begin, std::size_t end);

}  // namespace llavaseg
