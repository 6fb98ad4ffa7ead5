#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <filesystem>
#include <fstream>

#include "llavaseg/orchestrator.hpp"
#include "support.hpp"

using namespace llavaseg;

namespace {

// Answers by looking at the last user turn, like the synthetic responder.
std::string fire_pit(std::string_view, std::string_view history) {
  const std::string h(history);
  const std::string last = h.substr(h.rfind("USER: "));
  if (last.find("Follow these guidelines strictly") != std::string::npos) {
    return "The user wants the fire from the image. The fire is bright orange. It sits in the centre of the pit.";
  }
  if (last.find("identify the distinct physical objects") != std::string::npos) {
    return "The user wants the fire from the image.";
  }
  if (last.find("The target is:") != std::string::npos) {
    return "The fire is bright orange. It sits in the centre of the pit.";
  }
  return "It is fire in the fire pit. The fire is hot.";
}

class FlakyBackend final : public MllmBackend {
 public:
  FlakyBackend(int failures, bool retryable) : failures_(failures), retryable_(retryable) {}
  GenerationResult generate(std::string_view image, std::string_view history) const override {
    if (calls_++ < failures_) throw BackendError("transient", retryable_);
    return materialize_mock(fire_pit(image, history), 8);
  }
  int embedding_width() const override { return 8; }
  int calls() const { return calls_; }

 private:
  int failures_;
  bool retryable_;
  mutable std::atomic<int> calls_{0};
};

std::string span_text(const GenerationResult& r, Span s) {
  return r.text.substr(r.tokens[s.begin].offsets.begin, r.tokens[s.end - 1].offsets.end - r.tokens[s.begin].offsets.begin);
}

}  // namespace

TEST_CASE("default templates carry the expected slots") {
  const TemplateSet t = TemplateSet::defaults();
  CHECK(t.reason.body.find("What is the object or part that is [USER QUERY] in this image?") != std::string::npos);
  CHECK(t.merged.body.find("Follow these guidelines strictly") != std::string::npos);
  CHECK(t.target.body.find("identify the distinct physical objects") != std::string::npos);
  CHECK(t.attribute.body.find("The target is:") != std::string::npos);
  CHECK(find_placeholders(t.merged.body) == std::set<std::string>{"QUESTION", "ANSWER"});
  const TemplateSet back = TemplateSet::parse(t.serialize());
  CHECK(back.merged.body == t.merged.body);
  CHECK(back.attribute.template_id == t.attribute.template_id);
}

TEST_CASE("rendering is single-pass and rejects missing values") {
  const PromptTemplate t{"x", "Q: [QUESTION] A: [ANSWER]", PromptStep::merged_target_attribute};
  CHECK(t.render({{"QUESTION", "what is [ANSWER]?"}, {"ANSWER", "fire"}}) == "Q: what is [ANSWER]? A: fire");
  CHECK_THROWS_AS(t.render({{"QUESTION", "q"}}), RenderError);
  CHECK_THROWS_AS(TemplateSet::parse("### merged m\nno slots\n"), ConfigError);
  CHECK_THROWS_AS(TemplateSet::parse("stray\n### reason r\n[USER QUERY]\n"), ConfigError);
}

TEST_CASE("question detection and reason prompt") {
  CHECK(is_question("where is the dog?"));
  CHECK(is_question("What lights the room"));
  CHECK_FALSE(is_question("hot"));
  CHECK(build_reason_prompt("hot", false) == "What is the object or part that is hot in this image?");
  CHECK(build_reason_prompt("where is it?", true) == "where is it?");
  CHECK_THROWS_AS(build_reason_prompt("  ", false), InvalidInput);
  CHECK_THROWS_AS(build_merged_target_attribute_prompt("q", ""), InvalidInput);
  const auto sep = build_separate_prompts("q", "a", "");
  CHECK(sep.attribute.empty());
  CHECK(build_separate_prompts("q", "a", "the fire").attribute.find("the fire") != std::string::npos);
}

TEST_CASE("target parsing strips frames and splits multiple targets") {
  CHECK(parse_target("The user wants the fire from the image.") == "the fire");
  CHECK(parse_target("1. The target is: the red kite. It flies.") == "the red kite");
  CHECK(parse_target("It is the dog in this image") == "the dog");
  const auto many = parse_targets("The user wants the cup, the plate and the fork.");
  CHECK(many.target == "the cup");
  CHECK(many.others == std::vector<std::string>{"the plate", "the fork"});
  CHECK_THROWS_AS(parse_targets("   "), ParseError);
  CHECK_THROWS_AS(parse_targets("The user wants."), ParseError);
}

TEST_CASE("conversation turns are append-only") {
  ConversationState c("img");
  c.ask("Describe [USER QUERY] here.", "the dog");
  CHECK_THROWS_AS(c.ask("x", "y"), InvalidInput);
  c.answer("A dog.");
  CHECK_THROWS_AS(c.answer("again"), InvalidInput);
  c.ask("", "and the cat?");
  CHECK(c.render() == "USER: Describe the dog here.\nASSISTANT: A dog.\nUSER: and the cat?\nASSISTANT:");
}

TEST_CASE("merged chain extracts target and attribute spans") {
  CallbackBackend be(fire_pit, 8);
  const CoTTrace t = run_chain("img", "hot", be);
  CHECK(t.completed_steps == 3);
  CHECK(t.merged_steps_2_3);
  CHECK(t.target == "the fire");
  CHECK(t.reason_prompt == "What is the object or part that is hot in this image?");
  CHECK(t.attributes == "The fire is bright orange. It sits in the centre of the pit.");
  CHECK(span_text(t.span_source, t.target_token_span) == "the fire");
  REQUIRE(t.attribute_token_spans.size() == 1);
  CHECK(span_text(t.span_source, t.attribute_token_spans[0]) == t.attributes);
  CHECK(t.step_latency_ms.size() == 2);
}

TEST_CASE("separate chain makes three calls and offsets attributes past the step-2 text") {
  CallbackBackend inner(fire_pit, 8);
  RecordingBackend be(inner);
  ChainConfig cfg;
  cfg.mode = ChainMode::separate;
  cfg.segmentation = AttributeSegmentation::per_sentence;
  const CoTTrace t = run_chain("img", "hot", be, cfg);
  CHECK(be.entries().size() == 3);
  CHECK_FALSE(t.merged_steps_2_3);
  CHECK(t.target == "the fire");
  CHECK(t.attribute_response == "The fire is bright orange. It sits in the centre of the pit.");
  REQUIRE(t.attribute_token_spans.size() == 2);
  CHECK(span_text(t.span_source, t.attribute_token_spans[0]) == "The fire is bright orange.");
  CHECK(span_text(t.span_source, t.attribute_token_spans[1]) == "It sits in the centre of the pit.");
  for (const auto& s : t.attribute_token_spans) CHECK(s.begin >= t.target_token_span.end);
}

TEST_CASE("simulated step 1 skips the first backend call") {
  CallbackBackend inner(fire_pit, 8);
  RecordingBackend be(inner);
  const CoTTrace t = run_chain_from_step1("img", "Where is the fire?", "It is the fire.", be);
  CHECK(t.simulated_step1);
  CHECK(be.entries().size() == 1);
  CHECK(t.reason_result.embeddings.rows() == 5);  // It, is, the, fire, .
  CHECK(t.target == "the fire");
}

TEST_CASE("retries cover transient failures; others surface as chain errors with a partial trace") {
  FlakyBackend once(1, true);
  CHECK(run_chain("img", "hot", once).completed_steps == 3);
  FlakyBackend hard(1, false);
  try {
    run_chain("img", "hot", hard);
    FAIL("expected a chain error");
  } catch (const ChainError& e) {
    CHECK(e.step() == 1);
    CHECK(e.partial_trace().completed_steps == 0);
  }
  // A reply with nothing to parse fails at step 2 with step 1 intact.
  CallbackBackend mute([](std::string_view, std::string_view h) -> std::string {
    return std::string(h).find("Follow these") != std::string::npos ? "." : "It is the fire.";
  }, 8);
  try {
    run_chain("img", "hot", mute);
    FAIL("expected a chain error");
  } catch (const ChainError& e) {
    CHECK(e.step() == 2);
    CHECK(e.partial_trace().completed_steps == 1);
    CHECK(e.partial_trace().reason_answer == "It is the fire.");
  }
  CHECK_THROWS_AS(run_chain("img", " ", mute), InvalidInput);
}

TEST_CASE("trace JSON round-trips the serialized fields") {
  CallbackBackend be(fire_pit, 8);
  const CoTTrace t = run_chain("img", "hot", be);
  const CoTTrace back = CoTTrace::from_json_line(t.to_json_line());
  CHECK(back.target == t.target);
  CHECK(back.attributes == t.attributes);
  CHECK(back.target_token_span == t.target_token_span);
  CHECK(back.attribute_token_spans == t.attribute_token_spans);
  CHECK(back.image_digest == t.image_digest);
  CHECK(back.to_json_line() == t.to_json_line());
  CHECK(t.to_json_line().find('\n') == std::string::npos);
  CHECK_THROWS_AS(CoTTrace::from_json_line("{}"), InvalidInput);
}
