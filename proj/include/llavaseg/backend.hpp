#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

namespace llavaseg {

using EmbeddingMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Half-open index range [begin, end).
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const noexcept { return end - begin; }
  bool operator==(const Span&) const = default;
};

struct Token {
  std::string text;
  Span offsets;  // byte offsets into GenerationResult::text
  bool operator==(const Token&) const = default;
};

/// One model continuation with its per-token embeddings (num_tokens x d_llm).
struct GenerationResult {
  std::string text;
  std::vector<Token> tokens;
  EmbeddingMatrix embeddings;
  double latency_ms = 0.0;

  /// Throws InvalidInput if the token list and embedding rows disagree or
  /// offsets are out of order.
  void validate() const;
};

bool identical(const GenerationResult& a, const GenerationResult& b);

/// Concatenates two results as if they were one response separated by
/// `separator`; token offsets of `b` are shifted accordingly.
GenerationResult concat_results(const GenerationResult& a, const GenerationResult& b,
                                std::string_view separator = "\n");

/// Row-concatenation of the embedding rows covered by `spans`, in order.
EmbeddingMatrix slice_embeddings(const GenerationResult& result, const std::vector<Span>& spans);

struct BackendDescriptor {
  enum class Kind { remote, scripted };
  Kind kind = Kind::scripted;
  std::string endpoint;     // remote: http://host:port/path
  std::string script_path;  // scripted
  int embedding_width = 64;
  std::string model = "mock";
  std::string layer = "final";
  int max_tokens = 512;
  int timeout_ms = 30000;

  void validate() const;
  static BackendDescriptor load(const std::string& path);
  std::string to_json() const;
};

class MllmBackend {
 public:
  virtual ~MllmBackend() = default;
  /// Model continuation of `rendered_history` conditioned on the image.
  /// Implementations must be safe to call concurrently.
  virtual GenerationResult generate(std::string_view image_bytes,
                                    std::string_view rendered_history) const = 0;
  virtual int embedding_width() const = 0;
};

std::unique_ptr<MllmBackend> make_backend(const BackendDescriptor& desc);

// Deterministic mock machinery shared by the scripted and callback backends.
std::vector<Token> mock_tokenize(std::string_view text);
/// Unit-variance pseudorandom vector seeded by the lowercased token string.
Eigen::RowVectorXf mock_token_embedding(std::string_view token, int width);
GenerationResult materialize_mock(std::string text, int width);

std::string image_digest(std::string_view image_bytes);
std::string script_key(std::string_view image_bytes, std::string_view rendered_history);

struct ScriptEntry {
  std::string key;
  std::string image_digest;
  std::string history;
  std::string text;
};

/// Replays canned responses keyed by (image digest, rendered history).
class ScriptedBackend final : public MllmBackend {
 public:
  ScriptedBackend(std::vector<ScriptEntry> entries, int width);
  static ScriptedBackend from_file(const std::string& path, int width);

  GenerationResult generate(std::string_view image_bytes,
                            std::string_view rendered_history) const override;
  int embedding_width() const override { return width_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::map<std::string, ScriptEntry> entries_;
  int width_;
};

/// Mock whose responses come from a callback; used to synthesize scripts.
class CallbackBackend final : public MllmBackend {
 public:
  using Responder = std::function<std::string(std::string_view image_bytes,
                                              std::string_view rendered_history)>;
  CallbackBackend(Responder responder, int width) : responder_(std::move(responder)), width_(width) {}

  GenerationResult generate(std::string_view image_bytes,
                            std::string_view rendered_history) const override;
  int embedding_width() const override { return width_; }

 private:
  Responder responder_;
  int width_;
};

/// Wraps another backend and captures every exchange as a script entry.
class RecordingBackend final : public MllmBackend {
 public:
  explicit RecordingBackend(const MllmBackend& inner) : inner_(inner) {}

  GenerationResult generate(std::string_view image_bytes,
                            std::string_view rendered_history) const override;
  int embedding_width() const override { return inner_.embedding_width(); }

  std::vector<ScriptEntry> entries() const;
  /// Appends the captured entries to a JSONL script file.
  void append_to(const std::string& path) const;

 private:
  const MllmBackend& inner_;
  mutable std::mutex mu_;
  mutable std::map<std::string, ScriptEntry> captured_;
};

void write_script(const std::string& path, const std::vector<ScriptEntry>& entries, bool append);

/// HTTP client. Request body: {"image": base64, "prompt", "max_tokens", "layer"}.
/// Response body: {"text", "tokens": [{"text","begin","end"}], "embeddings": [row-major float32]}.
class RemoteBackend final : public MllmBackend {
 public:
  explicit RemoteBackend(BackendDescriptor desc);

  GenerationResult generate(std::string_view image_bytes,
                            std::string_view rendered_history) const override;
  int embedding_width() const override { return desc_.embedding_width; }

 private:
  BackendDescriptor desc_;
  std::string scheme_host_port_;
  std::string path_;
};

/// Environment variable holding an optional bearer token for remote endpoints.
inline constexpr const char* kBackendCredentialEnv = "LLAVASEG_BACKEND_TOKEN";

}  // namespace llavaseg
