#include "llavaseg/backend.hpp"

#include <httplib.h>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <random>
#include <thread>

#include "llavaseg/error.hpp"
#include "llavaseg/hash.hpp"

namespace llavaseg {

using nlohmann::json;

void GenerationResult::validate() const {
  if (static_cast<Eigen::Index>(tokens.size()) != embeddings.rows()) {
    throw InvalidInput("generation result has " + std::to_string(tokens.size()) + " tokens but " +
                       std::to_string(embeddings.rows()) + " embedding rows");
  }
  std::size_t last_end = 0;
  for (const auto& t : tokens) {
    if (t.offsets.begin > t.offsets.end || t.offsets.end > text.size() || t.offsets.begin < last_end) {
      throw InvalidInput("token offsets are out of order or outside the response text");
    }
    last_end = t.offsets.end;
  }
  if (latency_ms < 0.0) throw InvalidInput("negative latency");
}

bool identical(const GenerationResult& a, const GenerationResult& b) {
  return a.text == b.text && a.tokens == b.tokens && a.embeddings.rows() == b.embeddings.rows() &&
         a.embeddings.cols() == b.embeddings.cols() && a.embeddings == b.embeddings;
}

GenerationResult concat_results(const GenerationResult& a, const GenerationResult& b,
                                std::string_view separator) {
  if (a.embeddings.cols() != b.embeddings.cols() && a.tokens.size() > 0 && b.tokens.size() > 0) {
    throw ShapeError("cannot concatenate results of different embedding widths");
  }
  GenerationResult out;
  out.text = a.text;
  out.text.append(separator);
  const std::size_t shift = out.text.size();
  out.text += b.text;
  out.tokens = a.tokens;
  for (Token t : b.tokens) {
    t.offsets.begin += shift;
    t.offsets.end += shift;
    out.tokens.push_back(std::move(t));
  }
  const Eigen::Index width = std::max(a.embeddings.cols(), b.embeddings.cols());
  out.embeddings.resize(a.embeddings.rows() + b.embeddings.rows(), width);
  if (a.embeddings.rows() > 0) out.embeddings.topRows(a.embeddings.rows()) = a.embeddings;
  if (b.embeddings.rows() > 0) out.embeddings.bottomRows(b.embeddings.rows()) = b.embeddings;
  out.latency_ms = a.latency_ms + b.latency_ms;
  return out;
}

EmbeddingMatrix slice_embeddings(const GenerationResult& result, const std::vector<Span>& spans) {
  const auto n = static_cast<std::size_t>(result.embeddings.rows());
  std::size_t rows = 0;
  for (const auto& s : spans) {
    if (s.begin > s.end || s.end > n) {
      throw InvalidSpan("span [" + std::to_string(s.begin) + "," + std::to_string(s.end) +
                        ") is invalid for " + std::to_string(n) + " tokens");
    }
    rows += s.size();
  }
  EmbeddingMatrix out(static_cast<Eigen::Index>(rows), result.embeddings.cols());
  Eigen::Index r = 0;
  for (const auto& s : spans) {
    const auto len = static_cast<Eigen::Index>(s.size());
    if (len == 0) continue;
    out.middleRows(r, len) = result.embeddings.middleRows(static_cast<Eigen::Index>(s.begin), len);
    r += len;
  }
  return out;
}

// ---------------------------------------------------------------------------

void BackendDescriptor::validate() const {
  if (embedding_width <= 0) throw ConfigError("embedding_width must be positive");
  if (kind == Kind::remote && endpoint.empty()) throw ConfigError("remote backend needs an endpoint");
  if (kind == Kind::remote && !endpoint.starts_with("http://")) {
    throw ConfigError("remote endpoint must be an http:// URL (TLS is not built in): " + endpoint);
  }
  if (kind == Kind::scripted && script_path.empty()) throw ConfigError("scripted backend needs a script path");
  if (max_tokens <= 0) throw ConfigError("max_tokens must be positive");
}

BackendDescriptor BackendDescriptor::load(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("backend descriptor " + path + ": " + e.what());
  }
  BackendDescriptor d;
  const std::string kind = j.value("kind", "scripted");
  if (kind == "remote") {
    d.kind = Kind::remote;
  } else if (kind == "scripted") {
    d.kind = Kind::scripted;
  } else {
    throw ConfigError("unknown backend kind '" + kind + "'");
  }
  d.endpoint = j.value("endpoint", "");
  d.script_path = j.value("script", "");
  // Script paths are relative to the descriptor.
  if (!d.script_path.empty() && d.script_path.front() != '/') {
    const auto slash = path.find_last_of('/');
    if (slash != std::string::npos) d.script_path = path.substr(0, slash + 1) + d.script_path;
  }
  d.embedding_width = j.value("embedding_width", 64);
  d.model = j.value("model", "mock");
  d.layer = j.value("layer", "final");
  d.max_tokens = j.value("max_tokens", 512);
  d.timeout_ms = j.value("timeout_ms", 30000);
  d.validate();
  return d;
}

std::string BackendDescriptor::to_json() const {
  json j{{"kind", kind == Kind::remote ? "remote" : "scripted"},
         {"embedding_width", embedding_width},
         {"model", model},
         {"layer", layer},
         {"max_tokens", max_tokens},
         {"timeout_ms", timeout_ms}};
  if (kind == Kind::remote) j["endpoint"] = endpoint;
  else j["script"] = script_path;
  return j.dump(2);
}

std::unique_ptr<MllmBackend> make_backend(const BackendDescriptor& desc) {
  desc.validate();
  if (desc.kind == BackendDescriptor::Kind::remote) return std::make_unique<RemoteBackend>(desc);
  return std::make_unique<ScriptedBackend>(ScriptedBackend::from_file(desc.script_path, desc.embedding_width));
}

// ---------------------------------------------------------------------------

namespace {

bool is_word_byte(unsigned char c) { return std::isalnum(c) || c == '\'' || c >= 0x80; }

std::string lowercase(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::size_t common_prefix(std::string_view a, std::string_view b) {
  std::size_t n = 0;
  while (n < a.size() && n < b.size() && a[n] == b[n]) ++n;
  return n;
}

}  // namespace

std::vector<Token> mock_tokenize(std::string_view text) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
      continue;
    }
    std::size_t j = i + 1;
    if (is_word_byte(c)) {
      while (j < text.size() && is_word_byte(static_cast<unsigned char>(text[j]))) ++j;
    }
    out.push_back({std::string(text.substr(i, j - i)), {i, j}});
    i = j;
  }
  return out;
}

Eigen::RowVectorXf mock_token_embedding(std::string_view token, int width) {
  std::mt19937_64 gen(fnv1a64(lowercase(token)));
  constexpr double kScale = 1.0 / 9007199254740992.0;  // 2^-53
  auto uniform = [&] { return (static_cast<double>(gen() >> 11) + 0.5) * kScale; };
  Eigen::RowVectorXf v(width);
  for (int i = 0; i < width; i += 2) {
    // Box-Muller on the raw engine output keeps the stream identical across
    // standard library implementations.
    const double r = std::sqrt(-2.0 * std::log(uniform()));
    const double theta = 2.0 * std::numbers::pi * uniform();
    v[i] = static_cast<float>(r * std::cos(theta));
    if (i + 1 < width) v[i + 1] = static_cast<float>(r * std::sin(theta));
  }
  return v;
}

GenerationResult materialize_mock(std::string text, int width) {
  GenerationResult r;
  r.tokens = mock_tokenize(text);
  r.text = std::move(text);
  r.embeddings.resize(static_cast<Eigen::Index>(r.tokens.size()), width);
  for (std::size_t i = 0; i < r.tokens.size(); ++i) {
    r.embeddings.row(static_cast<Eigen::Index>(i)) = mock_token_embedding(r.tokens[i].text, width);
  }
  return r;
}

std::string image_digest(std::string_view image_bytes) { return sha256_hex(image_bytes); }

std::string script_key(std::string_view image_bytes, std::string_view rendered_history) {
  std::string material = image_digest(image_bytes);
  material.push_back('\n');
  material.append(rendered_history);
  return sha256_hex(material);
}

// ---------------------------------------------------------------------------

ScriptedBackend::ScriptedBackend(std::vector<ScriptEntry> entries, int width) : width_(width) {
  if (width <= 0) throw ConfigError("embedding width must be positive");
  for (auto& e : entries) entries_[e.key] = std::move(e);
}

ScriptedBackend ScriptedBackend::from_file(const std::string& path, int width) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open script " + path);
  std::vector<ScriptEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      entries.push_back({j.at("key").get<std::string>(), j.value("image_digest", ""),
                         j.value("history", ""), j.at("text").get<std::string>()});
    } catch (const json::exception& e) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return ScriptedBackend(std::move(entries), width);
}

GenerationResult ScriptedBackend::generate(std::string_view image_bytes,
                                           std::string_view rendered_history) const {
  const std::string key = script_key(image_bytes, rendered_history);
  if (auto it = entries_.find(key); it != entries_.end()) {
    return materialize_mock(it->second.text, width_);
  }
  const std::string digest = image_digest(image_bytes);
  std::string nearest;
  std::pair<int, std::size_t> best{-1, 0};
  for (const auto& [k, e] : entries_) {
    const std::pair<int, std::size_t> score{e.image_digest == digest ? 1 : 0,
                                            common_prefix(e.history, rendered_history)};
    if (score > best) {
      best = score;
      nearest = k;
    }
  }
  throw ScriptMissError(key, nearest);
}

GenerationResult CallbackBackend::generate(std::string_view image_bytes,
                                           std::string_view rendered_history) const {
  return materialize_mock(responder_(image_bytes, rendered_history), width_);
}

GenerationResult RecordingBackend::generate(std::string_view image_bytes,
                                            std::string_view rendered_history) const {
  GenerationResult r = inner_.generate(image_bytes, rendered_history);
  ScriptEntry e{script_key(image_bytes, rendered_history), image_digest(image_bytes),
                std::string(rendered_history), r.text};
  std::lock_guard lock(mu_);
  captured_[e.key] = std::move(e);
  return r;
}

std::vector<ScriptEntry> RecordingBackend::entries() const {
  std::lock_guard lock(mu_);
  std::vector<ScriptEntry> out;
  out.reserve(captured_.size());
  for (const auto& [k, e] : captured_) out.push_back(e);
  return out;
}

void RecordingBackend::append_to(const std::string& path) const { write_script(path, entries(), true); }

void write_script(const std::string& path, const std::vector<ScriptEntry>& entries, bool append) {
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw IoError("cannot write script " + path);
  for (const auto& e : entries) {
    out << json{{"key", e.key}, {"image_digest", e.image_digest}, {"history", e.history}, {"text", e.text}}.dump()
        << '\n';
  }
}

// ---------------------------------------------------------------------------

RemoteBackend::RemoteBackend(BackendDescriptor desc) : desc_(std::move(desc)) {
  desc_.validate();
  const auto scheme_end = desc_.endpoint.find("://");
  const auto path_start =
      desc_.endpoint.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
  scheme_host_port_ = desc_.endpoint.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : desc_.endpoint.substr(path_start);
}

GenerationResult RemoteBackend::generate(std::string_view image_bytes,
                                         std::string_view rendered_history) const {
  httplib::Client client(scheme_host_port_);
  const auto timeout = std::chrono::milliseconds(desc_.timeout_ms);
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);
  httplib::Headers headers;
  if (const char* token = std::getenv(kBackendCredentialEnv); token != nullptr && *token != '\0') {
    headers.emplace("Authorization", std::string("Bearer ") + token);
  }
  const json request{{"image", base64_encode(image_bytes)},
                     {"prompt", std::string(rendered_history)},
                     {"max_tokens", desc_.max_tokens},
                     {"layer", desc_.layer},
                     {"model", desc_.model}};

  const auto start = std::chrono::steady_clock::now();
  auto res = client.Post(path_, headers, request.dump(), "application/json");
  const auto stop = std::chrono::steady_clock::now();
  if (!res) {
    throw BackendError("request to " + desc_.endpoint + " failed: " + httplib::to_string(res.error()), true);
  }
  if (res->status >= 500) throw BackendError("endpoint returned HTTP " + std::to_string(res->status), true);
  if (res->status != 200) throw BackendError("endpoint returned HTTP " + std::to_string(res->status), false);

  GenerationResult out;
  try {
    const json body = json::parse(res->body);
    out.text = body.at("text").get<std::string>();
    for (const auto& t : body.at("tokens")) {
      out.tokens.push_back({t.at("text").get<std::string>(),
                            {t.at("begin").get<std::size_t>(), t.at("end").get<std::size_t>()}});
    }
    const auto flat = body.at("embeddings").get<std::vector<float>>();
    const auto n = static_cast<Eigen::Index>(out.tokens.size());
    if (static_cast<Eigen::Index>(flat.size()) != n * desc_.embedding_width) {
      throw BackendError("embedding payload has " + std::to_string(flat.size()) + " values, expected " +
                             std::to_string(n * desc_.embedding_width),
                         false);
    }
    out.embeddings = Eigen::Map<const EmbeddingMatrix>(flat.data(), n, desc_.embedding_width);
  } catch (const json::exception& e) {
    throw BackendError(std::string("malformed response body: ") + e.what(), false);
  }
  out.latency_ms = std::chrono::duration<double, std::milli>(stop - start).count();
  out.validate();
  return out;
}

}  // namespace llavaseg
