#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace janus {

enum class Sector : std::uint8_t { front = 0, side = 1, back = 2 };

constexpr std::size_t kSectorCount = 3;

std::string_view sector_name(Sector s);
/// "front view" / "side view" / "back view".
std::string_view sector_phrase(Sector s);
/// Inverse of sector_phrase; throws VocabularyError for anything else.
Sector sector_from_phrase(std::string_view phrase);
Sector sector_from_name(std::string_view name);

}  // namespace janus

namespace janus::diffusion {

enum class TokenRole : std::uint8_t { object, viewpoint, descriptor, null };

/// Fixed toy vocabulary: null, object, the three viewpoint words, then
/// `descriptors` descriptor words.
struct Vocabulary {
  static constexpr int kNull = 0;
  static constexpr int kObject = 1;
  static constexpr int kFront = 2;
  static constexpr int kSide = 3;
  static constexpr int kBack = 4;
  static constexpr int kFirstDescriptor = 5;

  int descriptors = 8;

  int size() const { return kFirstDescriptor + descriptors; }
  TokenRole role(int id) const;
  int viewpoint_token(Sector s) const { return kFront + static_cast<int>(s); }
  int descriptor_token(int i) const;
  std::string name(int id) const;
};

struct TokenSequence {
  std::vector<int> ids;
  std::vector<TokenRole> roles;

  std::size_t size() const { return ids.size(); }
  /// Checks length >= 1, ids in range, roles consistent, at most one viewpoint.
  void validate(const Vocabulary& vocab) const;
  std::optional<std::size_t> viewpoint_index() const;
  std::optional<Sector> viewpoint_sector() const;
  std::size_t descriptor_count() const;
  bool operator==(const TokenSequence&) const = default;

  /// Builds a sequence from ids, deriving roles from the vocabulary.
  static TokenSequence from_ids(const Vocabulary& vocab, std::vector<int> ids);
  /// [object, d_0, ..., d_{n-1}] with an empty viewpoint slot.
  static TokenSequence object_prompt(const Vocabulary& vocab, int descriptors = 0);
};

std::string to_string(const Vocabulary& vocab, const TokenSequence& seq);

}  // namespace janus::diffusion
