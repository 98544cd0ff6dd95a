#include "janus/tokens.hpp"

#include "janus/common.hpp"

namespace janus {

std::string_view sector_name(Sector s) {
  switch (s) {
    case Sector::front: return "front";
    case Sector::side: return "side";
    case Sector::back: return "back";
  }
  return "?";
}

std::string_view sector_phrase(Sector s) {
  switch (s) {
    case Sector::front: return "front view";
    case Sector::side: return "side view";
    case Sector::back: return "back view";
  }
  return "?";
}

Sector sector_from_phrase(std::string_view phrase) {
  if (phrase == "front view") return Sector::front;
  if (phrase == "side view") return Sector::side;
  if (phrase == "back view") return Sector::back;
  throw VocabularyError("unknown sector phrase: " + std::string(phrase));
}

Sector sector_from_name(std::string_view name) {
  if (name == "front") return Sector::front;
  if (name == "side") return Sector::side;
  if (name == "back") return Sector::back;
  throw VocabularyError("unknown sector name: " + std::string(name));
}

}  // namespace janus

namespace janus::diffusion {

TokenRole Vocabulary::role(int id) const {
  if (id < 0 || id >= size()) throw VocabularyError("token id out of range: " + std::to_string(id));
  if (id == kNull) return TokenRole::null;
  if (id == kObject) return TokenRole::object;
  if (id <= kBack) return TokenRole::viewpoint;
  return TokenRole::descriptor;
}

int Vocabulary::descriptor_token(int i) const {
  if (i < 0 || i >= descriptors) throw VocabularyError("descriptor index out of range");
  return kFirstDescriptor + i;
}

std::string Vocabulary::name(int id) const {
  switch (role(id)) {
    case TokenRole::null: return "<null>";
    case TokenRole::object: return "object";
    case TokenRole::viewpoint: return std::string(sector_name(static_cast<Sector>(id - kFront)));
    case TokenRole::descriptor: return "d" + std::to_string(id - kFirstDescriptor);
  }
  return "?";
}

void TokenSequence::validate(const Vocabulary& vocab) const {
  if (ids.empty()) throw ContractError("token sequence must not be empty");
  if (ids.size() != roles.size()) throw ContractError("token ids and roles differ in length");
  int viewpoints = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (vocab.role(ids[i]) != roles[i]) throw ContractError("token role does not match vocabulary");
    if (roles[i] == TokenRole::viewpoint) ++viewpoints;
  }
  if (viewpoints > 1) throw ContractError("at most one viewpoint token allowed");
}

std::optional<std::size_t> TokenSequence::viewpoint_index() const {
  for (std::size_t i = 0; i < roles.size(); ++i)
    if (roles[i] == TokenRole::viewpoint) return i;
  return std::nullopt;
}

std::optional<Sector> TokenSequence::viewpoint_sector() const {
  const auto i = viewpoint_index();
  if (!i) return std::nullopt;
  return static_cast<Sector>(ids[*i] - Vocabulary::kFront);
}

std::size_t TokenSequence::descriptor_count() const {
  std::size_t n = 0;
  for (auto r : roles) n += r == TokenRole::descriptor;
  return n;
}

TokenSequence TokenSequence::from_ids(const Vocabulary& vocab, std::vector<int> ids) {
  TokenSequence s;
  s.roles.reserve(ids.size());
  for (int id : ids) s.roles.push_back(vocab.role(id));
  s.ids = std::move(ids);
  s.validate(vocab);
  return s;
}

TokenSequence TokenSequence::object_prompt(const Vocabulary& vocab, int descriptors) {
  std::vector<int> ids{Vocabulary::kObject};
  for (int i = 0; i < descriptors; ++i) ids.push_back(vocab.descriptor_token(i));
  return from_ids(vocab, std::move(ids));
}

std::string to_string(const Vocabulary& vocab, const TokenSequence& seq) {
  std::string out = "[";
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out += ", ";
    out += vocab.name(seq.ids[i]);
  }
  return out + "]";
}

}  // namespace janus::diffusion
