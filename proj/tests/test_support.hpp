#pragma once

// Helpers shared by the test programs: a deterministic fake scorer, a
// full-sort ranking oracle, scratch directories and tiny models.

#include <algorithm>
#include <filesystem>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <unistd.h>

#include "kgedit/container.hpp"
#include "kgedit/kgdata.hpp"
#include "kgedit/kgemodel.hpp"

namespace kgedit::testing {

// score(query, e) from a hash of both; `levels` > 0 quantizes the scores so
// that ties are common.
class HashScorer : public kg::EntityScorer {
 public:
  HashScorer(std::size_t entities, std::size_t levels, std::uint64_t salt = 0)
      : entities_(entities), levels_(levels), salt_(salt) {}
  std::size_t num_entities() const override { return entities_; }
  std::vector<double> score(std::span<const kg::QueryKey> queries) const override {
    std::vector<double> out;
    for (const auto& q : queries) {
      const auto r = row(q);
      out.insert(out.end(), r.begin(), r.end());
    }
    return out;
  }
  std::vector<double> row(const kg::QueryKey& q) const {
    std::vector<double> r(entities_);
    for (std::size_t e = 0; e < entities_; ++e) {
      std::string key = std::to_string(static_cast<int>(q.direction)) + ":" + std::to_string(q.known) +
                        ":" + std::to_string(q.relation) + ":" + std::to_string(e) + ":" +
                        std::to_string(salt_);
      const std::uint64_t h = io::fnv1a64(key);
      const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
      r[e] = levels_ > 0 ? static_cast<double>(static_cast<std::size_t>(u * levels_)) : u;
    }
    return r;
  }

 private:
  std::size_t entities_, levels_;
  std::uint64_t salt_;
};

// Position of `gold` after sorting every entity by (score desc, id asc).
inline std::size_t oracle_rank(std::span<const double> scores, std::size_t gold) {
  std::vector<std::size_t> ids(scores.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return static_cast<std::size_t>(std::find(ids.begin(), ids.end(), gold) - ids.begin()) + 1;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag)
      : path_(std::filesystem::temp_directory_path() / ("kgedit_" + tag + "_" + std::to_string(::getpid()))) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline model::ModelConfig tiny_config(std::size_t entities, std::size_t relations,
                                      std::uint64_t seed = 3) {
  model::ModelConfig c;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq_len = 8;
  c.entity_vocab_size = entities;
  c.relation_vocab_size = relations;
  c.seed = seed;
  return c;
}

inline std::shared_ptr<model::BaseModel> tiny_model(std::size_t entities, std::size_t relations,
                                                    std::uint64_t seed = 3) {
  return std::make_shared<model::BaseModel>(tiny_config(entities, relations, seed));
}

}  // namespace kgedit::testing
