#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tpsalign/tensor.hpp"

namespace tpsalign {

// The four retrieval settings. Cross-view (AG) galleries contain strictly the
// other view, so same-identity same-view distractors are excluded by
// construction; same-view settings exclude only the query itself.
enum class Protocol { kAll, kGroundGround, kAerialAerial, kAerialGround };

Protocol protocol_from_string(const std::string& name);
std::string protocol_to_string(Protocol p);

struct RetrievalMetrics {
  std::string protocol;
  double rank1 = 0.0;  // percent
  double map = 0.0;    // percent
  double minp = 0.0;   // percent
  int64_t queries = 0;   // scored queries
  int64_t gallery = 0;   // gallery size of the last scored query
  int64_t skipped = 0;   // queries with no relevant gallery item
};

// AP and INP of a single ranked list; flags[k] = 1 when the item at rank k+1
// shares the query identity. AP averages precision at each hit; INP is the
// relevant count over the rank of the last hit. Both are fractions in [0, 1].
double average_precision(const std::vector<int>& flags);
double inverse_negative_penalty(const std::vector<int>& flags);

// Self-retrieval evaluation: every admissible row is a query ranked against
// the protocol's gallery by Euclidean distance, ties broken by index.
// Queries without a relevant gallery item are skipped and counted. Throws
// ConfigError when the protocol leaves no query or an empty gallery.
RetrievalMetrics evaluate_embeddings(const Tensor& embeddings,  // N x D
                                     const std::vector<int64_t>& identities,
                                     const std::vector<int64_t>& views,
                                     Protocol protocol);

}  // namespace tpsalign
