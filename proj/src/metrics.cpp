#include "tpsalign/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "tpsalign/common.hpp"

namespace tpsalign {

Protocol protocol_from_string(const std::string& name) {
  if (name == "ALL") return Protocol::kAll;
  if (name == "GG") return Protocol::kGroundGround;
  if (name == "AA") return Protocol::kAerialAerial;
  if (name == "AG") return Protocol::kAerialGround;
  throw ConfigError("unknown protocol: " + name + " (expected ALL, GG, AA, AG)");
}

std::string protocol_to_string(Protocol p) {
  switch (p) {
    case Protocol::kAll: return "ALL";
    case Protocol::kGroundGround: return "GG";
    case Protocol::kAerialAerial: return "AA";
    case Protocol::kAerialGround: return "AG";
  }
  throw ConfigError("invalid protocol value");
}

double average_precision(const std::vector<int>& flags) {
  int64_t hits = 0;
  double ap = 0.0;
  for (size_t k = 0; k < flags.size(); ++k) {
    if (flags[k]) {
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(k + 1);
    }
  }
  if (hits == 0) throw ConfigError("average_precision needs >= 1 relevant item");
  return ap / static_cast<double>(hits);
}

double inverse_negative_penalty(const std::vector<int>& flags) {
  int64_t hits = 0;
  size_t last = 0;
  for (size_t k = 0; k < flags.size(); ++k) {
    if (flags[k]) {
      ++hits;
      last = k + 1;
    }
  }
  if (hits == 0)
    throw ConfigError("inverse_negative_penalty needs >= 1 relevant item");
  return static_cast<double>(hits) / static_cast<double>(last);
}

namespace {

bool query_admissible(Protocol p, int64_t view) {
  switch (p) {
    case Protocol::kAll: return true;
    case Protocol::kGroundGround: return view == 0;
    case Protocol::kAerialAerial: return view == 1;
    case Protocol::kAerialGround: return true;  // both directions
  }
  return false;
}

bool gallery_admissible(Protocol p, int64_t qview, int64_t gview) {
  switch (p) {
    case Protocol::kAll: return true;
    case Protocol::kGroundGround: return gview == 0;
    case Protocol::kAerialAerial: return gview == 1;
    case Protocol::kAerialGround: return gview != qview;
  }
  return false;
}

}  // namespace

RetrievalMetrics evaluate_embeddings(const Tensor& embeddings,
                                     const std::vector<int64_t>& identities,
                                     const std::vector<int64_t>& views,
                                     Protocol protocol) {
  if (embeddings.rank() != 2)
    throw ConfigError("evaluate_embeddings expects an N x D matrix");
  const int64_t n = embeddings.shape(0);
  const int64_t d = embeddings.shape(1);
  if (static_cast<int64_t>(identities.size()) != n ||
      static_cast<int64_t>(views.size()) != n)
    throw ConfigError("identities/views must have one entry per embedding");

  RetrievalMetrics out;
  out.protocol = protocol_to_string(protocol);
  double rank1_sum = 0.0, ap_sum = 0.0, inp_sum = 0.0;
  int64_t scored = 0;
  bool any_query = false;

  std::vector<std::pair<double, int64_t>> ranked;
  for (int64_t q = 0; q < n; ++q) {
    if (!query_admissible(protocol, views[q])) continue;
    any_query = true;

    ranked.clear();
    int64_t relevant = 0;
    for (int64_t g = 0; g < n; ++g) {
      if (g == q) continue;
      if (!gallery_admissible(protocol, views[q], views[g])) continue;
      double dist2 = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        const double diff = embeddings.at(q, j) - embeddings.at(g, j);
        dist2 += diff * diff;
      }
      ranked.emplace_back(dist2, g);
      if (identities[g] == identities[q]) ++relevant;
    }
    if (ranked.empty())
      throw ConfigError("protocol " + out.protocol +
                        " leaves an empty gallery");
    if (relevant == 0) {
      ++out.skipped;
      continue;
    }
    std::sort(ranked.begin(), ranked.end());

    int64_t hits = 0;
    double ap = 0.0;
    size_t last = 0;
    for (size_t k = 0; k < ranked.size(); ++k) {
      if (identities[ranked[k].second] == identities[q]) {
        ++hits;
        ap += static_cast<double>(hits) / static_cast<double>(k + 1);
        last = k + 1;
      }
    }
    rank1_sum += identities[ranked.front().second] == identities[q] ? 1.0 : 0.0;
    ap_sum += ap / static_cast<double>(relevant);
    inp_sum += static_cast<double>(relevant) / static_cast<double>(last);
    ++scored;
    out.gallery = static_cast<int64_t>(ranked.size());
  }

  if (!any_query)
    throw ConfigError("protocol " + out.protocol + " leaves no queries");
  if (scored == 0)
    throw ConfigError("protocol " + out.protocol +
                      " left no query with a relevant match");
  out.queries = scored;
  out.rank1 = 100.0 * rank1_sum / static_cast<double>(scored);
  out.map = 100.0 * ap_sum / static_cast<double>(scored);
  out.minp = 100.0 * inp_sum / static_cast<double>(scored);
  return out;
}

}  // namespace tpsalign
