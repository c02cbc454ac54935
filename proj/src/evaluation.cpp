#include "simmt/evaluation.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace simmt {

double iou(const BoundingBox& a, const BoundingBox& b) {
  auto area = [](const BoundingBox& box, const char* which) {
    const double w = box.x2 - box.x1;
    const double h = box.y2 - box.y1;
    if (w <= 0.0 || h <= 0.0) {
      throw NumericError(std::string("degenerate ") + which +
                         " bounding box: [" + std::to_string(box.x1) + ", " +
                         std::to_string(box.y1) + ", " +
                         std::to_string(box.x2) + ", " +
                         std::to_string(box.y2) + "]");
    }
    return w * h;
  };
  const double area_a = area(a, "first");
  const double area_b = area(b, "second");
  const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  return inter / (area_a + area_b - inter);
}

GroundingScore grounding_score(const std::vector<GroundingRecord>& records,
                               double iou_threshold) {
  if (records.empty()) {
    throw DataError("grounding_score needs at least one record");
  }
  GroundingScore score;
  for (const auto& r : records) {
    if (r.gold_boxes.empty()) {
      throw DataError("grounding record has no gold boxes");
    }
    double best = 0.0;
    for (const auto& gold : r.gold_boxes) {
      best = std::max(best, iou(r.predicted_box, gold));
    }
    score.mean_iou += best;
    if (best >= iou_threshold) score.accuracy += 1.0;
    ++score.count;
  }
  score.mean_iou /= score.count;
  score.accuracy /= score.count;
  return score;
}

EmbeddingTable load_embeddings(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open embeddings file: " + path);
  EmbeddingTable table;
  std::string line;
  size_t line_no = 0;
  size_t dim = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string token;
    ss >> token;
    std::vector<double> vec;
    double v;
    while (ss >> v) vec.push_back(v);
    if (token.empty() || vec.empty()) {
      throw DataError("bad embedding line " + std::to_string(line_no) +
                      " in " + path);
    }
    if (dim == 0) {
      dim = vec.size();
    } else if (vec.size() != dim) {
      throw DataError("embedding dim changed from " + std::to_string(dim) +
                      " to " + std::to_string(vec.size()) + " at line " +
                      std::to_string(line_no) + " in " + path);
    }
    table[token] = std::move(vec);
  }
  if (table.empty()) throw DataError("embeddings file is empty: " + path);
  return table;
}

LabelSimilarity label_similarity(const std::string& predicted,
                                 const std::string& gold,
                                 const EmbeddingTable& embeddings) {
  LabelSimilarity sim;
  sim.exact = !predicted.empty() && predicted == gold;
  const auto pit = embeddings.find(predicted);
  const auto git = embeddings.find(gold);
  if (pit == embeddings.end() || git == embeddings.end()) return sim;
  const auto& p = pit->second;
  const auto& g = git->second;
  double dot = 0.0, np = 0.0, ng = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    dot += p[i] * g[i];
    np += p[i] * p[i];
    ng += g[i] * g[i];
  }
  if (np == 0.0 || ng == 0.0) return sim;
  sim.cosine = dot / (std::sqrt(np) * std::sqrt(ng));
  return sim;
}

LabelScore label_score(const std::vector<std::pair<std::string, std::string>>&
                           predicted_gold_pairs,
                       const EmbeddingTable& embeddings) {
  if (predicted_gold_pairs.empty()) {
    throw DataError("label_score needs at least one pair");
  }
  LabelScore score;
  double cosine_sum = 0.0;
  for (const auto& [pred, gold] : predicted_gold_pairs) {
    const LabelSimilarity sim = label_similarity(pred, gold, embeddings);
    if (sim.exact) score.exact_rate += 1.0;
    if (sim.cosine) {
      cosine_sum += *sim.cosine;
      ++score.cosine_count;
    }
    ++score.count;
  }
  score.exact_rate /= score.count;
  if (score.cosine_count > 0) score.mean_cosine = cosine_sum / score.cosine_count;
  return score;
}

}  // namespace simmt
