#include "simmt/data.hpp"

#include <algorithm>
#include <cctype>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "simmt/error.hpp"

namespace simmt {

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

namespace {

void write_u32(std::ofstream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint32_t read_u32(std::ifstream& in, const std::string& path) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw DataError("truncated feature file: " + path);
  return v;
}

}  // namespace

std::vector<std::string> Vocabulary::tokenize(const std::string& line) {
  std::vector<std::string> tokens;
  std::string current;
  for (char c : line) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!current.empty()) {
        tokens.push_back(current);
        current.clear();
      }
    } else {
      current.push_back(
          static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!current.empty()) tokens.push_back(current);
  return tokens;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& lines,
                             int min_freq) {
  if (min_freq < 1) throw ConfigError("min_freq must be >= 1");
  std::map<std::string, int64_t> freq;
  for (const auto& line : lines) {
    for (auto& tok : tokenize(line)) freq[tok]++;
  }
  std::vector<std::pair<std::string, int64_t>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary v;
  v.id_to_token = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (const auto& [tok, count] : ranked) {
    if (count >= min_freq) v.id_to_token.push_back(tok);
  }
  v.rebuild_lookup();
  return v;
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> id_to_token) {
  if (id_to_token.size() < 4 || id_to_token[0] != "<pad>" ||
      id_to_token[1] != "<bos>" || id_to_token[2] != "<eos>" ||
      id_to_token[3] != "<unk>") {
    throw DataError("vocabulary must start with the four special tokens");
  }
  Vocabulary v;
  v.id_to_token = std::move(id_to_token);
  v.rebuild_lookup();
  return v;
}

void Vocabulary::rebuild_lookup() const {
  lookup_.clear();
  for (size_t i = 0; i < id_to_token.size(); ++i) {
    if (!lookup_.emplace(id_to_token[i], static_cast<int>(i)).second) {
      throw DataError("duplicate vocabulary token: " + id_to_token[i]);
    }
  }
}

int Vocabulary::token_id(const std::string& token) const {
  if (lookup_.size() != id_to_token.size()) rebuild_lookup();
  const auto it = lookup_.find(token);
  return it == lookup_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) {
    throw DataError("token id " + std::to_string(id) +
                    " out of range for vocabulary of size " +
                    std::to_string(size()));
  }
  return id_to_token[static_cast<size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::string& line,
                                    bool add_bos) const {
  return encode_tokens(tokenize(line), add_bos);
}

std::vector<int> Vocabulary::encode_tokens(
    const std::vector<std::string>& tokens, bool add_bos) const {
  std::vector<int> ids;
  ids.reserve(tokens.size() + 2);
  if (add_bos) ids.push_back(kBos);
  for (const auto& tok : tokens) ids.push_back(token_id(tok));
  ids.push_back(kEos);
  return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> tokens;
  for (int id : ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    tokens.push_back(token(id));
  }
  return tokens;
}

std::string Vocabulary::decode_string(const std::vector<int>& ids) const {
  std::string out;
  for (const auto& tok : decode(ids)) {
    if (!out.empty()) out.push_back(' ');
    out += tok;
  }
  return out;
}

RegionFeatureBank::RegionFeatureBank(int image_count, int max_regions,
                                     int feature_dim)
    : image_count_(image_count),
      max_regions_(max_regions),
      feature_dim_(feature_dim) {
  if (image_count < 1 || max_regions < 1 || feature_dim < 1) {
    throw DimensionError("feature bank dims must be positive");
  }
  valid_counts_.assign(static_cast<size_t>(image_count), 0);
  features_.assign(static_cast<size_t>(image_count) * max_regions * feature_dim,
                   0.0);
}

void RegionFeatureBank::check_image(int image) const {
  if (image < 0 || image >= image_count_) {
    throw DataError("image id " + std::to_string(image) +
                    " out of range [0, " + std::to_string(image_count_) + ")");
  }
}

int RegionFeatureBank::valid_count(int image) const {
  check_image(image);
  return valid_counts_[static_cast<size_t>(image)];
}

void RegionFeatureBank::set_valid_count(int image, int count) {
  check_image(image);
  if (count < 0 || count > max_regions_) {
    throw DataError("valid region count " + std::to_string(count) +
                    " outside [0, " + std::to_string(max_regions_) + "]");
  }
  valid_counts_[static_cast<size_t>(image)] = count;
}

double* RegionFeatureBank::features(int image) {
  check_image(image);
  return features_.data() +
         static_cast<size_t>(image) * max_regions_ * feature_dim_;
}

const double* RegionFeatureBank::features(int image) const {
  check_image(image);
  return features_.data() +
         static_cast<size_t>(image) * max_regions_ * feature_dim_;
}

void RegionFeatureBank::enable_boxes() {
  if (boxes_.empty()) {
    boxes_.assign(static_cast<size_t>(image_count_) * max_regions_ * 4, 0.0);
  }
}

void RegionFeatureBank::enable_labels() {
  if (labels_.empty()) {
    labels_.assign(static_cast<size_t>(image_count_) * max_regions_, "");
  }
}

BoundingBox RegionFeatureBank::box(int image, int region) const {
  check_image(image);
  if (!has_boxes()) throw DataError("feature bank stores no boxes");
  if (region < 0 || region >= max_regions_) {
    throw DataError("region " + std::to_string(region) + " out of range");
  }
  const size_t base =
      (static_cast<size_t>(image) * max_regions_ + region) * 4;
  return {boxes_[base], boxes_[base + 1], boxes_[base + 2], boxes_[base + 3]};
}

void RegionFeatureBank::set_box(int image, int region, const BoundingBox& b) {
  enable_boxes();
  check_image(image);
  if (region < 0 || region >= max_regions_) {
    throw DataError("region " + std::to_string(region) + " out of range");
  }
  const size_t base =
      (static_cast<size_t>(image) * max_regions_ + region) * 4;
  boxes_[base] = b.x1;
  boxes_[base + 1] = b.y1;
  boxes_[base + 2] = b.x2;
  boxes_[base + 3] = b.y2;
}

const std::string& RegionFeatureBank::label(int image, int region) const {
  check_image(image);
  if (!has_labels()) throw DataError("feature bank stores no labels");
  if (region < 0 || region >= max_regions_) {
    throw DataError("region " + std::to_string(region) + " out of range");
  }
  return labels_[static_cast<size_t>(image) * max_regions_ + region];
}

void RegionFeatureBank::set_label(int image, int region,
                                  const std::string& label) {
  enable_labels();
  check_image(image);
  if (region < 0 || region >= max_regions_) {
    throw DataError("region " + std::to_string(region) + " out of range");
  }
  labels_[static_cast<size_t>(image) * max_regions_ + region] = label;
}

Tensor RegionFeatureBank::image_tensor(int image) const {
  const int count = valid_count(image);
  if (count < 1) {
    throw DataError("image " + std::to_string(image) + " has no regions");
  }
  Tensor t({count, feature_dim_});
  const double* src = features(image);
  std::copy(src, src + static_cast<size_t>(count) * feature_dim_,
            t.data().begin());
  return t;
}

void RegionFeatureBank::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write feature file: " + path);
  out.write("SMRF", 4);
  write_u32(out, 1);  // version
  write_u32(out, static_cast<uint32_t>(image_count_));
  write_u32(out, static_cast<uint32_t>(max_regions_));
  write_u32(out, static_cast<uint32_t>(feature_dim_));
  const uint32_t flags =
      (has_boxes() ? 1u : 0u) | (has_labels() ? 2u : 0u);
  write_u32(out, flags);
  for (int v : valid_counts_) write_u32(out, static_cast<uint32_t>(v));
  if (has_boxes()) {
    for (double v : boxes_) {
      const float f = static_cast<float>(v);
      out.write(reinterpret_cast<const char*>(&f), sizeof(f));
    }
  }
  if (has_labels()) {
    for (const auto& label : labels_) {
      write_u32(out, static_cast<uint32_t>(label.size()));
      out.write(label.data(), static_cast<std::streamsize>(label.size()));
    }
  }
  for (double v : features_) {
    const float f = static_cast<float>(v);
    out.write(reinterpret_cast<const char*>(&f), sizeof(f));
  }
  if (!out) throw DataError("failed while writing feature file: " + path);
}

RegionFeatureBank RegionFeatureBank::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open feature file: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "SMRF", 4) != 0) {
    throw DataError("not a region feature file: " + path);
  }
  const uint32_t version = read_u32(in, path);
  if (version != 1) {
    throw DataError("unsupported feature file version " +
                    std::to_string(version) + ": " + path);
  }
  const auto image_count = static_cast<int>(read_u32(in, path));
  const auto max_regions = static_cast<int>(read_u32(in, path));
  const auto feature_dim = static_cast<int>(read_u32(in, path));
  const uint32_t flags = read_u32(in, path);
  RegionFeatureBank bank(image_count, max_regions, feature_dim);
  for (int i = 0; i < image_count; ++i) {
    bank.valid_counts_[static_cast<size_t>(i)] =
        static_cast<int>(read_u32(in, path));
    if (bank.valid_counts_[static_cast<size_t>(i)] > max_regions) {
      throw DataError("corrupt valid count in feature file: " + path);
    }
  }
  auto read_floats = [&](std::vector<double>& dst, size_t n) {
    std::vector<float> buf(n);
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw DataError("truncated feature file: " + path);
    dst.resize(n);
    for (size_t i = 0; i < n; ++i) dst[i] = static_cast<double>(buf[i]);
  };
  if (flags & 1u) {
    read_floats(bank.boxes_,
                static_cast<size_t>(image_count) * max_regions * 4);
  }
  if (flags & 2u) {
    bank.labels_.resize(static_cast<size_t>(image_count) * max_regions);
    for (auto& label : bank.labels_) {
      const uint32_t len = read_u32(in, path);
      if (len > (1u << 20)) throw DataError("corrupt label length: " + path);
      label.resize(len);
      in.read(label.data(), len);
      if (!in) throw DataError("truncated feature file: " + path);
    }
  }
  read_floats(bank.features_,
              static_cast<size_t>(image_count) * max_regions * feature_dim);
  return bank;
}

std::vector<ExampleAnnotation> load_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open annotations file: " + path);
  std::vector<ExampleAnnotation> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      ExampleAnnotation ann;
      ann.example = j.at("example").get<int>();
      for (const auto& e : j.at("entries")) {
        AnnotationEntry entry;
        entry.word_indices = e.at("words").get<std::vector<int>>();
        if (e.contains("regions")) {
          entry.region_indices = e.at("regions").get<std::vector<int>>();
        }
        if (e.contains("boxes")) {
          for (const auto& b : e.at("boxes")) {
            const auto v = b.get<std::vector<double>>();
            if (v.size() != 4) {
              throw DataError("box needs 4 coordinates");
            }
            entry.gold_boxes.push_back({v[0], v[1], v[2], v[3]});
          }
        }
        if (e.contains("label")) {
          entry.gold_label = e.at("label").get<std::string>();
        }
        if (entry.word_indices.empty()) {
          throw DataError("annotation entry without words");
        }
        ann.entries.push_back(std::move(entry));
      }
      out.push_back(std::move(ann));
    } catch (const nlohmann::json::exception& ex) {
      throw DataError("bad annotation line " + std::to_string(line_no) +
                      " in " + path + ": " + ex.what());
    }
  }
  return out;
}

void save_annotations(const std::vector<ExampleAnnotation>& annotations,
                      const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write annotations file: " + path);
  for (const auto& ann : annotations) {
    nlohmann::json j;
    j["example"] = ann.example;
    j["entries"] = nlohmann::json::array();
    for (const auto& e : ann.entries) {
      nlohmann::json je;
      je["words"] = e.word_indices;
      je["regions"] = e.region_indices;
      je["boxes"] = nlohmann::json::array();
      for (const auto& b : e.gold_boxes) {
        je["boxes"].push_back({b.x1, b.y1, b.x2, b.y2});
      }
      if (!e.gold_label.empty()) je["label"] = e.gold_label;
      j["entries"].push_back(std::move(je));
    }
    out << j.dump() << "\n";
  }
}

Dataset load_corpus(const CorpusPaths& paths, const Vocabulary& src_vocab,
                    const Vocabulary& tgt_vocab,
                    std::shared_ptr<RegionFeatureBank> shared_features) {
  const auto src_lines = read_lines(paths.src);
  const auto tgt_lines = read_lines(paths.tgt);
  if (src_lines.size() != tgt_lines.size()) {
    throw DataError("corpus line counts differ: " + paths.src + " has " +
                    std::to_string(src_lines.size()) + ", " + paths.tgt +
                    " has " + std::to_string(tgt_lines.size()));
  }
  if (src_lines.empty()) throw DataError("corpus is empty: " + paths.src);

  Dataset dataset;
  if (shared_features) {
    dataset.features = std::move(shared_features);
  } else if (!paths.features.empty()) {
    dataset.features =
        std::make_shared<RegionFeatureBank>(RegionFeatureBank::load(paths.features));
  }

  dataset.examples.reserve(src_lines.size());
  for (size_t i = 0; i < src_lines.size(); ++i) {
    MultimodalExample ex;
    ex.src = src_vocab.encode(src_lines[i], false);
    ex.tgt = tgt_vocab.encode(tgt_lines[i], true);
    dataset.examples.push_back(std::move(ex));
  }

  if (!paths.image_index.empty()) {
    if (!dataset.features) {
      throw DataError("image index given without region features");
    }
    const auto idx_lines = read_lines(paths.image_index);
    if (idx_lines.size() != src_lines.size()) {
      throw DataError("image index line count " +
                      std::to_string(idx_lines.size()) +
                      " does not match corpus size " +
                      std::to_string(src_lines.size()));
    }
    for (size_t i = 0; i < idx_lines.size(); ++i) {
      int id = -1;
      try {
        id = std::stoi(idx_lines[i]);
      } catch (const std::exception&) {
        throw DataError("bad image id at line " + std::to_string(i + 1) +
                        " in " + paths.image_index);
      }
      if (id < 0 || id >= dataset.features->image_count()) {
        throw DataError("image id " + std::to_string(id) + " at line " +
                        std::to_string(i + 1) + " outside bank of " +
                        std::to_string(dataset.features->image_count()) +
                        " images");
      }
      if (dataset.features->valid_count(id) < 1) {
        throw DataError("image " + std::to_string(id) +
                        " has no valid regions");
      }
      dataset.examples[i].image_id = id;
    }
  } else if (dataset.features) {
    throw DataError("region features given without an image index");
  }

  if (!paths.annotations.empty()) {
    if (!dataset.features) {
      throw DataError("annotations given without region features");
    }
    for (const auto& ann : load_annotations(paths.annotations)) {
      if (ann.example < 0 ||
          ann.example >= static_cast<int>(dataset.examples.size())) {
        throw DataError("annotation references example " +
                        std::to_string(ann.example) + " outside corpus of " +
                        std::to_string(dataset.examples.size()));
      }
      auto& ex = dataset.examples[static_cast<size_t>(ann.example)];
      const int n_words = static_cast<int>(ex.src.size());
      const int n_regions = dataset.features->valid_count(ex.image_id);
      std::vector<AlignmentEntry> supervised;
      for (const auto& entry : ann.entries) {
        for (int w : entry.word_indices) {
          // The trailing EOS is never an annotatable word.
          if (w < 0 || w >= n_words - 1) {
            throw DataError("annotation word index " + std::to_string(w) +
                            " outside sentence of " +
                            std::to_string(n_words - 1) + " words (example " +
                            std::to_string(ann.example) + ")");
          }
        }
        for (int r : entry.region_indices) {
          if (r < 0 || r >= n_regions) {
            throw DataError("annotation region index " + std::to_string(r) +
                            " outside image with " +
                            std::to_string(n_regions) + " regions (example " +
                            std::to_string(ann.example) + ")");
          }
        }
        if (!entry.region_indices.empty()) {
          supervised.push_back({entry.word_indices, entry.region_indices});
        }
      }
      ex.annotation = ann.entries;
      if (!supervised.empty()) {
        ex.alignment = build_alignment_matrix(supervised, n_words, n_regions);
      }
    }
  }
  return dataset;
}

std::vector<std::vector<int>> make_batches(int n_examples, int batch_size,
                                           bool shuffle, uint64_t seed,
                                           int epoch) {
  if (n_examples < 1) throw DataError("cannot batch an empty dataset");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<int> order(static_cast<size_t>(n_examples));
  for (int i = 0; i < n_examples; ++i) order[static_cast<size_t>(i)] = i;
  if (shuffle) {
    Rng rng = Rng(seed).child("epoch-" + std::to_string(epoch));
    rng.shuffle(order);
  }
  std::vector<std::vector<int>> batches;
  for (int start = 0; start < n_examples; start += batch_size) {
    const int end = std::min(n_examples, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

PaddedBatch make_padded_batch(const std::vector<MultimodalExample>& examples,
                              const RegionFeatureBank* bank) {
  if (examples.empty()) throw DataError("cannot pad an empty batch");
  PaddedBatch b;
  b.batch = static_cast<int>(examples.size());
  for (const auto& ex : examples) {
    if (ex.src.empty() || ex.tgt.size() < 2) {
      throw DataError("example needs |src| >= 1 and |tgt| >= 2");
    }
    b.src_len = std::max(b.src_len, static_cast<int>(ex.src.size()));
    b.tgt_len = std::max(b.tgt_len, static_cast<int>(ex.tgt.size()) - 1);
    if (bank) {
      if (ex.image_id < 0) {
        throw DataError("multimodal batch contains an example without image");
      }
      b.regions = std::max(b.regions, bank->valid_count(ex.image_id));
    }
  }

  b.src.assign(static_cast<size_t>(b.batch) * b.src_len, Vocabulary::kPad);
  b.tgt_in.assign(static_cast<size_t>(b.batch) * b.tgt_len, Vocabulary::kPad);
  b.tgt_out.assign(static_cast<size_t>(b.batch) * b.tgt_len, Vocabulary::kPad);
  if (bank) {
    b.features = Tensor({b.batch, b.regions, bank->feature_dim()}, 0.0);
  }
  for (int i = 0; i < b.batch; ++i) {
    const auto& ex = examples[static_cast<size_t>(i)];
    const int sn = static_cast<int>(ex.src.size());
    const int tn = static_cast<int>(ex.tgt.size()) - 1;
    b.src_lens.push_back(sn);
    b.tgt_lens.push_back(tn);
    std::copy(ex.src.begin(), ex.src.end(),
              b.src.begin() + static_cast<size_t>(i) * b.src_len);
    std::copy(ex.tgt.begin(), ex.tgt.end() - 1,
              b.tgt_in.begin() + static_cast<size_t>(i) * b.tgt_len);
    std::copy(ex.tgt.begin() + 1, ex.tgt.end(),
              b.tgt_out.begin() + static_cast<size_t>(i) * b.tgt_len);
    if (bank) {
      const int count = bank->valid_count(ex.image_id);
      b.region_counts.push_back(count);
      const double* src = bank->features(ex.image_id);
      std::copy(src, src + static_cast<size_t>(count) * bank->feature_dim(),
                b.features.data().begin() +
                    (static_cast<size_t>(i) * b.regions) * bank->feature_dim());
    }
    b.alignments.push_back(ex.alignment);
  }
  return b;
}

void SyntheticCorpusSpec::validate() const {
  if (train_examples < 1 || val_examples < 1) {
    throw ConfigError("synthetic corpus needs train and val examples");
  }
  if (ambiguity < 0.0 || ambiguity > 1.0) {
    throw ConfigError("ambiguity must be in [0, 1]");
  }
  if (archetypes < 2) throw ConfigError("archetypes must be >= 2");
  if (min_len < 1 || max_len < min_len) {
    throw ConfigError("need 1 <= min_len <= max_len");
  }
  if (ambiguous_types < max_len) {
    throw ConfigError(
        "ambiguous_types must be >= max_len so types never repeat within a "
        "sentence");
  }
  if (plain_types < 1) throw ConfigError("plain_types must be >= 1");
  if (feature_noise < 0.0) throw ConfigError("feature_noise must be >= 0");
}

int SyntheticCorpusSpec::feature_dim() const {
  return ambiguous_types + archetypes + 2 * max_len + 1;
}

namespace {

struct SyntheticSentence {
  std::vector<std::string> src_tokens, tgt_tokens;
  std::vector<int> ambiguous_positions;
  std::vector<int> types, archetypes;  // per ambiguous position
};

SyntheticSentence sample_sentence(const SyntheticCorpusSpec& spec, Rng& rng) {
  SyntheticSentence s;
  const int len =
      static_cast<int>(rng.uniform_int(spec.min_len, spec.max_len));
  std::vector<int> type_pool(static_cast<size_t>(spec.ambiguous_types));
  for (int i = 0; i < spec.ambiguous_types; ++i) {
    type_pool[static_cast<size_t>(i)] = i;
  }
  rng.shuffle(type_pool);
  size_t next_type = 0;
  for (int j = 0; j < len; ++j) {
    if (rng.uniform() < spec.ambiguity) {
      const int m = type_pool[next_type++];
      const int a = static_cast<int>(rng.uniform_int(0, spec.archetypes - 1));
      s.src_tokens.push_back("amb" + std::to_string(m));
      s.tgt_tokens.push_back("t" + std::to_string(m) + "a" +
                             std::to_string(a));
      s.ambiguous_positions.push_back(j);
      s.types.push_back(m);
      s.archetypes.push_back(a);
    } else {
      const int f = static_cast<int>(rng.uniform_int(0, spec.plain_types - 1));
      s.src_tokens.push_back("obj" + std::to_string(f));
      s.tgt_tokens.push_back("tobj" + std::to_string(f));
    }
  }
  return s;
}

BoundingBox slot_box(int slot) {
  const double x = 10.0 * slot;
  return {x, 0.0, x + 8.0, 8.0};
}

void write_region(RegionFeatureBank& bank, const SyntheticCorpusSpec& spec,
                  int image, int region, int type, int archetype, int slot,
                  const std::string& label, Rng& noise_rng) {
  double* row = bank.features(image) +
                static_cast<size_t>(region) * spec.feature_dim();
  for (int d = 0; d < spec.feature_dim(); ++d) {
    row[d] = noise_rng.normal(0.0, spec.feature_noise);
  }
  if (type >= 0) row[type] += 1.0;
  if (archetype >= 0) row[spec.ambiguous_types + archetype] += 1.0;
  row[spec.ambiguous_types + spec.archetypes + slot] += 1.0;
  bank.set_box(image, region, slot_box(slot));
  bank.set_label(image, region, label);
}

void write_lines(const std::string& path,
                 const std::vector<std::string>& lines) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  for (const auto& line : lines) out << line << "\n";
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& tok : tokens) {
    if (!out.empty()) out.push_back(' ');
    out += tok;
  }
  return out;
}

}  // namespace

SyntheticCorpus generate_synthetic_corpus(const SyntheticCorpusSpec& spec,
                                          const std::string& out_dir) {
  spec.validate();
  std::filesystem::create_directories(out_dir);
  const int total = spec.train_examples + spec.val_examples;
  RegionFeatureBank bank(total, 2 * spec.max_len + 1, spec.feature_dim());
  bank.enable_boxes();
  bank.enable_labels();

  Rng root(spec.seed);
  Rng sentence_rng = root.child("sentences");
  Rng slot_rng = root.child("slots");
  Rng noise_rng = root.child("noise");

  std::vector<std::string> src_lines, tgt_lines, idx_lines;
  std::vector<ExampleAnnotation> annotations;
  src_lines.reserve(static_cast<size_t>(total));

  const int n_slots = 2 * spec.max_len;
  for (int image = 0; image < total; ++image) {
    const SyntheticSentence s = sample_sentence(spec, sentence_rng);
    src_lines.push_back(join_tokens(s.src_tokens));
    tgt_lines.push_back(join_tokens(s.tgt_tokens));
    idx_lines.push_back(std::to_string(image));

    // Region 0 is a background filler so every image has a region.
    write_region(bank, spec, image, 0, -1, -1, n_slots, "bg", noise_rng);
    int region = 1;

    // Slots: each ambiguous word grounds at slot == its position; its
    // distractor takes a random free slot, so region order never encodes
    // the answer.
    std::vector<uint8_t> used(static_cast<size_t>(n_slots), 0);
    for (int j : s.ambiguous_positions) used[static_cast<size_t>(j)] = 1;

    ExampleAnnotation ann;
    ann.example = image;
    for (size_t w = 0; w < s.ambiguous_positions.size(); ++w) {
      const int j = s.ambiguous_positions[w];
      const int m = s.types[w];
      const int a = s.archetypes[w];
      const std::string label =
          "t" + std::to_string(m) + "a" + std::to_string(a);

      const int gold_region = region++;
      write_region(bank, spec, image, gold_region, m, a, j, label, noise_rng);

      int distractor_slot;
      do {
        distractor_slot = static_cast<int>(slot_rng.uniform_int(0, n_slots - 1));
      } while (used[static_cast<size_t>(distractor_slot)]);
      used[static_cast<size_t>(distractor_slot)] = 1;
      const int distractor_region = region++;
      write_region(bank, spec, image, distractor_region, m, a, distractor_slot,
                   label, noise_rng);

      AnnotationEntry entry;
      entry.word_indices = {j};
      entry.region_indices = {gold_region};
      entry.gold_boxes = {slot_box(j)};
      entry.gold_label = label;
      ann.entries.push_back(std::move(entry));
    }
    bank.set_valid_count(image, region);
    if (!ann.entries.empty()) annotations.push_back(std::move(ann));
  }

  const auto dir = std::filesystem::path(out_dir);
  SyntheticCorpus files;
  files.train_src = (dir / "train.src").string();
  files.train_tgt = (dir / "train.tgt").string();
  files.train_idx = (dir / "train.idx").string();
  files.train_ann = (dir / "train.ann.jsonl").string();
  files.val_src = (dir / "val.src").string();
  files.val_tgt = (dir / "val.tgt").string();
  files.val_idx = (dir / "val.idx").string();
  files.val_ann = (dir / "val.ann.jsonl").string();
  files.features = (dir / "features.bin").string();
  files.embeddings = (dir / "embeddings.txt").string();
  files.manifest = (dir / "manifest.json").string();

  auto slice = [](const std::vector<std::string>& v, int from, int to) {
    return std::vector<std::string>(v.begin() + from, v.begin() + to);
  };
  write_lines(files.train_src, slice(src_lines, 0, spec.train_examples));
  write_lines(files.train_tgt, slice(tgt_lines, 0, spec.train_examples));
  write_lines(files.train_idx, slice(idx_lines, 0, spec.train_examples));
  write_lines(files.val_src, slice(src_lines, spec.train_examples, total));
  write_lines(files.val_tgt, slice(tgt_lines, spec.train_examples, total));
  write_lines(files.val_idx, slice(idx_lines, spec.train_examples, total));

  std::vector<ExampleAnnotation> train_ann, val_ann;
  for (const auto& ann : annotations) {
    if (ann.example < spec.train_examples) {
      train_ann.push_back(ann);
    } else {
      ExampleAnnotation shifted = ann;
      shifted.example -= spec.train_examples;
      val_ann.push_back(std::move(shifted));
    }
  }
  save_annotations(train_ann, files.train_ann);
  save_annotations(val_ann, files.val_ann);
  bank.save(files.features);

  // Label embeddings: type block then archetype block, so labels sharing a
  // type keep partial similarity across archetypes.
  {
    std::ofstream out(files.embeddings);
    if (!out) throw DataError("cannot write embeddings: " + files.embeddings);
    const int dim = spec.ambiguous_types + spec.archetypes;
    for (int m = 0; m < spec.ambiguous_types; ++m) {
      for (int a = 0; a < spec.archetypes; ++a) {
        out << "t" << m << "a" << a;
        for (int d = 0; d < dim; ++d) {
          const double v =
              (d == m || d == spec.ambiguous_types + a) ? 1.0 : 0.0;
          out << " " << v;
        }
        out << "\n";
      }
    }
    out << "bg";
    for (int d = 0; d < dim; ++d) out << " " << 0.01;
    out << "\n";
  }

  {
    nlohmann::json manifest;
    manifest["train_examples"] = spec.train_examples;
    manifest["val_examples"] = spec.val_examples;
    manifest["ambiguous_types"] = spec.ambiguous_types;
    manifest["plain_types"] = spec.plain_types;
    manifest["archetypes"] = spec.archetypes;
    manifest["min_len"] = spec.min_len;
    manifest["max_len"] = spec.max_len;
    manifest["ambiguity"] = spec.ambiguity;
    manifest["feature_noise"] = spec.feature_noise;
    manifest["seed"] = spec.seed;
    manifest["feature_dim"] = spec.feature_dim();
    manifest["max_regions"] = bank.max_regions();
    std::ofstream out(files.manifest);
    if (!out) throw DataError("cannot write manifest: " + files.manifest);
    out << manifest.dump(2) << "\n";
  }
  return files;
}

}  // namespace simmt
