#include <fstream>

#include "json.hpp"
#include "pcfglab/errors.hpp"
#include "pcfglab/sampler.hpp"

namespace pcfglab {

void write_corpus(const Grammar& g, const Corpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open corpus file for writing: " + path);
  for (const auto& s : corpus.sentences) {
    nlohmann::json j;
    j["tokens"] = g.tokens_to_strings(s.tokens);
    auto buckets = nlohmann::json::array();
    for (std::size_t slot = 0; slot < s.bucket.size(); ++slot)
      buckets.push_back(s.bucket_name(g, static_cast<int>(slot)));
    j["buckets"] = std::move(buckets);
    j["rule_trace"] = s.rule_trace;
    j["seed"] = s.seed;
    j["index"] = s.index;
    out << j.dump() << "\n";
  }
  if (!out) throw DataError("write failed: " + path);
}

Corpus read_corpus(const Grammar& g, const SubgrammarDag& dag, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file: " + path);
  Corpus corpus;
  corpus.grammar_name = g.name;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      nlohmann::json j = nlohmann::json::parse(line);
      std::vector<int> trace = j.at("rule_trace").get<std::vector<int>>();
      DerivationTree t = tree_from_trace(g, trace);
      AnnotatedSentence s = linearize(g, dag, t);
      s.seed = j.at("seed").get<std::uint64_t>();
      s.index = j.at("index").get<std::uint64_t>();
      // cross-check the stored surface form against the rebuilt one
      auto tokens = j.at("tokens").get<std::vector<std::string>>();
      if (tokens != g.tokens_to_strings(s.tokens))
        throw DataError("tokens do not match the rule trace");
      auto buckets = j.at("buckets").get<std::vector<std::string>>();
      if (buckets.size() != s.bucket.size())
        throw DataError("bucket array has wrong length");
      for (std::size_t slot = 0; slot < buckets.size(); ++slot)
        if (buckets[slot] != s.bucket_name(g, static_cast<int>(slot)))
          throw DataError("bucket mismatch at slot " + std::to_string(slot));
      corpus.sentences.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw DataError("corpus line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!corpus.sentences.empty()) corpus.seed = corpus.sentences.front().seed;
  return corpus;
}

}  // namespace pcfglab
