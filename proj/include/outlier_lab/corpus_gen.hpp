#pragma once

// Seeded generator for a synthetic toy language used as the bundled desk
// corpus. Documents pick a topic that biases their content words, sentences
// follow a small grammar with determiner/noun and subject/verb number
// agreement, and word choice inside each class is Zipf-distributed. Masked
// tokens are therefore predictable from local syntax and document topic.

#include "outlier_lab/rng.hpp"

#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

namespace olab {

struct ToyCorpusOptions {
  std::uint64_t seed = 20240601;
  std::size_t n_documents = 4000;
  std::size_t n_topics = 8;
  std::size_t nouns_per_topic = 30;
  std::size_t verbs_per_topic = 20;
  std::size_t adjectives_per_topic = 10;
  std::size_t shared_adjectives = 40;
  std::size_t names = 30;
  std::size_t adverbs = 15;
  std::size_t min_sentences = 4;
  std::size_t max_sentences = 12;
};

namespace detail {

class ToyLexicon {
 public:
  ToyLexicon(const ToyCorpusOptions& opt, Rng& rng) {
    for (std::size_t t = 0; t < opt.n_topics; ++t) {
      nouns.push_back(words(opt.nouns_per_topic, 2, "", rng));
      verbs.push_back(words(opt.verbs_per_topic, 2, "", rng));
      topic_adjectives.push_back(words(opt.adjectives_per_topic, 2, "ic", rng));
    }
    shared_nouns = words(opt.nouns_per_topic, 2, "", rng);
    shared_verbs = words(opt.verbs_per_topic / 2, 2, "", rng);
    adjectives = words(opt.shared_adjectives, 2, "ish", rng);
    names = words(opt.names, 3, "", rng);
    adverbs = words(opt.adverbs, 2, "ly", rng);
  }

  std::vector<std::vector<std::string>> nouns, verbs, topic_adjectives;
  std::vector<std::string> shared_nouns, shared_verbs, adjectives, names, adverbs;

 private:
  std::vector<std::string> words(std::size_t n, std::size_t syllables, const std::string& suffix,
                                 Rng& rng) {
    static constexpr std::array<const char*, 14> onset{"b", "d", "f", "g", "k", "l", "m",
                                                       "n", "p", "r", "t", "v", "z", "dr"};
    static constexpr std::array<const char*, 6> vowel{"a", "e", "i", "o", "u", "ai"};
    std::vector<std::string> out;
    while (out.size() < n) {
      std::string w;
      for (std::size_t s = 0; s < syllables; ++s) {
        w += onset[rng.below(onset.size())];
        w += vowel[rng.below(vowel.size())];
      }
      w += suffix;
      // keep words unique across classes so every class is identifiable
      if (used_.insert(w).second && used_.insert(w + "s").second) out.push_back(w);
    }
    return out;
  }

  std::set<std::string> used_;
};

/// Index drawn with probability proportional to 1 / (rank + 1).
inline std::size_t zipf(std::size_t n, Rng& rng) {
  double norm = 0.0;
  for (std::size_t i = 0; i < n; ++i) norm += 1.0 / static_cast<double>(i + 1);
  double u = rng.uniform() * norm;
  for (std::size_t i = 0; i < n; ++i) {
    u -= 1.0 / static_cast<double>(i + 1);
    if (u < 0.0) return i;
  }
  return n - 1;
}

}  // namespace detail

inline std::string generate_toy_corpus(const ToyCorpusOptions& opt = {}) {
  Rng rng(opt.seed);
  detail::ToyLexicon lex(opt, rng);
  auto pick = [&](const std::vector<std::string>& v) -> const std::string& {
    return v[detail::zipf(v.size(), rng)];
  };

  std::string out;
  for (std::size_t d = 0; d < opt.n_documents; ++d) {
    const std::size_t topic = rng.below(opt.n_topics);
    const std::string& protagonist = pick(lex.names);
    auto noun_phrase = [&](bool& plural) {
      std::string np;
      plural = rng.uniform() < 0.3;
      if (plural) {
        static constexpr std::array<const char*, 4> det{"the", "some", "these", "many"};
        np += det[detail::zipf(det.size(), rng)];
      } else {
        static constexpr std::array<const char*, 4> det{"the", "a", "this", "every"};
        np += det[detail::zipf(det.size(), rng)];
      }
      if (rng.uniform() < 0.4) {
        np += ' ';
        np += rng.uniform() < 0.5 ? pick(lex.topic_adjectives[topic]) : pick(lex.adjectives);
      }
      np += ' ';
      np += rng.uniform() < 0.85 ? pick(lex.nouns[topic]) : pick(lex.shared_nouns);
      if (plural) np += 's';
      return np;
    };
    auto verb = [&](bool plural_subject) {
      std::string v = rng.uniform() < 0.85 ? pick(lex.verbs[topic]) : pick(lex.shared_verbs);
      if (!plural_subject) v += 's';
      return v;
    };

    const std::size_t n_sent =
        opt.min_sentences + rng.below(opt.max_sentences - opt.min_sentences + 1);
    for (std::size_t s = 0; s < n_sent; ++s) {
      bool plural = false;
      std::string subject;
      const double kind = rng.uniform();
      if (kind < 0.25) {
        subject = rng.uniform() < 0.7 ? protagonist : pick(lex.names);
      } else if (kind < 0.35) {
        subject = "it";
      } else {
        subject = noun_phrase(plural);
      }
      std::string sentence = subject + ' ' + verb(plural);
      const double shape = rng.uniform();
      bool obj_plural = false;
      if (shape < 0.5) {
        sentence += ' ' + noun_phrase(obj_plural);
      } else if (shape < 0.7) {
        sentence += ' ' + pick(lex.adverbs);
      } else {
        static constexpr std::array<const char*, 5> prep{"in", "with", "near", "of", "under"};
        sentence += ' ' + noun_phrase(obj_plural);
        sentence += ' ';
        sentence += prep[detail::zipf(prep.size(), rng)];
        sentence += ' ' + noun_phrase(obj_plural);
      }
      if (rng.uniform() < 0.15) {
        bool p2 = false;
        std::string second = noun_phrase(p2);
        sentence += " , and " + second + ' ' + verb(p2);
      }
      out += sentence + " .";
      out += (s + 1 == n_sent) ? '\n' : ' ';
    }
    out += '\n';
  }
  return out;
}

}  // namespace olab
