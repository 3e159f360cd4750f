// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch.hpp>

#include "mrag/metrics.hpp"
#include "mrag/rng.hpp"
#include "test_util.hpp"

using namespace mrag;
using metrics::TokenSequence;

namespace {

TokenSequence toks(std::initializer_list<const char*> words) {
    TokenSequence t;
    for (const char* w : words) t.emplace_back(w);
    return t;
}

// random token sequence over a tiny vocabulary
TokenSequence random_tokens(SplitMix64& rng, std::size_t max_len) {
    static const std::vector<std::string> vocab{"a", "dog", "cat", "runs", "sits", "red", "blue", "park"};
    TokenSequence t;
    std::size_t len = 1 + rng.next_below(max_len);
    for (std::size_t i = 0; i < len; ++i) t.push_back(vocab[rng.next_below(vocab.size())]);
    return t;
}

} // namespace

TEST_CASE("tokenize lowercases and strips punctuation", "[metrics]") {
    CHECK(metrics::tokenize("A cat, sitting.") == toks({"a", "cat", "sitting"}));
    CHECK(metrics::tokenize("").empty());
    CHECK(metrics::tokenize("Dog  dog") == toks({"dog", "dog"}));
    CHECK(metrics::tokenize("one-two three's") == toks({"one", "two", "three", "s"}));
    CHECK(metrics::tokenize("42 cats!") == toks({"42", "cats"}));
}

TEST_CASE("bleu golden values", "[metrics]") {
    SECTION("identity candidate scores 1 at every order") {
        TokenSequence c = toks({"a", "red", "bus", "on", "the", "road"});
        for (int n = 1; n <= 4; ++n) CHECK(metrics::bleu(c, {c}, n) == Approx(1.0));
    }
    SECTION("clipped unigram precision 2/4, brevity penalty 1") {
        // "the" appears twice in the reference, so its candidate count of 4
        // clips to 2
        double b = metrics::bleu(toks({"the", "the", "the", "the"}), {toks({"the", "cat", "the", "mat"})}, 1);
        CHECK(b == Approx(0.5).epsilon(1e-9));
    }
    SECTION("clipping caps at the maximum per-reference count") {
        // the reference holds a single "the": 1/4 survives the clip
        CHECK(metrics::bleu(toks({"the", "the", "the", "the"}), {toks({"the", "cat"})}, 1) ==
              Approx(0.25).epsilon(1e-9));
        // the clip takes the max count over references
        CHECK(metrics::bleu(toks({"the", "the", "the", "the"}),
                            {toks({"the", "cat"}), toks({"the", "big", "the", "cat"})}, 1) ==
              Approx(0.5).epsilon(1e-9));
    }
    SECTION("zero overlap scores 0") {
        CHECK(metrics::bleu(toks({"x", "y"}), {toks({"a", "b"})}, 1) == 0.0);
        CHECK(metrics::bleu(toks({"x", "y"}), {toks({"a", "b"})}, 4) == 0.0);
    }
    SECTION("empty candidate scores 0") {
        CHECK(metrics::bleu({}, {toks({"a", "b"})}, 4) == 0.0);
    }
    SECTION("epsilon smoothing keeps zero-precision orders positive") {
        TokenSequence c = toks({"a", "b"});
        TokenSequence r = toks({"a", "c"});
        CHECK(metrics::bleu(c, {r}, 4) == 0.0);
        double smoothed = metrics::bleu(c, {r}, 4, metrics::BleuSmoothing::epsilon);
        CHECK(smoothed > 0.0);
        CHECK(smoothed < 1e-2);
    }
    SECTION("brevity penalty applies to short candidates") {
        // candidate length 2, reference length 4: BP = exp(1 - 4/2) = e^-1
        double b = metrics::bleu(toks({"a", "b"}), {toks({"a", "b", "c", "d"})}, 1);
        CHECK(b == Approx(std::exp(-1.0)).epsilon(1e-12));
    }
    SECTION("all-empty references are rejected") {
        CHECK_THROWS_AS(metrics::bleu(toks({"a"}), {TokenSequence{}}, 1), ReferenceError);
    }
}

TEST_CASE("corpus bleu aggregates counts before the ratio", "[metrics]") {
    // item 1: 2/2 unigrams, item 2: 1/2 -> pooled 3/4; lengths 4 vs 4 -> BP 1
    std::vector<TokenSequence> cands{toks({"a", "b"}), toks({"a", "c"})};
    std::vector<std::vector<TokenSequence>> refs{{toks({"a", "b"})}, {toks({"a", "b"})}};
    CHECK(metrics::corpus_bleu(cands, refs, 1) == Approx(0.75));
    // sentence-mean is (1.0 + 0.5) / 2 = 0.75 here as well, but the pooled
    // counts differ from the mean when lengths are uneven:
    cands.push_back(toks({"x"}));
    refs.push_back({toks({"a"})});
    // pooled: 3/5 clipped matches, cand len 5, ref len 5
    CHECK(metrics::corpus_bleu(cands, refs, 1) == Approx(0.6));
}

TEST_CASE("rouge_l golden values", "[metrics]") {
    SECTION("identity") {
        TokenSequence c = toks({"a", "b", "c"});
        CHECK(metrics::rouge_l(c, {c}) == Approx(1.0));
    }
    SECTION("lcs 3 of 4 gives f = 0.75") {
        CHECK(metrics::rouge_l(toks({"a", "b", "c", "d"}), {toks({"a", "c", "d", "e"})}) == Approx(0.75));
    }
    SECTION("disjoint vocabularies score 0") {
        CHECK(metrics::rouge_l(toks({"a", "b"}), {toks({"x", "y"})}) == 0.0);
    }
    SECTION("beta weighting favors recall") {
        // P = 1, R = 0.5, beta^2 = 1.44: F = 2.44*0.5 / (0.5 + 1.44)
        CHECK(metrics::rouge_l(toks({"a", "b"}), {toks({"a", "b", "c", "d"})}) ==
              Approx(1.22 / 1.94).epsilon(1e-12));
    }
    SECTION("empty candidate scores 0, max over references wins") {
        CHECK(metrics::rouge_l({}, {toks({"a"})}) == 0.0);
        CHECK(metrics::rouge_l(toks({"a", "b"}), {toks({"x"}), toks({"a", "b"})}) == Approx(1.0));
    }
}

TEST_CASE("cider_d golden values", "[metrics]") {
    // multi-image corpus with distinct captions so idf > 0
    std::vector<std::vector<TokenSequence>> corpus{
        {toks({"a", "red", "bus", "on", "the", "road"})},
        {toks({"two", "dogs", "running", "through", "wet", "sand"})},
        {toks({"an", "old", "train", "crossing", "a", "bridge"})},
    };
    metrics::CorpusStats stats = metrics::build_corpus_stats(corpus);

    SECTION("identity candidate scores 10") {
        CHECK(metrics::cider_d(corpus[0][0], corpus[0], stats) == Approx(10.0).margin(1e-6));
    }
    SECTION("zero overlap scores 0") {
        CHECK(metrics::cider_d(toks({"zz", "qq", "ww", "ee"}), corpus[0], stats) == Approx(0.0).margin(1e-12));
    }
    SECTION("pure length difference applies the Gaussian penalty") {
        // single-token vocabulary: every order's cosine is exactly 1, so the
        // score isolates the penalty exp(-12^2 / (2*6^2)) = e^-2
        std::vector<std::vector<TokenSequence>> cat_corpus{
            {TokenSequence(17, "cat")},
            {toks({"a", "red", "bus", "on", "the", "road"})},
        };
        metrics::CorpusStats cat_stats = metrics::build_corpus_stats(cat_corpus);
        double score = metrics::cider_d(TokenSequence(5, "cat"), cat_corpus[0], cat_stats);
        CHECK(score == Approx(10.0 * std::exp(-2.0)).margin(1e-6));
    }
    SECTION("empty stats are rejected") {
        CHECK_THROWS_AS(metrics::cider_d(corpus[0][0], corpus[0], metrics::CorpusStats{}),
                        CorpusStatsError);
    }
}

TEST_CASE("cider_d matches an independent implementation on random corpora", "[metrics]") {
    SplitMix64 rng(33);
    for (int trial = 0; trial < 40; ++trial) {
        std::size_t images = 2 + rng.next_below(4); // 2..5 images
        std::vector<std::vector<TokenSequence>> corpus;
        for (std::size_t i = 0; i < images; ++i) {
            std::vector<TokenSequence> refs;
            std::size_t n_refs = 1 + rng.next_below(3);
            for (std::size_t r = 0; r < n_refs; ++r) refs.push_back(random_tokens(rng, 6));
            corpus.push_back(std::move(refs));
        }
        metrics::CorpusStats stats = metrics::build_corpus_stats(corpus);
        TokenSequence cand = random_tokens(rng, 6);
        std::size_t target = rng.next_below(images);
        double got = metrics::cider_d(cand, corpus[target], stats);
        double expected = testutil::oracle_cider_d(cand, corpus[target], corpus);
        CHECK(got == Approx(expected).margin(1e-6));
    }
}

TEST_CASE("clip-based scores", "[metrics]") {
    std::vector<float> ex{1.0f, 0.0f};
    std::vector<float> ey{0.0f, 1.0f};

    SECTION("candidate equal to the image scores 2.5") {
        auto s = metrics::clip_scores(ex, ex, {});
        CHECK(s.clip_score == Approx(2.5));
        CHECK_FALSE(s.ref_clip.has_value());
    }
    SECTION("negative cosine clamps to 0") {
        std::vector<float> cand{-0.3f, std::sqrt(1.0f - 0.09f)};
        CHECK(metrics::clip_scores(ex, cand, {}).clip_score == Approx(0.0).margin(1e-12));
    }
    SECTION("ref_clip is the harmonic mean") {
        auto s = metrics::clip_scores(ex, ex, {ex});
        REQUIRE(s.ref_clip.has_value());
        CHECK(*s.ref_clip == Approx(2.0 * 2.5 * 1.0 / 3.5).epsilon(1e-12));
    }
    SECTION("orthogonal reference contributes zero") {
        auto s = metrics::clip_scores(ex, ex, {ey});
        REQUIRE(s.ref_clip.has_value());
        CHECK(*s.ref_clip == Approx(0.0).margin(1e-12));
    }
    SECTION("zero vectors are rejected") {
        std::vector<float> zero{0.0f, 0.0f};
        CHECK_THROWS_AS(metrics::clip_scores(zero, ex, {}), DegenerateVectorError);
        CHECK_THROWS_AS(metrics::clip_scores(ex, ex, {zero}), DegenerateVectorError);
    }
}

TEST_CASE("ndcg golden values", "[metrics]") {
    SECTION("ideal ordering scores 1") {
        CHECK(metrics::ndcg_from_flags({true, true, false, false}, 2, 4) == Approx(1.0));
    }
    SECTION("single relevant item at rank 2") {
        CHECK(metrics::ndcg_from_flags({false, true}, 1, 2) == Approx(1.0 / std::log2(3.0)).epsilon(1e-12));
    }
    SECTION("relevant item below the cutoff") {
        CHECK(metrics::ndcg_from_flags({false, false, true}, 1, 2) == 0.0);
    }
    SECTION("no relevant items defined as 0") {
        CHECK(metrics::ndcg_from_flags({false, false}, 0, 2) == 0.0);
    }
    SECTION("set-based wrapper") {
        std::vector<std::string> ranked{"b", "a", "c"};
        std::unordered_set<std::string> relevant{"a"};
        CHECK(metrics::ndcg(ranked, relevant, 3) == Approx(1.0 / std::log2(3.0)));
    }
}

TEST_CASE("pearson correlation utility", "[metrics]") {
    std::vector<double> xs{0.1, 0.5, 0.2, 0.9};
    std::vector<double> neg;
    for (double x : xs) neg.push_back(-x);
    CHECK(metrics::pearson(xs, xs) == Approx(1.0));
    CHECK(metrics::pearson(xs, neg) == Approx(-1.0));
    CHECK_THROWS_AS(metrics::pearson(xs, {1.0, 1.0, 1.0, 1.0}), ValueError);
}

TEST_CASE("metric ranges and reference-permutation invariance", "[metrics]") {
    SplitMix64 rng(99);
    for (int trial = 0; trial < 30; ++trial) {
        TokenSequence cand = random_tokens(rng, 8);
        std::vector<TokenSequence> refs;
        std::size_t n_refs = 2 + rng.next_below(3);
        for (std::size_t i = 0; i < n_refs; ++i) refs.push_back(random_tokens(rng, 8));
        std::vector<std::vector<TokenSequence>> corpus{refs, {random_tokens(rng, 8)}};
        metrics::CorpusStats stats = metrics::build_corpus_stats(corpus);

        double b = metrics::bleu(cand, refs, 4, metrics::BleuSmoothing::epsilon);
        double r = metrics::rouge_l(cand, refs);
        double c = metrics::cider_d(cand, refs, stats);
        CHECK((b >= 0.0 && b <= 1.0));
        CHECK((r >= 0.0 && r <= 1.0));
        CHECK((c >= 0.0 && c <= 10.0 + 1e-9));

        std::vector<TokenSequence> shuffled = refs;
        rng.shuffle(shuffled);
        CHECK(metrics::bleu(cand, shuffled, 4, metrics::BleuSmoothing::epsilon) == Approx(b));
        CHECK(metrics::rouge_l(cand, shuffled) == Approx(r));
        CHECK(metrics::cider_d(cand, shuffled, stats) == Approx(c));
    }
}

TEST_CASE("deleting a matching candidate token never raises lcs recall", "[metrics]") {
    SplitMix64 rng(123);
    for (int trial = 0; trial < 50; ++trial) {
        TokenSequence cand = random_tokens(rng, 8);
        TokenSequence ref = random_tokens(rng, 8);
        std::size_t before = metrics::detail::lcs_length(cand, ref);
        for (std::size_t i = 0; i < cand.size(); ++i) {
            TokenSequence shorter = cand;
            shorter.erase(shorter.begin() + static_cast<std::ptrdiff_t>(i));
            CHECK(metrics::detail::lcs_length(shorter, ref) <= before);
        }
    }
}
