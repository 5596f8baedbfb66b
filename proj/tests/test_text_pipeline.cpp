#include <gtest/gtest.h>

#include "support.hpp"

using namespace dcc;
using testing_support::bit_equal;
using testing_support::Gen;

namespace {

const ToyBackbone& toy() {
  static const auto b = make_toy_backbone();
  return *b;
}

const Concept& identity_concept() {
  static const Concept c = init_concept("man", ConceptKind::identity, toy());
  return c;
}

const Concept& style_concept() {
  static const Concept c = init_concept("comics", ConceptKind::style, toy());
  return c;
}

}  // namespace

TEST(SplitPrompt, WordsAndPlaceholders) {
  const auto p = split_prompt("A caricature, of [id*]!");
  ASSERT_EQ(p.size(), 4u);
  EXPECT_EQ(p[0].text, "a");
  EXPECT_EQ(p[1].text, "caricature");
  EXPECT_EQ(p[2].text, "of");
  EXPECT_EQ(p[3].text, "id*");
  EXPECT_TRUE(p[3].placeholder);
  EXPECT_THROW(split_prompt("a [id"), TokenizeError);
  EXPECT_THROW(split_prompt("a [id]"), TokenizeError);
}

TEST(TokenizePrompt, PlaceholderPositionMatchesEnumeration) {
  const auto& tok = toy().tokenizer();
  const auto tp = tokenize_prompt("a caricature of [id*]", tok);
  ASSERT_EQ(tp.token_ids.size(), 16u);
  // BOS, a, caricature, of, <placeholder>, EOS...
  EXPECT_EQ(tp.token_ids[0], Tokenizer::kBos);
  EXPECT_EQ(tp.token_ids[1], *tok.lookup("a"));
  EXPECT_EQ(tp.token_ids[2], *tok.lookup("caricature"));
  EXPECT_EQ(tp.token_ids[3], *tok.lookup("of"));
  ASSERT_EQ(tp.placeholders.size(), 1u);
  EXPECT_EQ(tp.placeholders[0].token_index, 4u);
  EXPECT_EQ(tp.token_ids[4], Tokenizer::kFirstReserved);
  for (std::size_t i = 5; i < 16; ++i) EXPECT_EQ(tp.token_ids[i], Tokenizer::kEos);
}

TEST(TokenizePrompt, RepeatedPlaceholderSharesToken) {
  const auto tp = tokenize_prompt("[id*] and [id*] with [style*]", toy().tokenizer());
  ASSERT_EQ(tp.placeholders.size(), 3u);
  EXPECT_EQ(tp.token_ids[tp.placeholders[0].token_index], tp.token_ids[tp.placeholders[1].token_index]);
  EXPECT_NE(tp.token_ids[tp.placeholders[0].token_index], tp.token_ids[tp.placeholders[2].token_index]);
}

TEST(TokenizePrompt, UnknownWordsAndLength) {
  const auto tp = tokenize_prompt("a zebra", toy().tokenizer());
  EXPECT_EQ(tp.token_ids[2], Tokenizer::kUnk);
  try {
    tokenize_prompt("a a a a a a a a a a a a a a a", toy().tokenizer());
    FAIL();
  } catch (const TokenizeError& e) {
    EXPECT_NE(std::string(e.what()).find("17 tokens"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("16"), std::string::npos);
  }
  EXPECT_NO_THROW(tokenize_prompt("a a a a a a a a a a a a a a", toy().tokenizer()));
}

TEST(EncodePrompt, OneSlotAtPlaceholder) {
  const auto pe = encode_prompt("a caricature of [id*]", {{"id*", &identity_concept()}}, toy());
  ASSERT_EQ(pe.concept_slots.size(), 1u);
  EXPECT_EQ(pe.concept_slots[0].token_index, 4u);
  EXPECT_EQ(pe.concept_slots[0].bound, &identity_concept());
  EXPECT_EQ(pe.text_encoding.rows, 16u);
  EXPECT_EQ(pe.text_encoding.cols, 64u);
}

TEST(EncodePrompt, TwoConceptsDistinctSlots) {
  const auto pe = encode_prompt("a caricature of [id*] in the style of [style*]",
                                {{"id*", &identity_concept()}, {"style*", &style_concept()}}, toy());
  ASSERT_EQ(pe.concept_slots.size(), 2u);
  EXPECT_NE(pe.concept_slots[0].token_index, pe.concept_slots[1].token_index);
  EXPECT_EQ(pe.concept_slots[0].placeholder, "id*");
  EXPECT_EQ(pe.concept_slots[1].placeholder, "style*");
}

TEST(EncodePrompt, NoPlaceholdersIsPlainEncoding) {
  const auto pe = encode_prompt("a caricature", {}, toy());
  EXPECT_TRUE(pe.concept_slots.empty());
  ad::Tape tape;
  const Matrix plain = toy().encode_text(tape.constant(toy().embed_tokens(pe.token_ids))).value();
  EXPECT_TRUE(bit_equal(plain, pe.text_encoding));
}

TEST(EncodePrompt, UnboundPlaceholderIsNamed) {
  try {
    encode_prompt("a caricature of [id*] in the style of [style*]", {{"id*", &identity_concept()}}, toy());
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("[style*]"), std::string::npos);
  }
}

TEST(EncodePrompt, WrongEmbeddingWidthRejected) {
  Concept c = identity_concept();
  c.v_star.resize(10);
  EXPECT_THROW(encode_prompt("[id*]", {{"id*", &c}}, toy()), IncompatibleBackbone);
}

TEST(EncodePrompt, DeterministicAndTokenIdsIndependentOfVStar) {
  Gen g(4);
  Concept c = identity_concept();
  const auto a = encode_prompt("a photo of a [id*]", {{"id*", &c}}, toy());
  const auto b = encode_prompt("a photo of a [id*]", {{"id*", &c}}, toy());
  EXPECT_TRUE(bit_equal(a.text_encoding, b.text_encoding));
  for (auto& v : c.v_star) v = static_cast<float>(g.normal());
  const auto d = encode_prompt("a photo of a [id*]", {{"id*", &c}}, toy());
  EXPECT_EQ(a.token_ids, d.token_ids);
  const std::size_t ci = a.concept_slots[0].token_index;
  // Causal encoder: positions before c_i cannot see v*.
  for (std::size_t i = 0; i < ci; ++i)
    for (std::size_t j = 0; j < a.text_encoding.cols; ++j) EXPECT_EQ(a.text_encoding(i, j), d.text_encoding(i, j));
  double diff = 0;
  for (std::size_t j = 0; j < a.text_encoding.cols; ++j) diff += std::abs(a.text_encoding(ci, j) - d.text_encoding(ci, j));
  EXPECT_GT(diff, 0.0);
}

TEST(EncodePrompt, InjectionMatchesManualEmbeddingSwap) {
  Gen g(5);
  Concept c = identity_concept();
  for (auto& v : c.v_star) v = static_cast<float>(g.normal());
  const auto pe = encode_prompt("a photo of a [id*]", {{"id*", &c}}, toy());
  Matrix emb = toy().embed_tokens(pe.token_ids);
  const std::size_t ci = pe.concept_slots[0].token_index;
  for (std::size_t j = 0; j < emb.cols; ++j) emb(ci, j) = c.v_star[j];
  ad::Tape tape;
  EXPECT_TRUE(bit_equal(toy().encode_text(tape.constant(emb)).value(), pe.text_encoding));
}

TEST(SuperclassReference, EqualsEncodingAtInitialisation) {
  auto pe = encode_prompt("a photo of a [id*]", {{"id*", &identity_concept()}}, toy());
  const Matrix& sc = superclass_encoding(pe, toy());
  EXPECT_TRUE(bit_equal(sc, pe.text_encoding));
  const std::size_t ci = pe.concept_slots[0].token_index;
  EXPECT_DOUBLE_EQ(rome::cosine_similarity(sc.row(ci), pe.text_encoding.row(ci)), 1.0);
}

TEST(SuperclassReference, IndependentOfVStar) {
  Gen g(6);
  auto pe0 = encode_prompt("a photo of a [id*]", {{"id*", &identity_concept()}}, toy());
  const Matrix ref0 = encode_superclass_reference(pe0, toy());
  Concept trained = identity_concept();
  for (auto& v : trained.v_star) v += static_cast<float>(0.3 * g.normal());
  auto pe1 = encode_prompt("a photo of a [id*]", {{"id*", &trained}}, toy());
  EXPECT_FALSE(bit_equal(pe1.text_encoding, pe0.text_encoding));
  EXPECT_TRUE(bit_equal(encode_superclass_reference(pe1, toy()), ref0));
}

TEST(SuperclassReference, NeedsASlot) {
  const auto pe = encode_prompt("a caricature", {}, toy());
  EXPECT_THROW(encode_superclass_reference(pe, toy()), std::invalid_argument);
}

TEST(InferenceEdits, ScalesDefaultToConceptValue) {
  Concept c = identity_concept();
  c.default_scale = 0.75f;
  const auto pe = encode_prompt("[id*] in the style of [style*]", {{"id*", &c}, {"style*", &style_concept()}}, toy());
  ad::Tape tape;
  const auto e = make_inference_edits(tape, pe, {{"style*", 0.4}});
  ASSERT_EQ(e->set.concepts.size(), 2u);
  EXPECT_DOUBLE_EQ(e->set.concepts[0].scale, 0.75);
  EXPECT_DOUBLE_EQ(e->set.concepts[1].scale, 0.4);
  EXPECT_EQ(e->set.concepts[0].key_outputs.size(), toy().info().layers.size());
  EXPECT_EQ(e->set.concepts[0].token_index, pe.concept_slots[0].token_index);
}
