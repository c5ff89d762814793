import math
import random

import pytest

from selprf.core.config import RetrievalConfig
from selprf.core.errors import DuplicateError, ValidationError
from selprf.core.index import Document, build_index
from selprf.core.retrieval import (
  Query,
  RankedList,
  doc_model,
  indexed_doc_model,
  search,
  search_all,
  search_bm25,
  search_lm_dirichlet,
)

CORPUS = [("d1", "a b a"), ("d2", "b c")]


def _random_corpus(rng: random.Random, n_docs: int = 30) -> list[tuple[str, str]]:
  words = [f"w{i}" for i in range(12)]
  return [
    (f"d{i:02d}", " ".join(rng.choice(words) for _ in range(rng.randint(1, 15))))
    for i in range(n_docs)
  ]


def test_query():
  q = Query.from_text("q1", "Cat cat dog")
  assert q.terms == ("cat", "cat", "dog")
  assert q.weighted_terms() == [("cat", 2.0), ("dog", 1.0)]
  assert q.mle().as_dict() == pytest.approx({"cat": 2 / 3, "dog": 1 / 3})

  w = Query.from_weights("q1", {"b": 0.25, "a": 0.25, "c": 0.5})
  assert w.terms == ("c", "a", "b")
  assert w.weighted_terms() == [("c", 0.5), ("a", 0.25), ("b", 0.25)]

  with pytest.raises(ValidationError):
    Query("q1", ("a",), {"b": 1.0})
  with pytest.raises(ValidationError):
    Query("q1", ("a",), {"a": 0.0})
  with pytest.raises(ValidationError):
    Query("q1", ()).mle()


def test_ranked_list():
  ranked = RankedList("q1", [("d2", 3.0), ("d1", 1.0)], k=5)
  assert len(ranked) == 2
  assert ranked.rank("d1") == 2
  assert ranked.rank("d9") is None
  assert ranked.top(1) == ["d2"]
  assert ranked.is_sorted()
  assert ranked.truncated(1) == RankedList("q1", [("d2", 3.0)], k=1)
  with pytest.raises(DuplicateError):
    RankedList("q1", [("d1", 2.0), ("d1", 1.0)])
  with pytest.raises(ValidationError):
    RankedList("q1", [("d1", 2.0), ("d2", 1.0)], k=1)


def test_bm25_worked_example():
  index = build_index(CORPUS)
  ranked = search_bm25(Query.from_text("q1", "c"), index)
  assert ranked.doc_ids == ["d2"]
  expected = math.log(2) * 2.2 / (1 + 1.2 * (0.25 + 0.75 * 2 / 2.5))
  assert ranked.scores[0] == pytest.approx(expected)
  assert ranked.scores[0] == pytest.approx(0.7549, abs=1e-4)

  assert len(search_bm25(Query.from_text("q1", "zzz"), index)) == 0


def test_bm25_ties_and_depth():
  index = build_index([("x2", "a b"), ("x1", "a b"), ("x3", "c")])
  ranked = search_bm25(Query.from_text("q1", "a"), index)
  # equal scores keep the internal (insertion) order
  assert ranked.doc_ids == ["x2", "x1"]
  assert ranked.scores[0] == ranked.scores[1]
  assert search_bm25(Query.from_text("q1", "a"), index, k=1).doc_ids == ["x2"]
  with pytest.raises(ValidationError):
    search_bm25(Query.from_text("q1", "a"), index, k=0)
  with pytest.raises(ValidationError):
    search_bm25(Query("q1", ()), index)


def _shuffled_corpus(rng: random.Random, n_docs: int = 30) -> list[tuple[str, str]]:
  # doc ids out of insertion order, so ties must follow the internal id
  names = rng.sample(range(n_docs), n_docs)
  return [(f"d{names[i]:02d}", text) for i, (_, text) in enumerate(_random_corpus(rng, n_docs))]


def _random_query(rng: random.Random, i: int) -> Query:
  return Query(f"q{i}", tuple(f"w{rng.randrange(14)}" for _ in range(rng.randint(1, 4))))


def _assert_ranking(ranked, scored: dict[str, float], positions: dict[str, int], k: int):
  expected = sorted(scored.items(), key=lambda kv: (-kv[1], positions[kv[0]]))[:k]
  assert ranked.doc_ids == [d for d, _ in expected]
  assert ranked.scores == pytest.approx([s for _, s in expected], abs=1e-9)


def test_bm25_brute_force():
  for seed in range(50):
    rng = random.Random(seed)
    corpus = _shuffled_corpus(rng)
    index = build_index(corpus)
    docs = {d: text.split() for d, text in corpus}
    positions = {d: i for i, (d, _) in enumerate(corpus)}
    avdl = sum(len(t) for t in docs.values()) / len(docs)

    def _score(query, tokens):
      score = 0.0
      for term, weight in query.weighted_terms():
        df = sum(1 for t in docs.values() if term in t)
        tf = tokens.count(term)
        if tf == 0:
          continue
        idf = math.log(1 + (len(docs) - df + 0.5) / (df + 0.5))
        norm = 1.2 * (1 - 0.75 + 0.75 * len(tokens) / avdl)
        score += weight * idf * tf * 2.2 / (tf + norm)
      return score

    for i in range(20):
      query = _random_query(rng, i)
      ranked = search_bm25(query, index, k=10)
      assert ranked.is_sorted()
      scored = {d: _score(query, t) for d, t in docs.items() if set(query.terms) & set(t)}
      _assert_ranking(ranked, scored, positions, 10)


def test_lm_dirichlet_worked_example():
  index = build_index(CORPUS)
  ranked = search_lm_dirichlet(Query.from_text("q1", "a"), index, mu=100)
  assert ranked.doc_ids == ["d1"]
  assert ranked.scores[0] == pytest.approx(math.log(42 / 103))
  assert ranked.scores[0] == pytest.approx(-0.8973, abs=1e-3)
  with pytest.raises(ValidationError):
    search_lm_dirichlet(Query.from_text("q1", "a"), index, mu=0)


def test_lm_dirichlet_brute_force():
  mu = 50.0
  for seed in range(50):
    rng = random.Random(100 + seed)
    corpus = _shuffled_corpus(rng)
    index = build_index(corpus)
    docs = {d: text.split() for d, text in corpus}
    positions = {d: i for i, (d, _) in enumerate(corpus)}
    total = sum(len(t) for t in docs.values())

    def _score(query, tokens):
      score = 0.0
      for term, weight in query.weighted_terms():
        cf = sum(t.count(term) for t in docs.values())
        if cf == 0:
          continue
        score += weight * math.log((tokens.count(term) + mu * (cf / total)) / (len(tokens) + mu))
      return score

    for i in range(20):
      query = _random_query(rng, i)
      ranked = search_lm_dirichlet(query, index, k=1000, mu=mu)
      # documents matching no query term are never returned
      scored = {d: _score(query, t) for d, t in docs.items() if set(query.terms) & set(t)}
      _assert_ranking(ranked, scored, positions, 1000)


def test_lm_dirichlet_large_mu_approaches_collection_model():
  index = build_index([("d1", "a a b"), ("d2", "a c c c"), ("d3", "b c")])
  query = Query.from_text("q1", "a c")
  background = math.log(3 / 9) + math.log(4 / 9)
  ranked = search_lm_dirichlet(query, index, mu=1e9)
  assert ranked.doc_ids == ["d2", "d1", "d3"]
  for score in ranked.scores:
    assert score == pytest.approx(background, abs=1e-6)
  # a small mu separates the documents much more
  spread = search_lm_dirichlet(query, index, mu=1.0).scores
  assert spread[0] - spread[-1] > 100 * (ranked.scores[0] - ranked.scores[-1])


def test_lm_dirichlet_symmetry():
  index = build_index([("d1", "a b"), ("d0", "a c"), ("d2", "b c")])
  ranked = search_lm_dirichlet(Query.from_text("q1", "a"), index, mu=10)
  assert ranked.doc_ids == ["d1", "d0"]
  assert ranked.scores[0] == ranked.scores[1]


def test_search_dispatch():
  index = build_index(CORPUS)
  query = Query.from_text("q1", "a")
  assert search(query, index) == search_bm25(query, index)
  lm = RetrievalConfig(model="lm", mu=100, depth=5)
  assert search(query, index, lm) == search_lm_dirichlet(query, index, k=5, mu=100)
  runs = search_all([query, Query.from_text("q2", "c")], index, lm)
  assert list(runs) == ["q1", "q2"]
  assert runs["q2"].doc_ids == ["d2"]


def test_doc_model():
  index = build_index(CORPUS)
  assert doc_model(Document.from_text("x", "a b a"), index).as_dict() == pytest.approx(
    {"a": 2 / 3, "b": 1 / 3})
  assert doc_model(Document.from_text("x", "a"), index).as_dict() == {"a": 1.0}
  assert doc_model(Document.from_text("x", "a b"), index).as_dict() == {"a": 0.5, "b": 0.5}
  assert indexed_doc_model(index, "d1").as_dict() == pytest.approx({"a": 2 / 3, "b": 1 / 3})
  with pytest.raises(ValidationError):
    doc_model(Document.from_text("x", ""), index)
