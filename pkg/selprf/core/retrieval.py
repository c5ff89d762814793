import heapq
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Sequence

from .config import RetrievalConfig, TokenizerConfig
from .errors import DuplicateError, ValidationError
from .index import Document, InvertedIndex, TermDistribution
from .log import Logger as log
from .tokenizer import tokenize


@dataclass(frozen=True, eq=True)
class Query:
  query_id: str
  terms: tuple[str, ...]
  weights: "Mapping[str, float] | None" = None

  def __post_init__(self) -> None:
    object.__setattr__(self, "terms", tuple(self.terms))
    if self.weights is not None:
      distinct = set(self.terms)
      if set(self.weights) != distinct:
        raise ValidationError("query weights must match the distinct query terms", self.query_id)
      for term, w in self.weights.items():
        if not w > 0:
          raise ValidationError("query weights must be positive", self.query_id, term, w)

  @classmethod
  def from_text(cls, query_id: str, text: str, config: TokenizerConfig | None = None) -> "Query":
    return cls(query_id, tuple(tokenize(text, config)))

  @classmethod
  def from_weights(cls, query_id: str, weights: Mapping[str, float]) -> "Query":
    # heaviest terms first, ties by term
    terms = tuple(t for t, _ in sorted(weights.items(), key=lambda kv: (-kv[1], kv[0])))
    return cls(query_id, terms, dict(weights))

  def weighted_terms(self) -> list[tuple[str, float]]:
    """Distinct terms in first-occurrence order with their weight (raw counts by default)."""
    if self.weights is not None:
      return [(t, self.weights[t]) for t in dict.fromkeys(self.terms)]
    return [(t, float(n)) for t, n in Counter(self.terms).items()]

  def mle(self) -> TermDistribution:
    weights = dict(self.weighted_terms())
    if not weights:
      raise ValidationError("empty query", self.query_id)
    return TermDistribution.from_weights(weights)


class RankedList:
  """Top-k (doc_id, score) pairs retrieved for one query, best first."""

  def __init__(self,
      query_id: str,
      entries: "Iterable[tuple[str, float]]",
      k: int | None = None) -> None:
    self.query_id = query_id
    self.entries: tuple[tuple[str, float], ...] = tuple((d, float(s)) for d, s in entries)
    self.k = k if k is not None else max(len(self.entries), 1)
    if len(self.entries) > self.k:
      raise ValidationError("ranked list longer than its depth",
        query_id, len(self.entries), self.k)
    self._ranks: dict[str, int] = {}
    for rank, (doc_id, _) in enumerate(self.entries, start=1):
      if doc_id in self._ranks:
        raise DuplicateError("duplicate document in ranked list", query_id, doc_id)
      self._ranks[doc_id] = rank

  def __len__(self) -> int:
    return len(self.entries)

  def __iter__(self) -> Iterator[tuple[str, float]]:
    return iter(self.entries)

  def __eq__(self, other: object) -> bool:
    if not isinstance(other, RankedList):
      return False
    return (self.query_id, self.entries, self.k) == (other.query_id, other.entries, other.k)

  def __repr__(self) -> str:
    return f"RankedList({self.query_id!r}, {len(self.entries)}/{self.k})"

  @property
  def doc_ids(self) -> list[str]:
    return [d for d, _ in self.entries]

  @property
  def scores(self) -> list[float]:
    return [s for _, s in self.entries]

  def rank(self, doc_id: str) -> int | None:
    return self._ranks.get(doc_id)

  def top(self, n: int) -> list[str]:
    return [d for d, _ in self.entries[:n]]

  def truncated(self, k: int) -> "RankedList":
    return RankedList(self.query_id, self.entries[:k], k=k)

  def is_sorted(self) -> bool:
    return all(a >= b for a, b in zip(self.scores, self.scores[1:]))


def _top_k(query_id: str, scores: "dict[int, float]", index: InvertedIndex, k: int) -> RankedList:
  best = heapq.nsmallest(k, scores.items(), key=lambda kv: (-kv[1], kv[0]))
  return RankedList(query_id, ((index.doc_ids[i], s) for i, s in best), k=k)


def _check_request(query: Query, k: int) -> list[tuple[str, float]]:
  if k < 1:
    raise ValidationError("retrieval depth must be >= 1", k)
  terms = query.weighted_terms()
  if not terms:
    raise ValidationError("empty query", query.query_id)
  return terms


def bm25_idf(index: InvertedIndex, term: str) -> float:
  df = index.df(term)
  return math.log(1 + (index.N - df + 0.5) / (df + 0.5))


def search_bm25(
    query: Query,
    index: InvertedIndex,
    k: int = 1000,
    k1: float = 1.2,
    b: float = 0.75) -> RankedList:
  terms = _check_request(query, k)
  scores: dict[int, float] = {}
  for term, weight in terms:
    plist = index.postings.get(term)
    if not plist:
      continue
    idf = bm25_idf(index, term)
    for internal, tf in plist:
      norm = k1 * (1 - b + b * index.doc_lengths[internal] / index.avdl)
      scores[internal] = scores.get(internal, 0.0) + weight * idf * tf * (k1 + 1) / (tf + norm)
  result = _top_k(query.query_id, scores, index, k)
  log.trace("[{}] bm25: {} candidates, {} returned", query.query_id, len(scores), len(result))
  return result


def search_lm_dirichlet(
    query: Query,
    index: InvertedIndex,
    k: int = 1000,
    mu: float = 1000.0) -> RankedList:
  if not mu > 0:
    raise ValidationError("mu must be positive", mu)
  # terms unseen in the collection have P(t|C) = 0 and are skipped
  terms = [(t, w) for t, w in _check_request(query, k) if index.cf(t) > 0]
  candidates = sorted({i for t, _ in terms for i, _ in index.postings[t]})
  p_coll = {t: index.cf(t) / index.total_tokens for t, _ in terms}
  scores: dict[int, float] = {}
  for internal in candidates:
    tv = index.term_vector(internal)
    denom = index.doc_lengths[internal] + mu
    score = 0.0
    for term, weight in terms:
      score += weight * math.log((tv.get(term, 0) + mu * p_coll[term]) / denom)
    scores[internal] = score
  result = _top_k(query.query_id, scores, index, k)
  log.trace("[{}] lm: {} candidates, {} returned", query.query_id, len(scores), len(result))
  return result


def search(query: Query, index: InvertedIndex, config: RetrievalConfig | None = None) -> RankedList:
  config = config or RetrievalConfig()
  if config.model == "bm25":
    return search_bm25(query, index, k=config.depth, k1=config.k1, b=config.b)
  return search_lm_dirichlet(query, index, k=config.depth, mu=config.mu)


def search_all(
    queries: Sequence[Query],
    index: InvertedIndex,
    config: RetrievalConfig | None = None) -> dict[str, RankedList]:
  config = config or RetrievalConfig()
  runs = {}
  for query in queries:
    runs[query.query_id] = search(query, index, config)
  log.activity("retrieved {} queries with {} (depth {})", len(runs), config.model, config.depth)
  return runs


def doc_model(doc: Document, index: InvertedIndex) -> TermDistribution:
  tokens = tokenize(doc.text, index.tokenizer)
  if not tokens:
    raise ValidationError("document model of an empty document", doc.doc_id)
  return TermDistribution({t: n / len(tokens) for t, n in Counter(tokens).items()})


def indexed_doc_model(index: InvertedIndex, doc_id: str) -> TermDistribution:
  tv = index.doc_term_vector(doc_id)
  length = index.doc_length(doc_id)
  if length == 0:
    raise ValidationError("document model of an empty document", doc_id)
  return TermDistribution({t: n / length for t, n in tv.items()})
