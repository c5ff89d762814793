import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .config import FeedbackConfig, RetrievalConfig
from .errors import FeedbackError, ParseError, ValidationError
from .formats import read_trec_run
from .index import InvertedIndex, TermDistribution
from .log import Logger as log
from .retrieval import Query, RankedList, search_bm25, search_lm_dirichlet


@dataclass(frozen=True)
class ExpandedQuery:
  query_id: str
  term_weights: dict[str, float]
  provenance: str = "rm3"
  fb_docs: int = 0
  fb_terms: int = 0
  lambda_: float = 0.0

  def __post_init__(self) -> None:
    if not self.term_weights:
      raise ValidationError("empty expanded query", self.query_id)
    for term, w in self.term_weights.items():
      if not w > 0:
        raise ValidationError("expanded query weights must be positive", self.query_id, term, w)
    total = math.fsum(self.term_weights.values())
    if abs(total - 1.0) > TermDistribution.TOLERANCE:
      raise ValidationError("expanded query weights do not sum to 1", self.query_id, total)

  def to_query(self) -> Query:
    return Query.from_weights(self.query_id, self.term_weights)

  def tokens(self) -> list[str]:
    return list(self.to_query().terms)


def _query_log_likelihood(
    terms: Sequence[tuple[str, float]],
    tv: Mapping[str, int],
    length: int,
    index: InvertedIndex,
    mu: float) -> float:
  return sum(
    w * math.log((tv.get(t, 0) + mu * index.cf(t) / index.total_tokens) / (length + mu))
    for t, w in terms
  )


def estimate_rm1(
    query: Query,
    initial: RankedList,
    index: InvertedIndex,
    fb_docs: int = 10,
    fb_terms: int = 20,
    mu: float = 1000.0) -> TermDistribution:
  if len(initial) == 0:
    raise FeedbackError("no feedback possible: empty initial list", query.query_id)
  if fb_docs < 1 or fb_terms < 1:
    raise ValidationError("fb_docs and fb_terms must be >= 1", fb_docs, fb_terms)
  terms = [(t, w) for t, w in query.weighted_terms() if index.cf(t) > 0]
  feedback = []
  for doc_id in initial.top(fb_docs):
    length = index.doc_length(doc_id)
    if length == 0:
      log.debug("[{}] skipping empty feedback document {}", query.query_id, doc_id)
      continue
    feedback.append((index.doc_term_vector(doc_id), length))
  if not feedback:
    raise FeedbackError("no feedback possible: all feedback documents are empty", query.query_id)

  # P(Q|D) renormalized over the feedback set, in log space to avoid underflow
  lls = [_query_log_likelihood(terms, tv, length, index, mu) for tv, length in feedback]
  top_ll = max(lls)
  likelihoods = [math.exp(ll - top_ll) for ll in lls]
  z = sum(likelihoods)
  p_q_d = [p / z for p in likelihoods]

  weights: dict[str, float] = {}
  for (tv, length), p in zip(feedback, p_q_d):
    for term, tf in tv.items():
      weights[term] = weights.get(term, 0.0) + tf / length * p
  weights = {t: w for t, w in weights.items() if w > 0}
  rm1 = TermDistribution(weights, normalized=False).top(fb_terms)
  log.trace("[{}] rm1 over {} documents: {} terms", query.query_id, len(feedback), len(rm1))
  return rm1


def interpolate_rm3(
    query: Query,
    rm1: TermDistribution,
    lambda_: float = 0.6,
    fb_docs: int = 0) -> ExpandedQuery:
  if not 0 <= lambda_ <= 1:
    raise ValidationError("lambda must be in [0,1]", lambda_)
  if abs(rm1.total - 1.0) > TermDistribution.TOLERANCE:
    raise ValidationError("relevance model is not normalized", rm1.total)
  q_mle = query.mle()
  weights = {}
  for term in [*q_mle, *(t for t in rm1 if t not in q_mle)]:
    w = lambda_ * q_mle[term] + (1 - lambda_) * rm1[term]
    if w > 0:
      weights[term] = w
  return ExpandedQuery(
    query_id=query.query_id,
    term_weights=weights,
    provenance="rm3",
    fb_docs=fb_docs,
    fb_terms=len(rm1),
    lambda_=lambda_)


def search_expanded(
    expanded: ExpandedQuery,
    index: InvertedIndex,
    k: int = 1000,
    model: str = "bm25",
    config: RetrievalConfig | None = None) -> RankedList:
  config = config or RetrievalConfig(model=model, depth=k)
  query = expanded.to_query()
  if model == "bm25":
    return search_bm25(query, index, k=k, k1=config.k1, b=config.b)
  if model == "lm":
    return search_lm_dirichlet(query, index, k=k, mu=config.mu)
  raise ValidationError("unknown retrieval model", model)


def expand_all(
    queries: Sequence[Query],
    initial_runs: Mapping[str, RankedList],
    index: InvertedIndex,
    feedback: FeedbackConfig | None = None,
    retrieval: RetrievalConfig | None = None,
) -> "tuple[dict[str, ExpandedQuery], dict[str, RankedList]]":
  feedback = feedback or FeedbackConfig()
  retrieval = retrieval or RetrievalConfig()
  expanded: dict[str, ExpandedQuery] = {}
  post_runs: dict[str, RankedList] = {}
  for query in queries:
    initial = initial_runs.get(query.query_id)
    if initial is None or len(initial) == 0:
      # nothing to learn from: the expanded query is the original one
      log.warning("[{}] no initial results, feedback skipped", query.query_id)
      rm1 = query.mle()
    else:
      rm1 = estimate_rm1(query, initial, index,
        fb_docs=feedback.fb_docs, fb_terms=feedback.fb_terms, mu=retrieval.mu)
    eq = interpolate_rm3(query, rm1, feedback.lambda_, fb_docs=feedback.fb_docs)
    expanded[query.query_id] = eq
    post_runs[query.query_id] = search_expanded(
      eq, index, k=retrieval.depth, model=retrieval.model, config=retrieval)
    log.debug("[{}] expanded to {} terms", query.query_id, len(eq.term_weights))
  log.activity("expanded {} queries (fb_docs={}, fb_terms={}, lambda={})",
    len(expanded), feedback.fb_docs, feedback.fb_terms, feedback.lambda_)
  return expanded, post_runs


def load_external_run(path: Path, k: int = 1000) -> dict[str, RankedList]:
  return read_trec_run(path, depth=k)


def write_expanded_queries(path: Path, expanded: "Mapping[str, ExpandedQuery]") -> None:
  path = Path(path)
  path.parent.mkdir(parents=True, exist_ok=True)
  with path.open("w", encoding="utf-8") as f:
    for qid, eq in expanded.items():
      terms = sorted(eq.term_weights.items(), key=lambda kv: (-kv[1], kv[0]))
      f.write(f"{qid}\t{','.join(f'{t}:{w!r}' for t, w in terms)}\n")
  log.activity("wrote {} expanded queries: {}", len(expanded), path)


def read_expanded_queries(path: Path) -> dict[str, ExpandedQuery]:
  path = Path(path)
  expanded = {}
  with path.open("r", encoding="utf-8") as f:
    for line_no, line in enumerate(f, start=1):
      line = line.rstrip("\n")
      if not line.strip():
        continue
      try:
        qid, body = line.split("\t")
        weights = {}
        for item in body.split(","):
          term, weight = item.rsplit(":", 1)
          weights[term] = float(weight)
        expanded[qid] = ExpandedQuery(qid, weights)
      except ValueError:
        raise ParseError("malformed expanded query", path, line_no)
      except ValidationError as e:
        raise ParseError(f"invalid expanded query ({e})", path, line_no)
  return expanded
