from typing import Mapping

from .config import FusionConfig
from .decision import DecisionOutcome
from .errors import MissingDataError, ValidationError
from .log import Logger as log
from .retrieval import RankedList


def rank_of(doc_id: str, ranked: RankedList, aleph: int = 1000) -> int:
  """1-based rank of ``doc_id``, or ``aleph`` when the document was not retrieved."""
  if aleph < len(ranked):
    raise ValidationError("aleph must not be smaller than the list length", aleph, len(ranked))
  rank = ranked.rank(doc_id)
  return rank if rank is not None else aleph


def fuse_confidence(
    pre: RankedList,
    post: RankedList,
    theta: float,
    config: FusionConfig | None = None) -> RankedList:
  config = config or FusionConfig()
  if pre.query_id != post.query_id:
    raise ValidationError("cannot fuse lists of different queries", pre.query_id, post.query_id)
  if not 0 <= theta <= 1:
    raise ValidationError("theta must be in [0,1]", pre.query_id, theta)
  candidates = dict.fromkeys([*pre.doc_ids, *post.doc_ids])
  scores = {
    d: (1 - theta) / rank_of(d, pre, config.aleph) + theta / rank_of(d, post, config.aleph)
    for d in candidates
  }
  # descending score, doc id ascending on ties
  fused = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:config.depth]
  return RankedList(pre.query_id, fused, k=config.depth)


def fuse_fixed(
    pre: RankedList,
    post: RankedList,
    alpha: float,
    config: FusionConfig | None = None) -> RankedList:
  return fuse_confidence(pre, post, alpha, config)


def select_hard(pre: RankedList, post: RankedList, decision: DecisionOutcome) -> RankedList:
  return post if decision.apply_prf else pre


def _pairs(pre_runs: Mapping[str, RankedList], post_runs: Mapping[str, RankedList]):
  for qid, pre in pre_runs.items():
    post = post_runs.get(qid)
    if post is None:
      raise MissingDataError("no post-feedback list for query", qid)
    yield qid, pre, post


def fuse_all(
    pre_runs: Mapping[str, RankedList],
    post_runs: Mapping[str, RankedList],
    decisions: Mapping[str, DecisionOutcome] | None = None,
    mode: str = "confidence",
    config: FusionConfig | None = None) -> dict[str, RankedList]:
  """Combine every query's lists with ``mode`` one of ``hard``, ``fixed``, ``confidence``."""
  config = config or FusionConfig()
  if mode not in ("hard", "fixed", "confidence"):
    raise ValidationError("unknown fusion mode", mode)
  if mode != "fixed" and decisions is None:
    raise ValidationError("fusion mode needs decisions", mode)
  fused = {}
  for qid, pre, post in _pairs(pre_runs, post_runs):
    if mode == "fixed":
      fused[qid] = fuse_fixed(pre, post, config.alpha, config)
      continue
    decision = decisions.get(qid)
    if decision is None:
      raise MissingDataError("no decision for query", qid)
    if mode == "hard":
      fused[qid] = select_hard(pre, post, decision)
    else:
      fused[qid] = fuse_confidence(pre, post, decision.theta, config)
  log.activity("fused {} queries ({})", len(fused), mode)
  return fused
