import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .config import FeedbackConfig, FusionConfig, RetrievalConfig
from .decision import decide_qpp_srf
from .errors import ValidationError
from .evaluation import Qrels, evaluate, oracle_run
from .feedback import expand_all
from .fusion import fuse_fixed, select_hard
from .index import InvertedIndex
from .log import Logger as log
from .retrieval import Query, RankedList, search_all

ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(11))
TAU_GRID = tuple(round(0.05 * i, 2) for i in range(21))
FB_DOCS_GRID = (5, 10, 20, 30, 40)


def kfold_split(query_ids: Sequence[str], folds: int = 5, seed: int = 0) -> list[list[str]]:
  ids = sorted(set(query_ids))
  if not 2 <= folds <= len(ids):
    raise ValidationError("folds must be between 2 and the number of queries", folds, len(ids))
  rng = np.random.default_rng(seed)
  order = rng.permutation(len(ids))
  return [[ids[i] for i in part] for part in np.array_split(order, folds)]


def _subset(runs: Mapping[str, RankedList], query_ids: Sequence[str]) -> dict[str, RankedList]:
  return {qid: runs[qid] for qid in query_ids if qid in runs}


def _map(runs: Mapping[str, RankedList], qrels: Qrels, query_ids: Sequence[str]) -> float:
  return evaluate(runs, qrels, query_ids=query_ids).map


def _best(scored: "list[tuple[float, float]]") -> tuple[float, float]:
  # highest MAP wins; the grid is scanned in ascending order so ties keep the smallest value
  best_value, best_map = scored[0]
  for value, score in scored[1:]:
    if score > best_map:
      best_value, best_map = value, score
  return best_value, best_map


def grid_search_alpha(
    pre_runs: Mapping[str, RankedList],
    post_runs: Mapping[str, RankedList],
    qrels: Qrels,
    grid: Sequence[float] = ALPHA_GRID,
    config: FusionConfig | None = None) -> tuple[float, float]:
  config = config or FusionConfig()
  query_ids = list(pre_runs)
  scored = []
  for alpha in sorted(grid):
    fused = {qid: fuse_fixed(pre, post_runs[qid], alpha, config) for qid, pre in pre_runs.items()}
    scored.append((alpha, _map(fused, qrels, query_ids)))
  alpha, best = _best(scored)
  log.debug("r2f2 alpha {} (MAP {:.4f})", alpha, best)
  return alpha, best


def grid_search_tau(
    normalized_qpp: Mapping[str, float],
    pre_runs: Mapping[str, RankedList],
    post_runs: Mapping[str, RankedList],
    qrels: Qrels,
    grid: Sequence[float] = TAU_GRID) -> tuple[float, float]:
  query_ids = list(pre_runs)
  scored = []
  for tau in sorted(grid):
    selected = {
      qid: select_hard(pre, post_runs[qid], decide_qpp_srf(normalized_qpp[qid], tau, qid))
      for qid, pre in pre_runs.items()
    }
    scored.append((tau, _map(selected, qrels, query_ids)))
  tau, best = _best(scored)
  log.debug("qpp-srf tau {} (MAP {:.4f})", tau, best)
  return tau, best


def grid_search_fb_docs(
    queries: Sequence[Query],
    index: InvertedIndex,
    qrels: Qrels,
    feedback: FeedbackConfig | None = None,
    retrieval: RetrievalConfig | None = None,
    grid: Sequence[int] = FB_DOCS_GRID,
    initial_runs: Mapping[str, RankedList] | None = None) -> tuple[int, float]:
  feedback = feedback or FeedbackConfig()
  retrieval = retrieval or RetrievalConfig()
  if initial_runs is None:
    initial_runs = search_all(queries, index, retrieval)
  query_ids = [q.query_id for q in queries]
  scored = []
  for fb_docs in sorted(grid):
    settings = FeedbackConfig(fb_docs=fb_docs, fb_terms=feedback.fb_terms, lambda_=feedback.lambda_)
    _, post_runs = expand_all(queries, initial_runs, index, settings, retrieval)
    scored.append((fb_docs, _map(post_runs, qrels, query_ids)))
  fb_docs, best = _best(scored)
  log.activity("feedback depth {} (MAP {:.4f})", fb_docs, best)
  return int(fb_docs), best


@dataclass(frozen=True)
class CrossValidationReport:
  # method -> held-out per-query AP, gathered over all folds
  per_query_ap: dict[str, dict[str, float]]
  # per fold tuned values
  alphas: list[float]
  taus: list[float]

  def map(self, method: str) -> float:
    values = self.per_query_ap[method]
    return math.fsum(values.values()) / len(values) if values else 0.0

  @property
  def methods(self) -> list[str]:
    return list(self.per_query_ap)


def cross_validate(
    pre_runs: Mapping[str, RankedList],
    post_runs: Mapping[str, RankedList],
    qrels: Qrels,
    normalized_qpp: Mapping[str, float],
    folds: int = 5,
    seed: int = 0,
    config: FusionConfig | None = None) -> CrossValidationReport:
  """Tune the R2F2 weight and the QPP-SRF threshold on the training folds
  and score every method on the held-out fold."""
  config = config or FusionConfig()
  methods = ("no-prf", "rm3", "qpp-srf", "r2f2", "oracle")
  per_query_ap: dict[str, dict[str, float]] = {m: {} for m in methods}
  alphas = []
  taus = []
  splits = kfold_split(list(pre_runs), folds, seed)
  for i, held_out in enumerate(splits):
    train = [qid for j, part in enumerate(splits) if j != i for qid in part]
    train_pre, train_post = _subset(pre_runs, train), _subset(post_runs, train)
    alpha, _ = grid_search_alpha(train_pre, train_post, qrels, config=config)
    tau, _ = grid_search_tau(normalized_qpp, train_pre, train_post, qrels)
    alphas.append(alpha)
    taus.append(tau)

    test_pre, test_post = _subset(pre_runs, held_out), _subset(post_runs, held_out)
    oracle, _ = oracle_run(test_pre, test_post, qrels)
    runs = {
      "no-prf": test_pre,
      "rm3": test_post,
      "qpp-srf": {
        qid: select_hard(pre, test_post[qid], decide_qpp_srf(normalized_qpp[qid], tau, qid))
        for qid, pre in test_pre.items()
      },
      "r2f2": {
        qid: fuse_fixed(pre, test_post[qid], alpha, config) for qid, pre in test_pre.items()
      },
      "oracle": oracle,
    }
    for method, method_runs in runs.items():
      per_query_ap[method].update(evaluate(method_runs, qrels, query_ids=held_out).per_query_ap)
    log.debug("fold {}/{}: alpha {}, tau {}", i + 1, len(splits), alpha, tau)
  report = CrossValidationReport(per_query_ap, alphas, taus)
  log.activity("cross-validated {} folds: {}", len(splits),
    ", ".join(f"{m} {report.map(m):.4f}" for m in methods))
  return report
