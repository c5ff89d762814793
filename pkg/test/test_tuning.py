import random

import pytest

from selprf.core.config import FeedbackConfig
from selprf.core.errors import ValidationError
from selprf.core.evaluation import Qrels, evaluate
from selprf.core.index import build_index
from selprf.core.retrieval import Query, RankedList
from selprf.core.tuning import (
  ALPHA_GRID,
  TAU_GRID,
  cross_validate,
  grid_search_alpha,
  grid_search_fb_docs,
  grid_search_tau,
  kfold_split,
)


def _ranked(qid: str, docs: list[str]) -> RankedList:
  return RankedList(qid, [(d, float(len(docs) - i)) for i, d in enumerate(docs)])


def test_grids():
  assert ALPHA_GRID[0] == 0.0 and ALPHA_GRID[-1] == 1.0 and len(ALPHA_GRID) == 11
  assert TAU_GRID[1] == 0.05 and len(TAU_GRID) == 21


def test_kfold_split():
  ids = [f"q{i}" for i in range(11)]
  folds = kfold_split(ids, 3, seed=1)
  assert len(folds) == 3
  assert sorted(q for fold in folds for q in fold) == sorted(ids)
  assert sorted(len(f) for f in folds) == [3, 4, 4]
  assert kfold_split(ids, 3, seed=1) == folds
  with pytest.raises(ValidationError):
    kfold_split(ids, 1)
  with pytest.raises(ValidationError):
    kfold_split(ids[:2], 3)


def test_grid_search_alpha():
  qrels = Qrels({("q1", "d1"): 1})
  pre = {"q1": _ranked("q1", ["x0", "x1", "d1"])}
  post = {"q1": _ranked("q1", ["d1", "y0"])}
  # d1 overtakes x0 once alpha exceeds ~0.4
  alpha, best = grid_search_alpha(pre, post, qrels)
  assert alpha == 0.5
  assert best == pytest.approx(1.0)

  same, _ = grid_search_alpha(pre, pre, qrels)
  assert same == 0.0


def test_grid_search_tau():
  qrels = Qrels({("q1", "d1"): 1, ("q2", "d1"): 1})
  pre = {"q1": _ranked("q1", ["x", "d1"]), "q2": _ranked("q2", ["d1"])}
  post = {"q1": _ranked("q1", ["d1"]), "q2": _ranked("q2", ["x", "d1"])}
  qpp = {"q1": 0.2, "q2": 0.8}
  tau, best = grid_search_tau(qpp, pre, post, qrels)
  assert tau == 0.25
  assert best == pytest.approx(1.0)


def test_grid_search_fb_docs():
  index = build_index([
    ("d1", "apple banana"),
    ("d2", "apple cherry"),
    ("d3", "banana cherry date"),
    ("d4", "date fig"),
    ("d5", "fig grape apple"),
  ])
  queries = [Query.from_text("q1", "apple"), Query.from_text("q2", "fig")]
  qrels = Qrels({("q1", "d1"): 1, ("q1", "d3"): 1, ("q2", "d4"): 1})
  fb_docs, best = grid_search_fb_docs(queries, index, qrels, FeedbackConfig(fb_terms=5),
    grid=(3, 1, 2))
  assert fb_docs in (1, 2, 3)
  assert 0 <= best <= 1


def test_cross_validate():
  rng = random.Random(3)
  judgments = {}
  pre = {}
  post = {}
  qpp = {}
  for i in range(12):
    qid = f"q{i}"
    judgments[(qid, "rel")] = 1
    others = [f"x{j}" for j in range(5)]
    pre[qid] = _ranked(qid, rng.sample(others, 5)[:rng.randint(0, 4)] + ["rel"])
    post[qid] = _ranked(qid, rng.sample(others, 5)[:rng.randint(0, 4)] + ["rel"])
    qpp[qid] = rng.random()
  qrels = Qrels(judgments)
  report = cross_validate(pre, post, qrels, qpp, folds=3, seed=0)
  assert report.methods == ["no-prf", "rm3", "qpp-srf", "r2f2", "oracle"]
  assert len(report.alphas) == len(report.taus) == 3
  for method in report.methods:
    assert set(report.per_query_ap[method]) == set(pre)
  assert report.map("no-prf") == pytest.approx(evaluate(pre, qrels).map)
  assert report.map("rm3") == pytest.approx(evaluate(post, qrels).map)
  assert report.map("oracle") >= max(report.map("no-prf"), report.map("rm3"))
  # hard selection never beats picking the better list per query
  assert report.map("qpp-srf") <= report.map("oracle") + 1e-12
