import itertools
import math
import random

import pytest

from selprf.core.decision import label_all
from selprf.core.errors import MissingDataError, ValidationError
from selprf.core.evaluation import (
  EvalReport,
  Qrels,
  average_precision,
  contingency_report,
  decision_accuracy,
  delta_ap,
  evaluate,
  format_contingency,
  format_report,
  format_report_tsv,
  ndcg_at_10,
  oracle_run,
  per_query_delta_ap,
)
from selprf.core.retrieval import RankedList


def _ranked(qid: str, docs: list[str]) -> RankedList:
  return RankedList(qid, [(d, float(len(docs) - i)) for i, d in enumerate(docs)])


def _filler(n: int) -> list[str]:
  return [f"x{i}" for i in range(n)]


def test_qrels():
  qrels = Qrels({("q1", "d1"): 1, ("q1", "d2"): 0, ("q2", "d1"): 2})
  assert "q1" in qrels
  assert "q3" not in qrels
  assert len(qrels) == 3
  assert qrels.relevant("q1") == {"d1"}
  with pytest.raises(MissingDataError):
    qrels.grades("q3")
  with pytest.raises(ValidationError):
    Qrels({("q1", "d1"): -1})


def test_average_precision():
  qrels = Qrels({("q1", "d1"): 1, ("q1", "d3"): 1})
  assert average_precision(_ranked("q1", ["d1", "d2", "d3"]), qrels) == pytest.approx(5 / 6)
  assert average_precision(_ranked("q1", ["d1", "d2", "d3"]), qrels) == pytest.approx(
    0.8333, abs=1e-4)
  assert average_precision(_ranked("q1", ["d2", "d4"]), qrels) == 0.0
  assert average_precision(_ranked("q1", ["d3", "d1", "d2"]), qrels) == 1.0
  # relevant documents past the cutoff do not count
  assert average_precision(_ranked("q1", ["d2", "d1", "d3"]), qrels, cutoff=2) == 0.25


def test_ndcg_at_10():
  qrels = Qrels({("q1", "d1"): 1, ("q2", "a"): 2, ("q2", "b"): 1, ("q2", "c"): 0})
  assert ndcg_at_10(_ranked("q1", ["d2", "d1"]), qrels) == pytest.approx(1 / math.log2(3))
  assert ndcg_at_10(_ranked("q1", ["d2", "d1"]), qrels) == pytest.approx(0.6309, abs=1e-4)
  assert ndcg_at_10(_ranked("q2", ["a", "b", "c"]), qrels) == pytest.approx(1.0)
  assert ndcg_at_10(_ranked("q1", _filler(10) + ["d1"]), qrels) == 0.0

  swapped = ndcg_at_10(_ranked("q2", ["b", "a"]), qrels)
  ideal = 3 + 1 / math.log2(3)
  assert swapped == pytest.approx((1 + 3 / math.log2(3)) / ideal)


def test_decision_accuracy():
  assert decision_accuracy({"q1": True, "q2": False}, {"q1": 1, "q2": 0}) == 1.0
  assert decision_accuracy({"q1": True, "q2": True}, {"q1": 1, "q2": 0}) == 0.5
  with pytest.raises(ValidationError):
    decision_accuracy({}, {})
  with pytest.raises(MissingDataError):
    decision_accuracy({"q1": True}, {"q2": 1})


def test_delta_ap():
  assert delta_ap(0.4, 0.5) == pytest.approx(0.25)
  assert delta_ap(0.5, 0.25) == pytest.approx(-0.5)
  assert delta_ap(0.0, 0.5) is None


def test_evaluate():
  qrels = Qrels({("q1", "d1"): 1, ("q1", "d3"): 1, ("q2", "d1"): 1})
  runs = {"q1": _ranked("q1", ["d1", "d2", "d3"])}
  report = evaluate(runs, qrels, name="bm25")
  # q2 has no run and scores 0
  assert report.per_query_ap == pytest.approx({"q1": 5 / 6, "q2": 0.0})
  assert report.map == pytest.approx(5 / 12)
  assert report.accuracy is None

  only_q1 = evaluate(runs, qrels, query_ids=["q1"])
  assert only_q1.map == pytest.approx(5 / 6)

  with_accuracy = evaluate(runs, qrels, decisions={"q1": True}, labels={"q1": 0},
    query_ids=["q1"])
  assert with_accuracy.accuracy == 0.0

  with pytest.raises(ValidationError):
    EvalReport({"q1": 1.5}, {"q1": 0.5})
  assert EvalReport({}, {}).map == 0.0


def test_oracle_run():
  qrels = Qrels({("q1", "d1"): 1, ("q2", "d1"): 1})
  pre = {
    "q1": _ranked("q1", _filler(4) + ["d1"]),
    "q2": _ranked("q2", ["d1"]),
  }
  post = {
    "q1": _ranked("q1", ["x9", "d1"]),
    "q2": _ranked("q2", ["d1", "x1"]),
  }
  chosen, report = oracle_run(pre, post, qrels)
  assert chosen["q1"] is post["q1"]
  assert chosen["q2"] is pre["q2"]
  assert report.per_query_ap == pytest.approx({"q1": 0.5, "q2": 1.0})
  expected = (max(0.2, 0.5) + max(1.0, 1.0)) / 2
  assert report.map == pytest.approx(expected)

  with pytest.raises(MissingDataError):
    oracle_run(pre, {"q1": post["q1"]}, qrels)


def test_contingency_report():
  qrels = Qrels({(q, "d1"): 1 for q in ("q1", "q2", "q3", "q4")})
  pre = {
    "q1": _ranked("q1", ["x0", "d1"]),
    "q2": _ranked("q2", ["d1"]),
    "q3": _ranked("q3", ["x0"]),
    "q4": _ranked("q4", ["x0", "d1"]),
  }
  post = {
    "q1": _ranked("q1", ["d1"]),
    "q2": _ranked("q2", ["x0", "d1"]),
    "q3": _ranked("q3", ["d1"]),
    "q4": _ranked("q4", ["d1"]),
  }
  deltas = per_query_delta_ap(pre, post, qrels)
  assert deltas["q3"] is None
  assert [deltas[q] for q in ("q1", "q2", "q4")] == pytest.approx([1.0, -0.5, 1.0])

  decisions = {"q1": True, "q2": False, "q3": True, "q4": False}
  labels = {"q1": 1, "q2": 0, "q3": 1, "q4": 1}
  table = contingency_report(decisions, labels, deltas)
  assert table.cell("apply", "gain").count == 1
  assert table.cell("apply", "gain").mean_abs_delta == pytest.approx(1.0)
  assert table.cell("skip", "no-gain").count == 1
  assert table.cell("skip", "no-gain").mean_abs_delta == pytest.approx(0.5)
  assert table.cell("skip", "gain").count == 1
  assert table.cell("apply", "no-gain").count == 0
  assert table.excluded == ["q3"]
  assert table.total == 4
  assert "excluded (initial AP = 0): 1" in format_contingency(table)


def test_contingency_all_correct():
  deltas = {"q1": 0.5, "q2": 0.25}
  table = contingency_report({"q1": True, "q2": True}, {"q1": 1, "q2": 1}, deltas)
  assert table.cell("apply", "gain").count == 2
  assert table.cell("apply", "gain").mean_abs_delta == pytest.approx(0.375)
  assert table.cell("apply", "no-gain").count == 0
  assert table.cell("skip", "gain").count == 0


def test_format_report():
  reports = {
    "bm25": EvalReport({"q1": 0.5}, {"q1": 0.25}, name="bm25"),
    "lr-srf": EvalReport({"q1": 1.0}, {"q1": 1.0}, accuracy=0.75, name="lr-srf"),
  }
  text = format_report(reports)
  lines = text.splitlines()
  assert len(lines) == 3
  assert lines[0].split() == ["method", "accuracy", "MAP", "nDCG@10"]
  assert lines[1].split() == ["bm25", "-", "0.5000", "0.2500"]
  assert lines[2].split() == ["lr-srf", "0.7500", "1.0000", "1.0000"]

  tsv = format_report_tsv(reports).splitlines()
  assert tsv[1] == "bm25\t\t0.500000\t0.250000"
  assert tsv[2] == "lr-srf\t0.750000\t1.000000\t1.000000"


def _reference_ap(docs: list[str], grades: dict[str, int]) -> float:
  relevant = {d for d, g in grades.items() if g > 0}
  if not relevant:
    return 0.0
  precisions = []
  for i, d in enumerate(docs):
    if d in relevant:
      precisions.append(len(relevant.intersection(docs[:i + 1])) / (i + 1))
  return sum(precisions) / len(relevant)


def _reference_ndcg(docs: list[str], grades: dict[str, int]) -> float:
  def dcg(gains):
    return sum((2**g - 1) / math.log2(i + 2) for i, g in enumerate(gains))

  ideal = dcg(sorted(grades.values(), reverse=True)[:10])
  return dcg([grades.get(d, 0) for d in docs[:10]]) / ideal if ideal else 0.0


def _random_instance(rng: random.Random, qid: str = "q1"):
  pool = [f"d{i}" for i in range(25)]
  docs = rng.sample(pool, rng.randint(1, 20))
  grades = {d: rng.choice([0, 0, 1, 2]) for d in rng.sample(pool, rng.randint(1, 12))}
  return docs, grades


def test_metrics_match_reference():
  rng = random.Random(7)
  for _ in range(200):
    docs, grades = _random_instance(rng)
    qrels = Qrels({("q1", d): g for d, g in grades.items()})
    run = _ranked("q1", docs)
    assert average_precision(run, qrels) == pytest.approx(_reference_ap(docs, grades), abs=1e-9)
    assert ndcg_at_10(run, qrels) == pytest.approx(_reference_ndcg(docs, grades), abs=1e-9)


def test_oracle_dominates_every_selection():
  rng = random.Random(11)
  for _ in range(20):
    n = rng.randint(1, 8)
    qids = [f"q{i}" for i in range(n)]
    judgments = {}
    pre, post = {}, {}
    for qid in qids:
      docs, grades = _random_instance(rng, qid)
      judgments.update({(qid, d): g for d, g in grades.items()})
      pre[qid] = _ranked(qid, docs)
      post[qid] = _ranked(qid, _random_instance(rng, qid)[0])
    qrels = Qrels(judgments)
    _, oracle = oracle_run(pre, post, qrels)
    for bits in itertools.product((False, True), repeat=n):
      selected = {qid: post[qid] if bit else pre[qid] for qid, bit in zip(qids, bits)}
      score = evaluate(selected, qrels, query_ids=qids).map
      assert score <= oracle.map + 1e-12
    labels = label_all(pre, post, qrels)
    by_label = {qid: post[qid] if labels[qid].y else pre[qid] for qid in qids}
    assert evaluate(by_label, qrels, query_ids=qids).map == pytest.approx(oracle.map, abs=1e-12)
