import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .errors import MissingDataError, ValidationError
from .log import Logger as log
from .retrieval import RankedList

AP_CUTOFF = 1000
NDCG_DEPTH = 10


class Qrels:
  """Relevance judgments: (query_id, doc_id) -> non-negative integer grade."""

  def __init__(self, judgments: "Mapping[tuple[str, str], int]") -> None:
    self._grades: dict[str, dict[str, int]] = {}
    for (qid, doc_id), grade in judgments.items():
      if not isinstance(grade, int) or grade < 0:
        raise ValidationError("relevance grades must be non-negative integers", qid, doc_id, grade)
      self._grades.setdefault(qid, {})[doc_id] = grade

  @property
  def query_ids(self) -> list[str]:
    return list(self._grades)

  def __contains__(self, query_id: str) -> bool:
    return query_id in self._grades

  def __len__(self) -> int:
    return sum(len(g) for g in self._grades.values())

  def grades(self, query_id: str) -> dict[str, int]:
    try:
      return self._grades[query_id]
    except KeyError:
      raise MissingDataError("query not found in qrels", query_id)

  def grade(self, query_id: str, doc_id: str) -> int:
    return self.grades(query_id).get(doc_id, 0)

  def relevant(self, query_id: str) -> set[str]:
    return {d for d, g in self.grades(query_id).items() if g >= 1}


###############################################################################
# Per-query metrics
###############################################################################
def average_precision(run: RankedList, qrels: Qrels, cutoff: int = AP_CUTOFF) -> float:
  relevant = qrels.relevant(run.query_id)
  if not relevant:
    return 0.0
  hits = 0
  total = 0.0
  for i, doc_id in enumerate(run.top(cutoff), start=1):
    if doc_id in relevant:
      hits += 1
      total += hits / i
  return total / len(relevant)


def _dcg(gains: Iterable[int]) -> float:
  return sum((2**g - 1) / math.log2(rank + 1) for rank, g in enumerate(gains, start=1))


def ndcg_at_10(run: RankedList, qrels: Qrels) -> float:
  grades = qrels.grades(run.query_id)
  ideal = _dcg(sorted(grades.values(), reverse=True)[:NDCG_DEPTH])
  if ideal == 0:
    return 0.0
  return _dcg(grades.get(d, 0) for d in run.top(NDCG_DEPTH)) / ideal


def delta_ap(ap_pre: float, ap_post: float) -> float | None:
  """Relative AP change of the feedback list, undefined when the initial AP is 0."""
  if ap_pre == 0:
    return None
  return (ap_post - ap_pre) / ap_pre


def per_query_delta_ap(
    pre_runs: Mapping[str, RankedList],
    post_runs: Mapping[str, RankedList],
    qrels: Qrels) -> dict[str, float | None]:
  _require_same_keys(pre_runs, post_runs, "pre-feedback runs", "post-feedback runs")
  return {
    qid: delta_ap(average_precision(pre, qrels), average_precision(post_runs[qid], qrels))
    for qid, pre in pre_runs.items()
  }


def _require_same_keys(a: Mapping, b: Mapping, a_name: str, b_name: str) -> None:
  diff = set(a).symmetric_difference(b)
  if diff:
    raise MissingDataError(f"query ids differ between {a_name} and {b_name}", *sorted(diff))


def decision_accuracy(decisions: Mapping[str, bool], labels: Mapping[str, int]) -> float:
  _require_same_keys(decisions, labels, "decisions", "labels")
  if not decisions:
    raise ValidationError("no queries to compute the decision accuracy on")
  correct = sum(1 for qid, apply in decisions.items() if bool(apply) == (labels[qid] == 1))
  return correct / len(decisions)


###############################################################################
# Reports
###############################################################################
@dataclass(frozen=True)
class EvalReport:
  per_query_ap: dict[str, float]
  per_query_ndcg: dict[str, float]
  accuracy: float | None = None
  name: str = ""

  def __post_init__(self) -> None:
    values = [*self.per_query_ap.values(), *self.per_query_ndcg.values()]
    if self.accuracy is not None:
      values.append(self.accuracy)
    for v in values:
      if not 0 <= v <= 1:
        raise ValidationError("metric outside [0,1]", self.name, v)

  @property
  def map(self) -> float:
    if not self.per_query_ap:
      return 0.0
    return math.fsum(self.per_query_ap.values()) / len(self.per_query_ap)

  @property
  def mean_ndcg(self) -> float:
    if not self.per_query_ndcg:
      return 0.0
    return math.fsum(self.per_query_ndcg.values()) / len(self.per_query_ndcg)


def evaluate(
    runs: Mapping[str, RankedList],
    qrels: Qrels,
    decisions: Mapping[str, bool] | None = None,
    labels: Mapping[str, int] | None = None,
    query_ids: Iterable[str] | None = None,
    name: str = "") -> EvalReport:
  """Score ``runs`` over ``query_ids`` (every judged query by default).

  Judged queries without a ranked list score 0 on both metrics."""
  query_ids = list(query_ids) if query_ids is not None else qrels.query_ids
  per_query_ap = {}
  per_query_ndcg = {}
  missing = []
  for qid in query_ids:
    run = runs.get(qid)
    if run is None:
      missing.append(qid)
      run = RankedList(qid, ())
    per_query_ap[qid] = average_precision(run, qrels)
    per_query_ndcg[qid] = ndcg_at_10(run, qrels)
  if missing:
    log.warning("[{}] {} judged queries have no ranked list, scored 0",
      name or "eval", len(missing))
  accuracy = None
  if decisions is not None and labels is not None:
    accuracy = decision_accuracy(decisions, labels)
  return EvalReport(per_query_ap, per_query_ndcg, accuracy=accuracy, name=name)


def oracle_run(
    pre_runs: Mapping[str, RankedList],
    post_runs: Mapping[str, RankedList],
    qrels: Qrels) -> "tuple[dict[str, RankedList], EvalReport]":
  """Per query, keep whichever list has the higher AP (the initial one on ties)."""
  _require_same_keys(pre_runs, post_runs, "pre-feedback runs", "post-feedback runs")
  chosen = {}
  for qid, pre in pre_runs.items():
    post = post_runs[qid]
    chosen[qid] = post if average_precision(post, qrels) > average_precision(pre, qrels) else pre
  report = evaluate(chosen, qrels, query_ids=chosen, name="oracle")
  n_post = sum(1 for qid, run in chosen.items() if run is post_runs[qid])
  log.activity("oracle applies feedback to {}/{} queries, MAP {:.4f}",
    n_post, len(chosen), report.map)
  return chosen, report


@dataclass(frozen=True)
class ContingencyCell:
  count: int = 0
  mean_abs_delta: float = 0.0


@dataclass(frozen=True)
class ContingencyReport:
  # keyed by (predicted, actual): predicted in {"apply", "skip"}, actual in {"gain", "no-gain"}
  cells: dict[tuple[str, str], ContingencyCell]
  excluded: list[str] = field(default_factory=list)

  PREDICTED = ("apply", "skip")
  ACTUAL = ("gain", "no-gain")

  def cell(self, predicted: str, actual: str) -> ContingencyCell:
    return self.cells[(predicted, actual)]

  @property
  def total(self) -> int:
    return sum(c.count for c in self.cells.values()) + len(self.excluded)


def contingency_report(
    decisions: Mapping[str, bool],
    labels: Mapping[str, int],
    deltas: Mapping[str, float | None]) -> ContingencyReport:
  _require_same_keys(decisions, labels, "decisions", "labels")
  _require_same_keys(decisions, deltas, "decisions", "delta AP values")
  groups: dict[tuple[str, str], list[float]] = {
    (p, a): [] for p in ContingencyReport.PREDICTED for a in ContingencyReport.ACTUAL
  }
  excluded = []
  for qid, apply in decisions.items():
    delta = deltas[qid]
    if delta is None:
      excluded.append(qid)
      continue
    key = ("apply" if apply else "skip", "gain" if delta > 0 else "no-gain")
    groups[key].append(abs(delta))
  if excluded:
    log.warning("{} queries with initial AP 0 excluded from the contingency table", len(excluded))
  cells = {
    key: ContingencyCell(len(values), math.fsum(values) / len(values) if values else 0.0)
    for key, values in groups.items()
  }
  return ContingencyReport(cells, excluded)


def format_report(reports: Mapping[str, EvalReport]) -> str:
  rows = [("method", "accuracy", "MAP", "nDCG@10")]
  for name, report in reports.items():
    acc = f"{report.accuracy:.4f}" if report.accuracy is not None else "-"
    rows.append((name, acc, f"{report.map:.4f}", f"{report.mean_ndcg:.4f}"))
  width = max(len(r[0]) for r in rows)
  return "\n".join(
    f"{name:<{width}}  {acc:>8}  {map_:>6}  {ndcg:>7}" for name, acc, map_, ndcg in rows
  )


def format_report_tsv(reports: Mapping[str, EvalReport]) -> str:
  lines = ["method\taccuracy\tmap\tndcg@10"]
  for name, report in reports.items():
    acc = "" if report.accuracy is None else f"{report.accuracy:.6f}"
    lines.append(f"{name}\t{acc}\t{report.map:.6f}\t{report.mean_ndcg:.6f}")
  return "\n".join(lines) + "\n"


def format_contingency(report: ContingencyReport) -> str:
  lines = [f"{'':<10}{'dAP > 0':>20}{'dAP <= 0':>20}"]
  for predicted in ContingencyReport.PREDICTED:
    row = f"{predicted:<10}"
    for actual in ContingencyReport.ACTUAL:
      c = report.cell(predicted, actual)
      row += f"{c.count:>8} ({c.mean_abs_delta:>8.4f})"
    lines.append(row)
  lines.append(f"excluded (initial AP = 0): {len(report.excluded)}")
  return "\n".join(lines)
