import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .config import DecisionConfig
from .errors import (
  DegenerateLabelsError,
  FormatError,
  MissingDataError,
  ParseError,
  ValidationError,
)
from .evaluation import Qrels, average_precision
from .feedback import ExpandedQuery
from .index import InvertedIndex, TermDistribution
from .log import Logger as log
from .retrieval import Query, RankedList, indexed_doc_model

# add-epsilon smoothing for divergences whose second argument may miss terms
EPSILON = 1e-6
LOGISTIC_MAGIC = "selprf-logistic"
LOGISTIC_VERSION = 1
# keeps theta strictly inside (0,1)
THETA_CLIP = 1e-12
# fewest training scores a TD2F threshold is calibrated on
TD2F_MIN_SCORES = 20

METHOD_QPP = "qpp-srf"
METHOD_TD2F = "td2f"
METHOD_LR = "lr-srf"
METHOD_DEEP = "deep-srf"


@dataclass(frozen=True)
class DecisionOutcome:
  query_id: str
  theta: float
  apply_prf: bool
  method: str

  def __post_init__(self) -> None:
    if not 0 <= self.theta <= 1:
      raise ValidationError("theta must be in [0,1]", self.query_id, self.theta)


@dataclass(frozen=True)
class FeatureVector:
  clarity_topdocs: float
  kl_query_vs_rm: float
  js_feedback_docs: float
  clarity_query_lm: float

  NAMES = ("clarity_topdocs", "kl_query_vs_rm", "js_feedback_docs", "clarity_query_lm")

  def __post_init__(self) -> None:
    values = self.as_array()
    if not np.all(np.isfinite(values)):
      raise ValidationError("non-finite feature", values)
    if self.clarity_topdocs < 0 or self.clarity_query_lm < 0:
      raise ValidationError("clarity features must be non-negative", values)
    if not 0 <= self.js_feedback_docs <= math.log(2) + 1e-12:
      raise ValidationError("JS divergence outside [0, ln 2]", self.js_feedback_docs)

  def as_array(self) -> np.ndarray:
    return np.array([getattr(self, n) for n in self.NAMES], dtype=np.float64)

  @classmethod
  def from_array(cls, values: "Sequence[float] | np.ndarray") -> "FeatureVector":
    return cls(*(float(v) for v in values))


@dataclass(frozen=True, eq=False)
class LogisticModel:
  weights: np.ndarray
  bias: float
  # per-feature standardisation applied before the linear map
  mean: np.ndarray = field(default_factory=lambda: np.zeros(len(FeatureVector.NAMES)))
  scale: np.ndarray = field(default_factory=lambda: np.ones(len(FeatureVector.NAMES)))

  def __post_init__(self) -> None:
    n = len(FeatureVector.NAMES)
    for name in ("weights", "mean", "scale"):
      value = np.asarray(getattr(self, name), dtype=np.float64)
      if value.shape != (n,):
        raise ValidationError(f"logistic {name} must have {n} entries", value.shape)
      object.__setattr__(self, name, value)
    if not (np.all(np.isfinite(self.weights)) and math.isfinite(self.bias)):
      raise ValidationError("logistic model has non-finite parameters")
    if np.any(self.scale <= 0):
      raise ValidationError("standardisation scale must be positive", self.scale)

  @classmethod
  def zero(cls) -> "LogisticModel":
    return cls(np.zeros(len(FeatureVector.NAMES)), 0.0)

  def standardize(self, X: np.ndarray) -> np.ndarray:
    return (X - self.mean) / self.scale

  def predict(self, X: np.ndarray) -> np.ndarray:
    return sigmoid(self.standardize(np.atleast_2d(X)) @ self.weights + self.bias)


@dataclass(frozen=True)
class QueryLabel:
  query_id: str
  y: int
  ap_pre: float
  ap_post: float

  def __post_init__(self) -> None:
    if self.y not in (0, 1):
      raise ValidationError("label must be 0 or 1", self.query_id, self.y)
    if self.y != int(self.ap_post > self.ap_pre):
      raise ValidationError("label disagrees with the AP values", self.query_id, self.y)


def sigmoid(z: "np.ndarray | float") -> "np.ndarray | float":
  return np.exp(-np.logaddexp(0.0, -z))


###############################################################################
# Labels
###############################################################################
def label_query(query_id: str, pre: RankedList, post: RankedList, qrels: Qrels) -> QueryLabel:
  if query_id not in qrels:
    raise MissingDataError("query not found in qrels", query_id)
  ap_pre = average_precision(pre, qrels)
  ap_post = average_precision(post, qrels)
  return QueryLabel(query_id, int(ap_post > ap_pre), ap_pre, ap_post)


def label_all(
    pre_runs: Mapping[str, RankedList],
    post_runs: Mapping[str, RankedList],
    qrels: Qrels) -> dict[str, QueryLabel]:
  labels = {}
  for qid, pre in pre_runs.items():
    post = post_runs.get(qid)
    if post is None:
      raise MissingDataError("no post-feedback list for query", qid)
    labels[qid] = label_query(qid, pre, post, qrels)
  positives = sum(lb.y for lb in labels.values())
  log.activity("labelled {} queries: {} benefit from feedback", len(labels), positives)
  return labels


###############################################################################
# Divergences
###############################################################################
def smooth(
    dist: "Mapping[str, float] | TermDistribution",
    vocabulary: Sequence[str],
    epsilon: float = EPSILON) -> np.ndarray:
  """Add ``epsilon`` to every vocabulary entry of ``dist`` and renormalize."""
  p = np.array([dist[t] if t in dist else 0.0 for t in vocabulary], dtype=np.float64) + epsilon
  return p / p.sum()


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
  p = np.asarray(p, dtype=np.float64)
  q = np.asarray(q, dtype=np.float64)
  support = p > 0
  if np.any(q[support] <= 0):
    raise ValidationError("KL divergence undefined: second distribution misses mass")
  return float(np.sum(p[support] * np.log(p[support] / q[support])))


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
  m = (np.asarray(p) + np.asarray(q)) / 2
  value = 0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(q, m)
  return min(max(value, 0.0), math.log(2))


def _union_vocabulary(*dists: "Mapping[str, float] | TermDistribution") -> list[str]:
  return sorted({t for d in dists for t in d})


def list_model(ranked: RankedList, index: InvertedIndex, top_n: int = 10) -> TermDistribution:
  """Uniform mixture of the MLE models of the top ``top_n`` non-empty documents."""
  if len(ranked) == 0:
    raise ValidationError("empty ranked list", ranked.query_id)
  models = [
    indexed_doc_model(index, d) for d in ranked.top(top_n) if index.doc_length(d) > 0
  ]
  if not models:
    raise ValidationError("top documents are all empty", ranked.query_id)
  mixture: dict[str, float] = {}
  for model in models:
    for term, p in model.items():
      mixture[term] = mixture.get(term, 0.0) + p / len(models)
  return TermDistribution(mixture, normalized=False)


def query_mle(query: Query, index: InvertedIndex | None = None) -> TermDistribution:
  """Query MLE, restricted to collection terms when ``index`` is given."""
  weights = dict(query.weighted_terms())
  if index is not None:
    weights = {t: w for t, w in weights.items() if index.cf(t) > 0}
  if not weights:
    raise ValidationError("query has no usable terms", query.query_id)
  return TermDistribution.from_weights(weights)


def _clarity(model: "Mapping[str, float] | TermDistribution", index: InvertedIndex) -> float:
  terms = [t for t in model if model[t] > 0]
  p = np.array([model[t] for t in terms], dtype=np.float64)
  p_coll = np.array([index.cf(t) / index.total_tokens for t in terms], dtype=np.float64)
  # Gibbs: any negative value is rounding noise
  return max(kl_divergence(p, p_coll), 0.0)


def clarity(ranked: RankedList, index: InvertedIndex, top_n: int = 10) -> float:
  return _clarity(list_model(ranked, index, top_n), index)


###############################################################################
# QPP-SRF
###############################################################################
def normalize_scores(scores: Mapping[str, float]) -> dict[str, float]:
  if not scores:
    raise ValidationError("cannot normalize an empty set of scores")
  lo = min(scores.values())
  hi = max(scores.values())
  if hi == lo:
    return {qid: 0.5 for qid in scores}
  return {qid: (s - lo) / (hi - lo) for qid, s in scores.items()}


def qpp_scores(
    runs: Mapping[str, RankedList],
    index: InvertedIndex,
    top_n: int = 10) -> dict[str, float]:
  return {qid: clarity(ranked, index, top_n) for qid, ranked in runs.items() if len(ranked)}


def decide_qpp_srf(normalized_qpp: float, tau: float, query_id: str = "") -> DecisionOutcome:
  if not 0 <= normalized_qpp <= 1:
    raise ValidationError("normalized QPP estimate must be in [0,1]", query_id, normalized_qpp)
  if not 0 <= tau <= 1:
    raise ValidationError("tau must be in [0,1]", tau)
  # low predicted effectiveness means high confidence in feedback
  return DecisionOutcome(query_id, 1.0 - normalized_qpp, normalized_qpp < tau, METHOD_QPP)


###############################################################################
# TD2F
###############################################################################
def term_divergence(
    pre: "Mapping[str, float] | TermDistribution",
    post: "Mapping[str, float] | TermDistribution",
    epsilon: float = EPSILON) -> float:
  """Mean log-ratio of two term distributions over their union vocabulary."""
  vocabulary = _union_vocabulary(pre, post)
  if not vocabulary:
    raise ValidationError("term divergence of empty distributions")
  log_pre = np.log(smooth(pre, vocabulary, epsilon))
  log_post = np.log(smooth(post, vocabulary, epsilon))
  return float(np.mean(log_pre - log_post))


def td2f_divergence(
    pre_list: RankedList,
    post_list: RankedList,
    index: InvertedIndex,
    top_n: int = 10) -> float:
  return term_divergence(list_model(pre_list, index, top_n), list_model(post_list, index, top_n))


def calibrate_td2f_threshold(train_scores: Sequence[float], quantile: float = 0.95) -> float:
  """Smallest tau such that at least ``quantile`` of the scores are <= tau."""
  n = len(train_scores)
  if n < TD2F_MIN_SCORES:
    raise ValidationError(
      f"at least {TD2F_MIN_SCORES} training scores are needed to calibrate TD2F", n)
  if not 0 < quantile <= 1:
    raise ValidationError("quantile must be in (0,1]", quantile)
  ordered = sorted(train_scores)
  rank = max(math.ceil(quantile * n - 1e-9), 1)
  return float(ordered[rank - 1])


def decide_td2f(score: float, tau: float, query_id: str = "") -> DecisionOutcome:
  apply = score <= tau
  return DecisionOutcome(query_id, 1.0 if apply else 0.0, apply, METHOD_TD2F)


###############################################################################
# LR-SRF
###############################################################################
def extract_lr_features(
    query: Query,
    pre_list: RankedList,
    expanded: ExpandedQuery,
    post_list: RankedList,
    index: InvertedIndex,
    top_n: int = 10) -> FeatureVector:
  if len(pre_list) == 0 or len(post_list) == 0:
    raise ValidationError("features need non-empty ranked lists", query.query_id)
  q_mle = query.mle()

  rm = expanded.term_weights
  vocabulary = _union_vocabulary(rm, q_mle)
  kl_rm = abs(kl_divergence(smooth(rm, vocabulary), smooth(q_mle, vocabulary)))

  docs = [indexed_doc_model(index, d) for d in pre_list.top(top_n) if index.doc_length(d) > 0]
  if not docs:
    raise ValidationError("top documents are all empty", query.query_id)
  vocabulary = _union_vocabulary(*docs)
  doc_arrays = np.stack([smooth(d, vocabulary, 0.0) for d in docs])
  centroid = doc_arrays.mean(axis=0)
  js = float(np.mean([js_divergence(d, centroid) for d in doc_arrays]))

  try:
    clarity_q = _clarity(query_mle(query, index), index)
  except ValidationError:
    # no query term occurs in the collection
    clarity_q = 0.0

  return FeatureVector(
    clarity_topdocs=clarity(pre_list, index, top_n),
    kl_query_vs_rm=kl_rm,
    js_feedback_docs=js,
    clarity_query_lm=clarity_q)


def loss_and_gradient(
    weights: np.ndarray,
    bias: float,
    X: np.ndarray,
    y: np.ndarray,
    l2: float = 0.0) -> "tuple[float, np.ndarray, float]":
  """Mean logistic loss plus ``l2/2 * |w|^2`` and its gradient."""
  z = X @ weights + bias
  loss = float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * weights @ weights)
  err = sigmoid(z) - y
  grad_w = X.T @ err / len(y) + l2 * weights
  grad_b = float(np.mean(err))
  return loss, grad_w, grad_b


def train_logistic(
    examples: "Sequence[tuple[FeatureVector, int]]",
    config: DecisionConfig | None = None,
    standardize: bool = True,
    tolerance: float | None = None) -> LogisticModel:
  config = config or DecisionConfig()
  if len(examples) < 2:
    raise ValidationError("at least 2 training examples are needed", len(examples))
  X = np.stack([f.as_array() for f, _ in examples])
  y = np.array([label for _, label in examples], dtype=np.float64)
  if len(set(y.tolist())) < 2:
    raise DegenerateLabelsError("degenerate labels: training set has a single class", int(y[0]))

  if standardize:
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
  else:
    mean = np.zeros(X.shape[1])
    scale = np.ones(X.shape[1])
  Xs = (X - mean) / scale

  w = np.zeros(X.shape[1])
  b = 0.0
  initial_loss, _, _ = loss_and_gradient(w, b, Xs, y, config.l2)
  loss = initial_loss
  for epoch in range(config.epochs):
    loss, grad_w, grad_b = loss_and_gradient(w, b, Xs, y, config.l2)
    if tolerance is not None and math.sqrt(grad_w @ grad_w + grad_b**2) < tolerance:
      log.debug("logistic training converged after {} epochs", epoch)
      break
    w = w - config.learning_rate * grad_w
    b = b - config.learning_rate * grad_b
  loss, _, _ = loss_and_gradient(w, b, Xs, y, config.l2)
  log.activity("trained logistic model on {} examples: loss {:.4f} -> {:.4f}",
    len(y), initial_loss, loss)
  return LogisticModel(w, b, mean, scale)


def decide_lr(model: LogisticModel, features: FeatureVector, query_id: str = "") -> DecisionOutcome:
  theta = float(model.predict(features.as_array())[0])
  theta = min(max(theta, THETA_CLIP), 1 - THETA_CLIP)
  return DecisionOutcome(query_id, theta, theta > 0.5, METHOD_LR)


###############################################################################
# Files
###############################################################################
def write_labels(path: Path, labels: Mapping[str, QueryLabel]) -> None:
  path = Path(path)
  path.parent.mkdir(parents=True, exist_ok=True)
  with path.open("w", encoding="utf-8") as f:
    for qid, lb in labels.items():
      f.write(f"{qid}\t{lb.y}\t{lb.ap_pre!r}\t{lb.ap_post!r}\n")
  log.activity("wrote {} labels: {}", len(labels), path)


def read_labels(path: Path) -> dict[str, QueryLabel]:
  path = Path(path)
  labels = {}
  with path.open("r", encoding="utf-8") as f:
    for line_no, line in enumerate(f, start=1):
      if not line.strip():
        continue
      fields = line.rstrip("\n").split("\t")
      if len(fields) != 4:
        raise ParseError(f"expected 4 fields, found {len(fields)}", path, line_no)
      try:
        labels[fields[0]] = QueryLabel(
          fields[0], int(fields[1]), float(fields[2]), float(fields[3]))
      except (ValueError, ValidationError) as e:
        raise ParseError(f"invalid label ({e})", path, line_no)
  return labels


def write_decisions(path: Path, decisions: Mapping[str, DecisionOutcome]) -> None:
  path = Path(path)
  path.parent.mkdir(parents=True, exist_ok=True)
  with path.open("w", encoding="utf-8") as f:
    for qid, d in decisions.items():
      f.write(f"{qid}\t{d.theta!r}\t{int(d.apply_prf)}\t{d.method}\n")
  log.activity("wrote {} decisions: {}", len(decisions), path)


def read_decisions(path: Path) -> dict[str, DecisionOutcome]:
  path = Path(path)
  decisions = {}
  with path.open("r", encoding="utf-8") as f:
    for line_no, line in enumerate(f, start=1):
      if not line.strip():
        continue
      fields = line.rstrip("\n").split("\t")
      if len(fields) != 4 or fields[2] not in ("0", "1"):
        raise ParseError("expected query_id, theta, 0|1, method", path, line_no)
      try:
        decisions[fields[0]] = DecisionOutcome(
          fields[0], float(fields[1]), fields[2] == "1", fields[3])
      except (ValueError, ValidationError) as e:
        raise ParseError(f"invalid decision ({e})", path, line_no)
  return decisions


def save_logistic(model: LogisticModel, path: Path) -> None:
  path = Path(path)
  path.parent.mkdir(parents=True, exist_ok=True)

  def _row(name, values):
    return " ".join([name, *(repr(float(v)) for v in values)])

  path.write_text("\n".join([
    f"{LOGISTIC_MAGIC} {LOGISTIC_VERSION}",
    " ".join(["features", *FeatureVector.NAMES]),
    _row("weights", model.weights),
    _row("bias", [model.bias]),
    _row("mean", model.mean),
    _row("scale", model.scale),
  ]) + "\n", encoding="utf-8")
  log.activity("saved logistic model: {}", path)


def load_logistic(path: Path) -> LogisticModel:
  path = Path(path)
  lines = path.read_text(encoding="utf-8").splitlines()
  header = lines[0].split() if lines else []
  if len(header) != 2 or header[0] != LOGISTIC_MAGIC:
    raise FormatError("not a logistic model file", path)
  if header[1] != str(LOGISTIC_VERSION):
    raise FormatError("unsupported logistic model version", path,
      f"expected {LOGISTIC_VERSION}, found {header[1]}")
  rows = {}
  for line in lines[1:]:
    if line.strip():
      name, *values = line.split()
      rows[name] = values
  if tuple(rows.get("features", ())) != FeatureVector.NAMES:
    raise FormatError("logistic model features do not match", path, rows.get("features"))
  try:
    return LogisticModel(
      weights=np.array([float(v) for v in rows["weights"]]),
      bias=float(rows["bias"][0]),
      mean=np.array([float(v) for v in rows["mean"]]),
      scale=np.array([float(v) for v in rows["scale"]]))
  except (KeyError, IndexError, ValueError) as e:
    raise FormatError("malformed logistic model file", path, e)
