import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .config import DecisionConfig, DeepConfig, SrfConfig
from .decision import (
  METHOD_DEEP,
  METHOD_LR,
  METHOD_QPP,
  METHOD_TD2F,
  TD2F_MIN_SCORES,
  DecisionOutcome,
  FeatureVector,
  calibrate_td2f_threshold,
  decide_lr,
  decide_qpp_srf,
  decide_td2f,
  extract_lr_features,
  label_all,
  normalize_scores,
  qpp_scores,
  td2f_divergence,
  train_logistic,
  write_decisions,
  write_labels,
)
from .deep import TrainingInstance, build_instance, forward_infer, train_decider
from .errors import DegenerateLabelsError, ValidationError
from .evaluation import (
  ContingencyReport,
  EvalReport,
  Qrels,
  contingency_report,
  evaluate,
  format_contingency,
  format_report,
  format_report_tsv,
  oracle_run,
  per_query_delta_ap,
)
from .feedback import ExpandedQuery, expand_all, write_expanded_queries
from .formats import write_trec_run
from .fusion import fuse_all, fuse_fixed
from .index import InvertedIndex, build_index, save_index
from .log import Logger as log
from .retrieval import Query, RankedList, search_all
from .tuning import grid_search_alpha, grid_search_fb_docs, grid_search_tau, kfold_split

DECISION_METHODS = (METHOD_QPP, METHOD_TD2F, METHOD_LR, METHOD_DEEP)
# methods whose theta is a graded confidence, worth fusing with
CONFIDENCE_METHODS = (METHOD_QPP, METHOD_LR, METHOD_DEEP)

Decider = Callable[[str, object], DecisionOutcome]


@dataclass
class PipelineResult:
  workdir: Path
  reports: dict[str, EvalReport] = field(default_factory=dict)
  contingency: dict[str, ContingencyReport] = field(default_factory=dict)
  decisions: dict[str, dict[str, DecisionOutcome]] = field(default_factory=dict)
  query_ids: list[str] = field(default_factory=list)
  # decisions on the external run, when one was given
  transfer_decisions: dict[str, dict[str, DecisionOutcome]] = field(default_factory=dict)
  transfer_ids: list[str] = field(default_factory=list)
  # feedback depth each query was expanded with
  fb_docs: dict[str, int] = field(default_factory=dict)

  def summary(self) -> str:
    return format_report(self.reports)


def _constant_decider(method: str, y: int) -> Decider:
  def decide(query_id: str, _signal: object) -> DecisionOutcome:
    return DecisionOutcome(query_id, float(y), bool(y), method)
  return decide


def fold_td2f_threshold(train_scores: Sequence[float], quantile: float) -> float:
  """TD2F threshold of a training fold.

  A fold with too few scores to calibrate on lets every query through
  (the largest training score)."""
  if len(train_scores) < TD2F_MIN_SCORES:
    log.warning("td2f: {} training scores, fewer than {}; feedback applied throughout",
      len(train_scores), TD2F_MIN_SCORES)
    return max(train_scores, default=math.inf)
  return calibrate_td2f_threshold(train_scores, quantile)


def fold_lr_decider(
    examples: Sequence[tuple[FeatureVector, int]],
    config: DecisionConfig) -> Decider:
  try:
    model = train_logistic(examples, config)
  except DegenerateLabelsError:
    y = examples[0][1]
    log.warning("lr-srf: single-class training fold, every query gets label {}", y)
    return _constant_decider(METHOD_LR, y)
  return lambda query_id, features: decide_lr(model, features, query_id)


def fold_deep_decider(instances: Sequence[TrainingInstance], config: DeepConfig) -> Decider:
  try:
    params = train_decider(instances, config)
  except DegenerateLabelsError:
    y = instances[0].y
    log.warning("deep-srf: single-class training fold, every query gets label {}", y)
    return _constant_decider(METHOD_DEEP, y)
  return lambda query_id, x: forward_infer(x.query, x.pre_docs, params, query_id)


def _post_signals(
    by_id: Mapping[str, Query],
    pre_runs: Mapping[str, RankedList],
    post_runs: Mapping[str, RankedList],
    expanded: Mapping[str, ExpandedQuery],
    index: InvertedIndex,
    top_n: int) -> "tuple[dict[str, float], dict[str, FeatureVector]]":
  td2f = {
    qid: td2f_divergence(pre_runs[qid], post, index, top_n) for qid, post in post_runs.items()
  }
  features = {
    qid: extract_lr_features(by_id[qid], pre_runs[qid], expanded[qid], post, index, top_n)
    for qid, post in post_runs.items()
  }
  return td2f, features


@dataclass
class _FoldDecisions:
  decisions: dict[str, dict[str, DecisionOutcome]]
  r2f2: dict[str, RankedList]
  transfer: dict[str, dict[str, DecisionOutcome]]
  transfer_r2f2: dict[str, RankedList]


def _cross_fold_decisions(
    queries: Sequence[Query],
    pre_runs: Mapping[str, RankedList],
    post_runs: Mapping[str, RankedList],
    expanded: Mapping[str, ExpandedQuery],
    labels: Mapping,
    index: InvertedIndex,
    qrels: Qrels,
    config: SrfConfig,
    splits: Sequence[Sequence[str]],
    external: Mapping[str, RankedList] | None = None) -> _FoldDecisions:
  """Train every decider on the other folds and decide the held-out queries.

  Deciders trained on the RM3 lists are also applied to ``external``: the
  signals that read the post-feedback list (TD2F, the LR features) are
  recomputed on it and the R2F2 weight is tuned on it."""
  top_n = config.decision.top_n
  by_id = {q.query_id: q for q in queries}
  external = external or {}
  with log.timed("features"):
    qpp = normalize_scores(qpp_scores(pre_runs, index, top_n))
    td2f, features = _post_signals(by_id, pre_runs, post_runs, expanded, index, top_n)
    ext_td2f, ext_features = _post_signals(by_id, pre_runs, external, expanded, index, top_n)
    instances = {
      qid: build_instance(by_id[qid], pre, expanded[qid], post_runs[qid], index.doc_tokens,
        config.deep.k, labels[qid].y)
      for qid, pre in pre_runs.items()
    }

  out = _FoldDecisions(
    {m: {} for m in DECISION_METHODS}, {}, {m: {} for m in DECISION_METHODS}, {})
  for i, held_out in enumerate(splits):
    train = [qid for j, part in enumerate(splits) if j != i for qid in part]
    with log.timed(f"fold {i + 1}/{len(splits)}"):
      train_pre = {qid: pre_runs[qid] for qid in train}
      train_post = {qid: post_runs[qid] for qid in train}
      tau, _ = grid_search_tau(qpp, train_pre, train_post, qrels)
      td2f_tau = fold_td2f_threshold([td2f[q] for q in train], config.decision.td2f_quantile)
      alpha, _ = grid_search_alpha(train_pre, train_post, qrels, config=config.fusion)
      lr = fold_lr_decider([(features[q], labels[q].y) for q in train], config.decision)
      deep = fold_deep_decider([instances[q] for q in train], config.deep)
      for qid in held_out:
        out.decisions[METHOD_QPP][qid] = decide_qpp_srf(qpp[qid], tau, qid)
        out.decisions[METHOD_TD2F][qid] = decide_td2f(td2f[qid], td2f_tau, qid)
        out.decisions[METHOD_LR][qid] = lr(qid, features[qid])
        out.decisions[METHOD_DEEP][qid] = deep(qid, instances[qid])
        out.r2f2[qid] = fuse_fixed(pre_runs[qid], post_runs[qid], alpha, config.fusion)
      log.debug("fold {}: tau {}, td2f tau {:.6f}, alpha {}", i + 1, tau, td2f_tau, alpha)
      if not external:
        continue

      ext_train = [qid for qid in train if qid in external]
      ext_tau = fold_td2f_threshold([ext_td2f[q] for q in ext_train],
        config.decision.td2f_quantile)
      ext_alpha, _ = grid_search_alpha({q: pre_runs[q] for q in ext_train},
        {q: external[q] for q in ext_train}, qrels, config=config.fusion)
      for qid in held_out:
        if qid not in external:
          continue
        # QPP-SRF and Deep-SRF only read the query and the initial list
        out.transfer[METHOD_QPP][qid] = out.decisions[METHOD_QPP][qid]
        out.transfer[METHOD_DEEP][qid] = out.decisions[METHOD_DEEP][qid]
        out.transfer[METHOD_TD2F][qid] = decide_td2f(ext_td2f[qid], ext_tau, qid)
        out.transfer[METHOD_LR][qid] = lr(qid, ext_features[qid])
        out.transfer_r2f2[qid] = fuse_fixed(pre_runs[qid], external[qid], ext_alpha, config.fusion)
      log.debug("fold {} transfer: td2f tau {:.6f}, alpha {}", i + 1, ext_tau, ext_alpha)
  return out


def _expand_tuned(
    queries: Sequence[Query],
    pre_runs: Mapping[str, RankedList],
    index: InvertedIndex,
    qrels: Qrels,
    config: SrfConfig,
    splits: Sequence[Sequence[str]],
    grid: Sequence[int],
) -> "tuple[dict[str, ExpandedQuery], dict[str, RankedList], dict[str, int]]":
  """Expand every fold with the feedback depth tuned on the other folds."""
  by_id = {q.query_id: q for q in queries}
  expanded: dict[str, ExpandedQuery] = {}
  post_runs: dict[str, RankedList] = {}
  chosen: dict[str, int] = {}
  for i, held_out in enumerate(splits):
    train = [by_id[qid] for j, part in enumerate(splits) if j != i for qid in part]
    fb_docs, _ = grid_search_fb_docs(train, index, qrels, config.feedback, config.retrieval,
      grid=grid, initial_runs={q.query_id: pre_runs[q.query_id] for q in train})
    settings = replace(config.feedback, fb_docs=fb_docs)
    fold_expanded, fold_post = expand_all(
      [by_id[qid] for qid in held_out], pre_runs, index, settings, config.retrieval)
    expanded.update(fold_expanded)
    post_runs.update(fold_post)
    chosen.update(dict.fromkeys(held_out, fb_docs))
    log.info("fold {}/{}: feedback depth {}", i + 1, len(splits), fb_docs)
  # keep query order
  order = [q.query_id for q in queries]
  return ({qid: expanded[qid] for qid in order}, {qid: post_runs[qid] for qid in order},
    {qid: chosen[qid] for qid in order})


def _bits(decisions: Mapping[str, DecisionOutcome]) -> dict[str, bool]:
  return {qid: d.apply_prf for qid, d in decisions.items()}


def run_pipeline(
    corpus: Iterable[tuple[str, str]],
    queries: Sequence[Query],
    qrels: Qrels,
    config: SrfConfig | None = None,
    workdir: Path = Path("srf-out"),
    folds: int = 5,
    seed: int = 0,
    external_runs: Mapping[str, RankedList] | None = None,
    fb_docs_grid: Sequence[int] | None = None) -> PipelineResult:
  """Index, retrieve, expand, label, train, decide, fuse and evaluate.

  Every artifact is written under ``workdir``. With ``fb_docs_grid`` the
  feedback depth is tuned on the training folds instead of taken from the
  configuration. When ``external_runs`` holds post-feedback lists of another
  feedback model, the deciders trained on RM3 lists are also applied to them
  (the ``external``, ``oracle-external``, ``r2f2-transfer`` and
  ``<method>-transfer`` rows, evaluated over the queries the external run
  covers)."""
  config = config or SrfConfig()
  workdir = Path(workdir)
  workdir.mkdir(parents=True, exist_ok=True)
  result = PipelineResult(workdir)

  with log.timed("index"):
    index = build_index(corpus, config.tokenizer)
    save_index(index, workdir / "index.srfx")

  with log.timed("search"):
    judged = [q for q in queries if q.query_id in qrels and q.terms]
    if len(judged) < len(queries):
      log.warning("{} queries without judgments or terms are skipped", len(queries) - len(judged))
    pre_runs = search_all(judged, index, config.retrieval)
    active = [q for q in judged if len(pre_runs[q.query_id]) > 0]
    if len(active) < len(judged):
      log.warning("{} queries retrieved nothing and are skipped", len(judged) - len(active))
    if not active:
      raise ValidationError("no query retrieved any document")
    pre_runs = {q.query_id: pre_runs[q.query_id] for q in active}
    write_trec_run(workdir / "pre.run", pre_runs, config.retrieval.model)
  query_ids = list(pre_runs)
  result.query_ids = query_ids
  splits = kfold_split(query_ids, folds, seed)

  with log.timed("expand"):
    if fb_docs_grid is not None:
      expanded, post_runs, result.fb_docs = _expand_tuned(
        active, pre_runs, index, qrels, config, splits, fb_docs_grid)
    else:
      expanded, post_runs = expand_all(active, pre_runs, index, config.feedback, config.retrieval)
      result.fb_docs = dict.fromkeys(query_ids, config.feedback.fb_docs)
    write_expanded_queries(workdir / "expanded.tsv", expanded)
    write_trec_run(workdir / "post.run", post_runs, "rm3")

  labels = label_all(pre_runs, post_runs, qrels)
  write_labels(workdir / "labels.tsv", labels)
  y = {qid: lb.y for qid, lb in labels.items()}

  external: dict[str, RankedList] = {}
  if external_runs is not None:
    external = {qid: external_runs[qid] for qid in query_ids
      if qid in external_runs and len(external_runs[qid]) > 0}
    if len(external) < len(query_ids):
      log.warning("external run covers {} of {} queries", len(external), len(query_ids))
    if not external:
      raise ValidationError("external run shares no query with the collection")
  result.transfer_ids = list(external)

  folded = _cross_fold_decisions(
    active, pre_runs, post_runs, expanded, labels, index, qrels, config, splits, external)
  result.decisions = folded.decisions
  for method, method_decisions in folded.decisions.items():
    write_decisions(workdir / f"decisions-{method}.tsv", method_decisions)

  with log.timed("fuse"):
    oracle, _ = oracle_run(pre_runs, post_runs, qrels)
    runs: dict[str, tuple[dict[str, RankedList], dict[str, bool] | None]] = {
      "no-prf": (pre_runs, None),
      "rm3": (post_runs, None),
      "r2f2": (folded.r2f2, None),
      "oracle": (oracle, {qid: oracle[qid] is post_runs[qid] for qid in query_ids}),
    }
    for method in DECISION_METHODS:
      decisions = folded.decisions[method]
      runs[method] = (fuse_all(pre_runs, post_runs, decisions, "hard", config.fusion),
        _bits(decisions))
      if method in CONFIDENCE_METHODS:
        runs[f"{method}-fused"] = (
          fuse_all(pre_runs, post_runs, decisions, "confidence", config.fusion), None)

    transfer: dict[str, tuple[dict[str, RankedList], dict[str, bool] | None]] = {}
    if external:
      result.transfer_decisions = folded.transfer
      ext_pre = {qid: pre_runs[qid] for qid in external}
      ext_oracle, _ = oracle_run(ext_pre, external, qrels)
      transfer["external"] = (external, None)
      transfer["oracle-external"] = (
        ext_oracle, {qid: ext_oracle[qid] is external[qid] for qid in external})
      transfer["r2f2-transfer"] = (folded.transfer_r2f2, None)
      for method in DECISION_METHODS:
        decisions = folded.transfer[method]
        write_decisions(workdir / f"decisions-{method}-transfer.tsv", decisions)
        transfer[f"{method}-transfer"] = (
          fuse_all(ext_pre, external, decisions, "hard", config.fusion), _bits(decisions))
        if method in CONFIDENCE_METHODS:
          transfer[f"{method}-transfer-fused"] = (
            fuse_all(ext_pre, external, decisions, "confidence", config.fusion), None)
    for name, (method_runs, _) in [*runs.items(), *transfer.items()]:
      write_trec_run(workdir / "runs" / f"{name}.run", method_runs, name)

  with log.timed("evaluate"):
    for name, (method_runs, bits) in runs.items():
      result.reports[name] = evaluate(method_runs, qrels,
        decisions=bits, labels=y if bits is not None else None, query_ids=query_ids, name=name)
    if transfer:
      ext_y = {qid: lb.y for qid, lb in label_all(ext_pre, external, qrels).items()}
      for name, (method_runs, bits) in transfer.items():
        result.reports[name] = evaluate(method_runs, qrels, decisions=bits,
          labels=ext_y if bits is not None else None, query_ids=list(external), name=name)
    deltas = per_query_delta_ap(pre_runs, post_runs, qrels)
    for method in DECISION_METHODS:
      table = contingency_report(_bits(folded.decisions[method]), y, deltas)
      result.contingency[method] = table
      (workdir / f"contingency-{method}.txt").write_text(format_contingency(table) + "\n")

  (workdir / "summary.txt").write_text(result.summary() + "\n")
  (workdir / "summary.tsv").write_text(format_report_tsv(result.reports))
  log.info("pipeline done: {} queries, results in {}", len(query_ids), workdir)
  return result
