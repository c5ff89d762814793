from pathlib import Path

import pytest

from selprf.core.config import DecisionConfig, DeepConfig, FusionConfig, RetrievalConfig, SrfConfig
from selprf.core.decision import (
  METHOD_DEEP,
  METHOD_LR,
  FeatureVector,
  calibrate_td2f_threshold,
  read_decisions,
  read_labels,
)
from selprf.core.deep import TrainingInstance
from selprf.core.formats import read_corpus, read_qrels, read_queries, read_trec_run
from selprf.core.pipeline import (
  CONFIDENCE_METHODS,
  DECISION_METHODS,
  fold_deep_decider,
  fold_lr_decider,
  fold_td2f_threshold,
  run_pipeline,
)
from selprf.core.retrieval import Query
from selprf.core.toy import (
  ANCHOR_EVERY,
  ToyCollection,
  generate_toy_collection,
  write_toy_collection,
)
def small_config() -> SrfConfig:
  return SrfConfig(
    retrieval=RetrievalConfig(depth=100),
    deep=DeepConfig(embedding_dim=4, pair_dim=6, hidden_dim=5, k=3, epochs=3),
    fusion=FusionConfig(depth=100))


def toy_queries(collection: ToyCollection) -> list[Query]:
  return [Query.from_text(qid, text) for qid, text in collection.queries]


def test_toy_collection_is_deterministic():
  a = generate_toy_collection(seed=4)
  b = generate_toy_collection(seed=4)
  c = generate_toy_collection(seed=5)
  assert a.corpus == b.corpus
  assert a.queries == b.queries
  assert a.corpus != c.corpus


def test_toy_collection_shape():
  toy = generate_toy_collection()
  assert len(toy.corpus) == 500
  assert len(toy.queries) == 60
  assert len({doc_id for doc_id, _ in toy.corpus}) == 500
  for qid, text in toy.queries:
    assert text
    assert qid in toy.qrels
    assert toy.qrels.relevant(qid)
  grades = {g for qid, _ in toy.queries for g in toy.qrels.grades(qid).values()}
  assert grades <= {0, 1, 2}


def test_toy_collection_written(tmp_path):
  toy = generate_toy_collection(n_docs=40, n_queries=6, n_topics=3)
  paths = write_toy_collection(toy, tmp_path / "toy")
  assert list(read_corpus(paths["corpus"])) == toy.corpus
  assert [q.query_id for q in read_queries(paths["queries"])] == [qid for qid, _ in toy.queries]
  qrels = read_qrels(paths["qrels"])
  assert len(qrels) == len(toy.qrels)
  for qid, _ in toy.queries:
    assert qrels.grades(qid) == toy.qrels.grades(qid)


def test_pipeline_on_toy_collection(tmp_path):
  toy = generate_toy_collection()
  workdir = tmp_path / "out"
  result = run_pipeline(toy.corpus, toy_queries(toy), toy.qrels, small_config(), workdir, folds=3)

  for name in ("index.srfx", "pre.run", "post.run", "expanded.tsv", "labels.tsv",
      "summary.txt", "summary.tsv"):
    assert (workdir / name).is_file(), name
  for method in DECISION_METHODS:
    assert (workdir / f"decisions-{method}.tsv").is_file()
    assert (workdir / f"contingency-{method}.txt").is_file()

  ids = set(result.query_ids)
  assert ids == {qid for qid, _ in toy.queries}
  for method in DECISION_METHODS:
    assert set(result.decisions[method]) == ids
    assert set(read_decisions(workdir / f"decisions-{method}.tsv")) == ids
    assert result.contingency[method].total == len(ids)
  assert set(read_labels(workdir / "labels.tsv")) == ids

  expected = {"no-prf", "rm3", "r2f2", "oracle", *DECISION_METHODS}
  assert expected <= set(result.reports)
  for name in result.reports:
    assert set(read_trec_run(workdir / "runs" / f"{name}.run")) <= ids

  reports = result.reports
  assert reports["oracle"].map >= reports["no-prf"].map - 1e-12
  assert reports["oracle"].map >= reports["rm3"].map - 1e-12
  assert reports["oracle"].accuracy == 1.0
  for method in DECISION_METHODS:
    assert 0 <= reports[method].accuracy <= 1
    assert reports[method].map <= reports["oracle"].map + 1e-12
  assert reports["no-prf"].accuracy is None

  summary = (workdir / "summary.txt").read_text()
  assert "oracle" in summary and "MAP" in summary
  assert len((workdir / "summary.tsv").read_text().splitlines()) == len(reports) + 1


def test_pipeline_transfers_to_external_runs(tmp_path):
  toy = generate_toy_collection(seed=1)
  queries = toy_queries(toy)
  first = run_pipeline(toy.corpus, queries, toy.qrels, small_config(), tmp_path / "a", folds=3)
  external = read_trec_run(tmp_path / "a" / "post.run")

  second = run_pipeline(toy.corpus, queries, toy.qrels, small_config(), tmp_path / "b",
    folds=3, external_runs=external)
  reports = second.reports
  rows = {"external", "oracle-external", "r2f2-transfer",
    *(f"{m}-transfer" for m in DECISION_METHODS),
    *(f"{m}-transfer-fused" for m in CONFIDENCE_METHODS)}
  assert rows <= set(reports)
  for name in rows:
    assert (tmp_path / "b" / "runs" / f"{name}.run").is_file(), name
  assert set(second.transfer_ids) == set(second.query_ids)

  # the external lists are the RM3 lists: every transfer row repeats its RM3 counterpart
  assert reports["external"].map == pytest.approx(first.reports["rm3"].map, abs=1e-9)
  assert reports["oracle-external"].map == pytest.approx(reports["oracle"].map, abs=1e-9)
  assert reports["oracle-external"].accuracy == 1.0
  assert reports["r2f2-transfer"].map == pytest.approx(reports["r2f2"].map, abs=1e-9)
  for method in DECISION_METHODS:
    assert second.transfer_decisions[method] == second.decisions[method]
    assert reports[f"{method}-transfer"].map == pytest.approx(reports[method].map, abs=1e-9)
    assert reports[f"{method}-transfer"].accuracy == reports[method].accuracy
    transfer = read_decisions(tmp_path / "b" / f"decisions-{method}-transfer.tsv")
    assert set(transfer) == set(second.query_ids)


def test_pipeline_transfers_to_partial_external_runs(tmp_path):
  toy = generate_toy_collection(seed=1)
  queries = toy_queries(toy)
  run_pipeline(toy.corpus, queries, toy.qrels, small_config(), tmp_path / "a", folds=3)
  external = read_trec_run(tmp_path / "a" / "post.run")
  dropped = sorted(external)[:5]
  for qid in dropped:
    del external[qid]

  result = run_pipeline(toy.corpus, queries, toy.qrels, small_config(), tmp_path / "b",
    folds=3, external_runs=external)
  assert set(result.transfer_ids) == set(result.query_ids) - set(dropped)
  assert set(result.reports["external"].per_query_ap) == set(result.transfer_ids)
  for method in DECISION_METHODS:
    assert set(result.transfer_decisions[method]) == set(result.transfer_ids)
    assert set(result.decisions[method]) == set(result.query_ids)

def test_pipeline_is_reproducible(tmp_path):
  toy = generate_toy_collection(seed=2, n_docs=200, n_queries=50, n_topics=5)
  queries = toy_queries(toy)
  a = run_pipeline(toy.corpus, queries, toy.qrels, small_config(), tmp_path / "a", folds=2)
  b = run_pipeline(toy.corpus, queries, toy.qrels, small_config(), tmp_path / "b", folds=2)
  assert Path(tmp_path / "a" / "summary.tsv").read_text() == \
    Path(tmp_path / "b" / "summary.tsv").read_text()
  assert a.decisions == b.decisions


def test_toy_anchor_queries_cannot_gain():
  toy = generate_toy_collection(n_docs=120, n_queries=12, n_topics=4)
  for qid, text in toy.queries:
    if int(qid[1:]) % ANCHOR_EVERY == ANCHOR_EVERY - 1:
      anchor = text.split()[0]
      relevant = toy.qrels.relevant(qid)
      assert 1 <= len(relevant) <= 4
      for doc_id, doc in toy.corpus:
        assert (doc.split().count(anchor) == 2) == (doc_id in relevant)


def test_pipeline_with_default_config(tmp_path):
  toy = generate_toy_collection()
  result = run_pipeline(toy.corpus, toy_queries(toy), toy.qrels, SrfConfig(), tmp_path)
  labels = read_labels(tmp_path / "labels.tsv")
  assert {label.y for label in labels.values()} == {0, 1}
  for qid, label in labels.items():
    if int(qid[1:]) % ANCHOR_EVERY == ANCHOR_EVERY - 1:
      # the initial ranking is already perfect
      assert label.ap_pre == 1.0
      assert label.y == 0
  assert set(result.fb_docs.values()) == {10}
  for method in DECISION_METHODS:
    assert set(result.decisions[method]) == set(result.query_ids)
    assert 0 <= result.reports[method].accuracy <= 1
  assert result.reports["oracle"].map >= result.reports["rm3"].map - 1e-12


def test_pipeline_survives_small_folds(tmp_path):
  # 5 folds of 20 queries leave 16 training queries, too few to calibrate TD2F
  toy = generate_toy_collection(seed=3, n_docs=120, n_queries=20, n_topics=4)
  result = run_pipeline(toy.corpus, toy_queries(toy), toy.qrels, small_config(), tmp_path,
    folds=5)
  for method in DECISION_METHODS:
    assert set(result.decisions[method]) == set(result.query_ids)
  assert (tmp_path / "summary.tsv").is_file()


def test_pipeline_tunes_feedback_depth(tmp_path):
  toy = generate_toy_collection(seed=5, n_docs=200, n_queries=30, n_topics=5)
  result = run_pipeline(toy.corpus, toy_queries(toy), toy.qrels, small_config(), tmp_path,
    folds=3, fb_docs_grid=(5, 10))
  assert set(result.fb_docs) == set(result.query_ids)
  assert set(result.fb_docs.values()) <= {5, 10}
  assert set(read_trec_run(tmp_path / "post.run")) == set(result.query_ids)


def test_fold_td2f_threshold():
  scores = [0.1 * i for i in range(25)]
  assert fold_td2f_threshold(scores, 0.95) == calibrate_td2f_threshold(scores, 0.95)
  assert fold_td2f_threshold([0.3, 0.9, 0.1], 0.5) == 0.9


def test_fold_deciders_fall_back_on_single_class():
  features = FeatureVector(1.0, 0.5, 0.1, 1.0)
  lr = fold_lr_decider([(features, 1), (features, 1), (features, 1)], DecisionConfig())
  decision = lr("q1", features)
  assert (decision.theta, decision.apply_prf, decision.method) == (1.0, True, METHOD_LR)

  x = TrainingInstance(("a",), [("b",)], ("a",), [("c",)], 0)
  deep = fold_deep_decider([x, x], DeepConfig(k=1, epochs=1))
  decision = deep("q2", x)
  assert (decision.theta, decision.apply_prf, decision.method) == (0.0, False, METHOD_DEEP)
  assert decision.query_id == "q2"

  mixed = fold_lr_decider([(features, 1), (FeatureVector(2.0, 0.1, 0.2, 0.5), 0)],
    DecisionConfig(epochs=10))
  assert 0 < mixed("q3", features).theta < 1
