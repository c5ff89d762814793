from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .config import TokenizerConfig
from .errors import DuplicateError, ParseError, ValidationError
from .evaluation import Qrels
from .log import Logger as log
from .retrieval import Query, RankedList

###############################################################################
# Corpus and query TSV files
###############################################################################
def read_corpus(path: Path) -> Iterator[tuple[str, str]]:
  """Stream (doc_id, text) pairs from a `doc_id<TAB>text` file."""
  path = Path(path)
  with path.open("r", encoding="utf-8") as f:
    for line_no, line in enumerate(f, start=1):
      line = line.rstrip("\r\n")
      if not line.strip():
        continue
      doc_id, sep, text = line.partition("\t")
      if not sep or not doc_id:
        raise ParseError("expected doc_id<TAB>text", path, line_no)
      yield doc_id, text


def write_corpus(path: Path, docs: Iterable[tuple[str, str]]) -> None:
  path = Path(path)
  path.parent.mkdir(parents=True, exist_ok=True)
  with path.open("w", encoding="utf-8") as f:
    for doc_id, text in docs:
      f.write(f"{doc_id}\t{text}\n")


def read_query_texts(path: Path) -> dict[str, str]:
  path = Path(path)
  texts = {}
  with path.open("r", encoding="utf-8") as f:
    for line_no, line in enumerate(f, start=1):
      line = line.rstrip("\r\n")
      if not line.strip():
        continue
      qid, sep, text = line.partition("\t")
      if not sep or not qid:
        raise ParseError("expected query_id<TAB>query text", path, line_no)
      if qid in texts:
        raise DuplicateError("duplicate query id", f"{path}:{line_no}", qid)
      texts[qid] = text
  return texts


def read_queries(path: Path, tokenizer: TokenizerConfig | None = None) -> list[Query]:
  queries = [
    Query.from_text(qid, text, tokenizer)
    for qid, text in read_query_texts(path).items()
  ]
  empty = [q.query_id for q in queries if not q.terms]
  if empty:
    log.warning("{} queries have no terms after tokenization: {}", len(empty), empty)
  log.activity("loaded {} queries: {}", len(queries), path)
  return queries


def write_queries(path: Path, queries: Iterable[tuple[str, str]]) -> None:
  write_corpus(path, queries)


###############################################################################
# TREC run files: `query_id Q0 doc_id rank score tag`
###############################################################################
def format_run_line(query_id: str, doc_id: str, rank: int, score: float, tag: str) -> str:
  return f"{query_id} Q0 {doc_id} {rank} {score:.6f} {tag}"


def write_trec_run(path: Path, runs: Mapping[str, RankedList], tag: str) -> None:
  if not tag or any(c.isspace() for c in tag):
    raise ValidationError("run tag must be a non-empty word", tag)
  path = Path(path)
  path.parent.mkdir(parents=True, exist_ok=True)
  with path.open("w", encoding="utf-8") as f:
    for qid, ranked in runs.items():
      for rank, (doc_id, score) in enumerate(ranked, start=1):
        f.write(format_run_line(qid, doc_id, rank, score, tag))
        f.write("\n")
  log.activity("wrote run '{}' for {} queries: {}", tag, len(runs), path)


def read_trec_run(path: Path, depth: int | None = None) -> dict[str, RankedList]:
  """Parse a TREC run; lists are ordered by the rank field and truncated to ``depth``."""
  path = Path(path)
  by_query: dict[str, dict[str, tuple[int, float, int]]] = {}
  with path.open("r", encoding="utf-8") as f:
    for line_no, line in enumerate(f, start=1):
      if not line.strip():
        continue
      fields = line.split()
      if len(fields) != 6:
        raise ParseError(f"expected 6 fields, found {len(fields)}", path, line_no)
      qid, _, doc_id, rank, score, _ = fields
      try:
        rank = int(rank)
        score = float(score)
      except ValueError:
        raise ParseError("rank must be an integer and score a number", path, line_no)
      if rank < 1:
        raise ParseError(f"rank must be >= 1, found {rank}", path, line_no)
      entries = by_query.setdefault(qid, {})
      if doc_id in entries:
        raise DuplicateError("duplicate run entry", f"{path}:{line_no}", qid, doc_id)
      entries[doc_id] = (rank, score, line_no)

  if not by_query:
    log.warning("empty run file: {}", path)
    return {}

  runs = {}
  for qid, entries in by_query.items():
    ordered = sorted(entries.items(), key=lambda kv: kv[1][0])
    ranks = [r for _, (r, _, _) in ordered]
    for prev, (doc_id, (rank, _, line_no)) in zip(ranks, ordered[1:]):
      if rank == prev:
        raise ParseError(f"rank {rank} assigned twice for query {qid}", path, line_no)
    if ranks != list(range(1, len(ranks) + 1)):
      log.warning("[{}] rank gaps in {}, ranks re-densified", qid, path)
    if depth is not None:
      ordered = ordered[:depth]
    ranked = RankedList(qid, ((d, s) for d, (_, s, _) in ordered), k=depth or len(ordered))
    if not ranked.is_sorted():
      log.warning("[{}] scores increase with rank in {}, keeping rank order", qid, path)
    runs[qid] = ranked
  log.activity("loaded run for {} queries: {}", len(runs), path)
  return runs


###############################################################################
# TREC qrels: `query_id 0 doc_id grade`
###############################################################################
def read_qrels(path: Path) -> Qrels:
  path = Path(path)
  judgments: dict[tuple[str, str], int] = {}
  with path.open("r", encoding="utf-8") as f:
    for line_no, line in enumerate(f, start=1):
      if not line.strip():
        continue
      fields = line.split()
      if len(fields) != 4:
        raise ParseError(f"expected 4 fields, found {len(fields)}", path, line_no)
      qid, _, doc_id, grade = fields
      try:
        grade = int(grade)
      except ValueError:
        raise ParseError(f"non-integer grade '{grade}'", path, line_no)
      if grade < 0:
        raise ParseError(f"negative grade {grade}", path, line_no)
      if (qid, doc_id) in judgments:
        raise DuplicateError("duplicate qrels entry", f"{path}:{line_no}", qid, doc_id)
      judgments[(qid, doc_id)] = grade
  qrels = Qrels(judgments)
  log.activity("loaded qrels for {} queries: {}", len(qrels.query_ids), path)
  return qrels


def write_qrels(path: Path, qrels: Qrels) -> None:
  path = Path(path)
  path.parent.mkdir(parents=True, exist_ok=True)
  with path.open("w", encoding="utf-8") as f:
    for qid in qrels.query_ids:
      for doc_id, grade in qrels.grades(qid).items():
        f.write(f"{qid} 0 {doc_id} {grade}\n")
