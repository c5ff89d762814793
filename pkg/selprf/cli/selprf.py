import argparse
import sys
from pathlib import Path

from selprf.core import log as log_output
from selprf.core.config import SrfConfig, TokenizerConfig, load_config
from selprf.core.decision import (
  calibrate_td2f_threshold,
  decide_lr,
  decide_qpp_srf,
  decide_td2f,
  extract_lr_features,
  label_all,
  load_logistic,
  normalize_scores,
  qpp_scores,
  read_decisions,
  read_labels,
  save_logistic,
  td2f_divergence,
  train_logistic,
  write_decisions,
  write_labels,
)
from selprf.core.deep import (
  build_instance,
  forward_infer,
  load_decider,
  pad_documents,
  save_decider,
  train_decider,
)
from selprf.core.errors import MissingDataError, SrfError
from selprf.core.evaluation import (
  contingency_report,
  evaluate,
  format_contingency,
  format_report,
  oracle_run,
  per_query_delta_ap,
)
from selprf.core.feedback import expand_all, read_expanded_queries, write_expanded_queries
from selprf.core.formats import read_corpus, read_qrels, read_queries, read_trec_run, write_trec_run
from selprf.core.fusion import fuse_all
from selprf.core.index import build_index, load_index, save_index
from selprf.core.log import Logger as log
from selprf.core.pipeline import run_pipeline
from selprf.core.retrieval import Query, search_all
from selprf.core.toy import ToyCollection, generate_toy_collection, write_toy_collection
from selprf.core.tuning import FB_DOCS_GRID, cross_validate, grid_search_fb_docs


def _config(args) -> SrfConfig:
  config = load_config(args.config)
  if hasattr(args, "k1"):
    config = config.override("retrieval",
      model=args.model, k1=args.k1, b=args.b, mu=args.mu, depth=args.depth)
  if hasattr(args, "fb_docs"):
    config = config.override("feedback",
      fb_docs=args.fb_docs, fb_terms=args.fb_terms, lambda_=args.lambda_)
  if hasattr(args, "epochs"):
    config = config.override("deep",
      epochs=args.epochs, k=args.k, learning_rate=args.learning_rate, seed=args.seed)
  if hasattr(args, "aleph"):
    config = config.override("fusion", aleph=args.aleph, alpha=args.alpha, depth=args.fusion_depth)
  return config


def _queries(path: Path, tokenizer: TokenizerConfig) -> list[Query]:
  return [q for q in read_queries(path, tokenizer) if q.terms]


def _runs(path: Path, config: SrfConfig):
  return read_trec_run(path, depth=config.retrieval.depth)


def _expanded(args, queries, pre_runs, index, config):
  if args.expanded is not None:
    return read_expanded_queries(args.expanded)
  expanded, _ = expand_all(queries, pre_runs, index, config.feedback, config.retrieval)
  return expanded


def _aligned(queries: list[Query], *maps) -> list[Query]:
  kept = [q for q in queries if all(q.query_id in m for m in maps)]
  if len(kept) < len(queries):
    log.warning("{} queries lack a run, label or expansion and are skipped",
      len(queries) - len(kept))
  if not kept:
    raise MissingDataError("no query has all the required inputs")
  return kept


def srf_index(args):
  config = _config(args)
  tokenizer = TokenizerConfig(
    lowercase=not args.no_lowercase,
    stopwords=args.stopwords or config.tokenizer.stopwords)
  with log.timed("index"):
    index = build_index(read_corpus(args.corpus), tokenizer)
    save_index(index, args.output)


def srf_search(args):
  config = _config(args)
  index = load_index(args.index)
  queries = _queries(args.queries, index.tokenizer)
  runs = search_all(queries, index, config.retrieval)
  write_trec_run(args.output, runs, args.tag or config.retrieval.model)


def srf_expand(args):
  config = _config(args)
  index = load_index(args.index)
  queries = _queries(args.queries, index.tokenizer)
  pre_runs = _runs(args.run, config)
  expanded, post_runs = expand_all(queries, pre_runs, index, config.feedback, config.retrieval)
  write_trec_run(args.output, post_runs, args.tag)
  if args.expanded_output is not None:
    write_expanded_queries(args.expanded_output, expanded)


def srf_label(args):
  config = _config(args)
  pre_runs = _runs(args.pre, config)
  post_runs = _runs(args.post, config)
  labels = label_all(pre_runs, post_runs, read_qrels(args.qrels))
  write_labels(args.output, labels)


def srf_train(args):
  config = _config(args)
  index = load_index(args.index)
  pre_runs = _runs(args.pre, config)
  post_runs = _runs(args.post, config)
  labels = read_labels(args.labels)
  queries = _aligned(_queries(args.queries, index.tokenizer), pre_runs, post_runs, labels)
  expanded = _expanded(args, queries, pre_runs, index, config)
  queries = _aligned(queries, expanded)
  if args.method == "lr":
    examples = [
      (extract_lr_features(q, pre_runs[q.query_id], expanded[q.query_id], post_runs[q.query_id],
        index, config.decision.top_n), labels[q.query_id].y)
      for q in queries
    ]
    save_logistic(train_logistic(examples, config.decision), args.output)
  else:
    instances = [
      build_instance(q, pre_runs[q.query_id], expanded[q.query_id], post_runs[q.query_id],
        index.doc_tokens, config.deep.k, labels[q.query_id].y)
      for q in queries
    ]
    save_decider(train_decider(instances, config.deep), args.output)


def srf_decide(args):
  config = _config(args)
  index = load_index(args.index)
  top_n = config.decision.top_n
  pre_runs = _runs(args.pre, config)
  queries = _aligned(_queries(args.queries, index.tokenizer), pre_runs)
  needs_post = args.method in ("td2f", "lr")
  if needs_post and args.post is None:
    raise MissingDataError(f"--post is required by the {args.method} decider")
  post_runs = _runs(args.post, config) if args.post is not None else {}
  if needs_post:
    queries = _aligned(queries, post_runs)
  ids = [q.query_id for q in queries]

  if args.method == "qpp":
    tau = args.tau if args.tau is not None else config.decision.tau
    scores = normalize_scores(qpp_scores({qid: pre_runs[qid] for qid in ids}, index, top_n))
    decisions = {qid: decide_qpp_srf(scores[qid], tau, qid) for qid in ids}
  elif args.method == "td2f":
    scores = {qid: td2f_divergence(pre_runs[qid], post_runs[qid], index, top_n) for qid in ids}
    tau = args.tau
    if tau is None:
      tau = calibrate_td2f_threshold(list(scores.values()), config.decision.td2f_quantile)
      log.info("td2f threshold calibrated on {} queries: {}", len(scores), tau)
    decisions = {qid: decide_td2f(scores[qid], tau, qid) for qid in ids}
  elif args.method == "lr":
    if args.decider is None:
      raise MissingDataError("--decider is required by the lr decider")
    model = load_logistic(args.decider)
    expanded = _expanded(args, queries, pre_runs, index, config)
    decisions = {
      q.query_id: decide_lr(model, extract_lr_features(q, pre_runs[q.query_id],
        expanded[q.query_id], post_runs[q.query_id], index, top_n), q.query_id)
      for q in _aligned(queries, expanded)
    }
  else:
    if args.decider is None:
      raise MissingDataError("--decider is required by the deep decider")
    params = load_decider(args.decider)
    decisions = {
      q.query_id: forward_infer(q.terms,
        pad_documents(pre_runs[q.query_id], index.doc_tokens, params.k), params, q.query_id)
      for q in queries
    }
  applied = sum(1 for d in decisions.values() if d.apply_prf)
  log.info("{}: feedback applied to {}/{} queries", args.method, applied, len(decisions))
  write_decisions(args.output, decisions)


def srf_fuse(args):
  config = _config(args)
  pre_runs = _runs(args.pre, config)
  post_runs = _runs(args.post, config)
  decisions = read_decisions(args.decisions) if args.decisions is not None else None
  fused = fuse_all(pre_runs, post_runs, decisions, args.mode, config.fusion)
  write_trec_run(args.output, fused, args.tag)


def srf_eval(args):
  config = _config(args)
  qrels = read_qrels(args.qrels)
  reports = {}
  decisions = labels = None
  if args.decisions is not None and args.labels is not None:
    decisions = {qid: d.apply_prf for qid, d in read_decisions(args.decisions).items()}
    labels = {qid: lb.y for qid, lb in read_labels(args.labels).items()}
  for path in args.run:
    report = evaluate(_runs(path, config), qrels,
      decisions=decisions, labels=labels, name=path.stem)
    reports[path.stem] = report
    if args.per_query:
      for qid, ap in report.per_query_ap.items():
        print(f"{path.stem}\t{qid}\t{ap:.4f}\t{report.per_query_ndcg[qid]:.4f}")
  print(format_report(reports))


def srf_oracle(args):
  config = _config(args)
  pre_runs = _runs(args.pre, config)
  post_runs = _runs(args.post, config)
  runs, report = oracle_run(pre_runs, post_runs, read_qrels(args.qrels))
  if args.output is not None:
    write_trec_run(args.output, runs, "oracle")
  print(format_report({"oracle": report}))


def srf_report(args):
  config = _config(args)
  pre_runs = _runs(args.pre, config)
  post_runs = _runs(args.post, config)
  deltas = per_query_delta_ap(pre_runs, post_runs, read_qrels(args.qrels))
  decisions = {qid: d.apply_prf for qid, d in read_decisions(args.decisions).items()}
  labels = {qid: lb.y for qid, lb in read_labels(args.labels).items()}
  print(format_contingency(contingency_report(decisions, labels, deltas)))
  if args.delta_output is not None:
    args.delta_output.parent.mkdir(parents=True, exist_ok=True)
    args.delta_output.write_text("".join(
      f"{qid}\t{'nan' if delta is None else repr(delta)}\n" for qid, delta in deltas.items()))


def srf_toy(args):
  write_toy_collection(generate_toy_collection(args.seed), args.output)


def srf_tune(args):
  config = _config(args)
  index = load_index(args.index)
  qrels = read_qrels(args.qrels)
  pre_runs = _runs(args.pre, config)
  post_runs = _runs(args.post, config)
  queries = _aligned(_queries(args.queries, index.tokenizer), pre_runs, post_runs, qrels)
  ids = [q.query_id for q in queries]
  pre_runs = {qid: pre_runs[qid] for qid in ids}
  post_runs = {qid: post_runs[qid] for qid in ids}
  if args.fb_docs_grid is not None:
    fb_docs, best = grid_search_fb_docs(queries, index, qrels, config.feedback, config.retrieval,
      grid=args.fb_docs_grid or FB_DOCS_GRID, initial_runs=pre_runs)
    print(f"fb_docs\t{fb_docs}\t{best:.4f}")
  qpp = normalize_scores(qpp_scores(pre_runs, index, config.decision.top_n))
  report = cross_validate(pre_runs, post_runs, qrels, qpp, args.folds, args.seed, config.fusion)
  for method in report.methods:
    print(f"{method}\t{report.map(method):.4f}")
  print(f"alpha\t{' '.join(map(str, report.alphas))}")
  print(f"tau\t{' '.join(map(str, report.taus))}")


def srf_pipeline(args):
  config = _config(args)
  if args.toy:
    collection = generate_toy_collection(args.seed)
    corpus = collection.corpus
    queries = [Query.from_text(qid, text, config.tokenizer) for qid, text in collection.queries]
    qrels = collection.qrels
  else:
    missing = [f for f in ("corpus", "queries", "qrels") if getattr(args, f) is None]
    if missing:
      raise MissingDataError("missing inputs (or use --toy)", *(f"--{f}" for f in missing))
    corpus = read_corpus(args.corpus)
    queries = read_queries(args.queries, config.tokenizer)
    qrels = read_qrels(args.qrels)
  external = _runs(args.external_run, config) if args.external_run is not None else None
  result = run_pipeline(corpus, queries, qrels, config, args.output,
    folds=args.folds, seed=args.seed, external_runs=external,
    fb_docs_grid=None if args.fb_docs_grid is None else (args.fb_docs_grid or FB_DOCS_GRID))
  print(result.summary())


###############################################################################
# Parser
###############################################################################
def _path(parser, *flags, required=True, help=None, metavar="FILE"):
  parser.add_argument(*flags,
    metavar=metavar,
    help=help,
    type=Path,
    required=required,
    default=None)


def _retrieval_arguments(parser):
  parser.add_argument("--model",
    help="Retrieval model.",
    choices=["bm25", "lm"],
    default=None)
  parser.add_argument("--k1", help="BM25 term frequency saturation.", type=float, default=None)
  parser.add_argument("--b", help="BM25 length normalisation.", type=float, default=None)
  parser.add_argument("--mu", help="Dirichlet prior.", type=float, default=None)
  parser.add_argument("--depth", help="Ranked list depth.", type=int, default=None)


def _feedback_arguments(parser):
  parser.add_argument("--fb-docs", help="Feedback documents.", type=int, default=None)
  parser.add_argument("--fb-terms", help="Expansion terms.", type=int, default=None)
  parser.add_argument("--lambda",
    dest="lambda_",
    help="Weight of the original query in RM3.",
    type=float,
    default=None)


def _deep_arguments(parser):
  parser.add_argument("--epochs", help="Training epochs.", type=int, default=None)
  parser.add_argument("--k", help="Documents per branch.", type=int, default=None)
  parser.add_argument("--learning-rate", help="Gradient descent step.", type=float, default=None)
  parser.add_argument("--seed", help="Initialisation seed.", type=int, default=None)


def _fusion_arguments(parser):
  parser.add_argument("--aleph", help="Rank given to missing documents.", type=int, default=None)
  parser.add_argument("--alpha", help="Fixed fusion weight.", type=float, default=None)
  parser.add_argument("--fusion-depth", help="Fused list depth.", type=int, default=None)


def _parser_index(cmd):
  cmd.add_argument("corpus", metavar="CORPUS", help="Corpus TSV (doc_id<TAB>text).", type=Path)
  _path(cmd, "-o", "--output", help="Index file to write.")
  cmd.add_argument("--stopwords",
    help="Stopword list: 'none', 'default' or a file. Default: from configuration.",
    default=None)
  cmd.add_argument("--no-lowercase",
    help="Keep the original case of tokens.",
    action="store_true",
    default=False)


def _parser_search(cmd):
  _path(cmd, "-i", "--index", help="Index file.")
  _path(cmd, "-q", "--queries", help="Queries TSV (query_id<TAB>text).")
  _path(cmd, "-o", "--output", help="TREC run to write.")
  cmd.add_argument("--tag", help="Run tag. Default: the retrieval model.", default=None)
  _retrieval_arguments(cmd)


def _parser_expand(cmd):
  _path(cmd, "-i", "--index", help="Index file.")
  _path(cmd, "-q", "--queries", help="Queries TSV.")
  _path(cmd, "-r", "--run", help="Initial TREC run.")
  _path(cmd, "-o", "--output", help="Post-feedback TREC run to write.")
  _path(cmd, "-e", "--expanded-output", required=False, help="Expanded queries TSV to write.")
  cmd.add_argument("--tag", help="Run tag. Default: %(default)s.", default="rm3")
  _retrieval_arguments(cmd)
  _feedback_arguments(cmd)


def _parser_label(cmd):
  _path(cmd, "--pre", help="Pre-feedback TREC run.")
  _path(cmd, "--post", help="Post-feedback TREC run.")
  _path(cmd, "--qrels", help="TREC qrels.")
  _path(cmd, "-o", "--output", help="Labels TSV to write.")


def _parser_train(cmd):
  cmd.add_argument("-m", "--method",
    help="Decider to train.",
    choices=["lr", "deep"],
    required=True)
  _path(cmd, "-i", "--index", help="Index file.")
  _path(cmd, "-q", "--queries", help="Queries TSV.")
  _path(cmd, "--pre", help="Pre-feedback TREC run.")
  _path(cmd, "--post", help="Post-feedback TREC run.")
  _path(cmd, "--labels", help="Labels TSV.")
  _path(cmd, "-e", "--expanded", required=False,
    help="Expanded queries TSV. Default: recomputed with RM3.")
  _path(cmd, "-o", "--output", help="Model file to write.")
  _feedback_arguments(cmd)
  _deep_arguments(cmd)


def _parser_decide(cmd):
  cmd.add_argument("-m", "--method",
    help="Decision function.",
    choices=["qpp", "td2f", "lr", "deep"],
    required=True)
  _path(cmd, "-i", "--index", help="Index file.")
  _path(cmd, "-q", "--queries", help="Queries TSV.")
  _path(cmd, "--pre", help="Pre-feedback TREC run.")
  _path(cmd, "--post", required=False,
    help="Post-feedback TREC run of any feedback model (td2f, lr).")
  _path(cmd, "-e", "--expanded", required=False, help="Expanded queries TSV (lr).")
  _path(cmd, "--decider", required=False, help="Trained model file (lr, deep).")
  cmd.add_argument("--tau",
    help="Decision threshold (qpp, td2f). Default: configuration (qpp), calibrated (td2f).",
    type=float,
    default=None)
  _path(cmd, "-o", "--output", help="Decisions TSV to write.")
  _feedback_arguments(cmd)


def _parser_fuse(cmd):
  _path(cmd, "--pre", help="Pre-feedback TREC run.")
  _path(cmd, "--post", help="Post-feedback TREC run.")
  _path(cmd, "-d", "--decisions", required=False, help="Decisions TSV (hard, confidence).")
  cmd.add_argument("--mode",
    help="Combination of the two lists. Default: %(default)s.",
    choices=["hard", "fixed", "confidence"],
    default="confidence")
  cmd.add_argument("--tag", help="Run tag. Default: %(default)s.", default="srf-fused")
  _path(cmd, "-o", "--output", help="Fused TREC run to write.")
  _fusion_arguments(cmd)


def _parser_eval(cmd):
  cmd.add_argument("run", metavar="RUN", help="TREC run(s) to evaluate.", type=Path, nargs="+")
  _path(cmd, "--qrels", help="TREC qrels.")
  _path(cmd, "-d", "--decisions", required=False, help="Decisions TSV, for the accuracy.")
  _path(cmd, "--labels", required=False, help="Labels TSV, for the accuracy.")
  cmd.add_argument("--per-query",
    help="Print per-query AP and nDCG@10.",
    action="store_true",
    default=False)


def _parser_oracle(cmd):
  _path(cmd, "--pre", help="Pre-feedback TREC run.")
  _path(cmd, "--post", help="Post-feedback TREC run.")
  _path(cmd, "--qrels", help="TREC qrels.")
  _path(cmd, "-o", "--output", required=False, help="Oracle TREC run to write.")


def _parser_report(cmd):
  _path(cmd, "--pre", help="Pre-feedback TREC run.")
  _path(cmd, "--post", help="Post-feedback TREC run.")
  _path(cmd, "--qrels", help="TREC qrels.")
  _path(cmd, "-d", "--decisions", help="Decisions TSV.")
  _path(cmd, "--labels", help="Labels TSV.")
  _path(cmd, "--delta-output", required=False, help="Per-query relative AP change TSV to write.")


def _parser_toy(cmd):
  _path(cmd, "-o", "--output", metavar="DIR", help="Directory to write the toy collection to.")
  cmd.add_argument("--seed", help="Generator seed. Default: %(default)s.", type=int, default=0)


def _parser_tune(cmd):
  _path(cmd, "-i", "--index", help="Index file.")
  _path(cmd, "-q", "--queries", help="Queries TSV.")
  _path(cmd, "--pre", help="Pre-feedback TREC run.")
  _path(cmd, "--post", help="Post-feedback TREC run.")
  _path(cmd, "--qrels", help="TREC qrels.")
  cmd.add_argument("--folds",
    help="Cross-validation folds. Default: %(default)s.",
    type=int,
    default=5)
  cmd.add_argument("--seed",
    help="Fold assignment seed. Default: %(default)s.",
    type=int,
    default=0)
  cmd.add_argument("--fb-docs-grid",
    metavar="N",
    help="Also tune the feedback depth (no values: the default grid).",
    type=int,
    nargs="*",
    default=None)


def _parser_pipeline(cmd):
  cmd.add_argument("--toy",
    help=f"Use the generated toy collection ({ToyCollection.CORPUS_FILE} and friends).",
    action="store_true",
    default=False)
  _path(cmd, "--corpus", required=False, help="Corpus TSV.")
  _path(cmd, "--queries", required=False, help="Queries TSV.")
  _path(cmd, "--qrels", required=False, help="TREC qrels.")
  _path(cmd, "--external-run", required=False,
    help="Post-feedback run of another feedback model to transfer the deciders to.")
  _path(cmd, "-o", "--output", metavar="DIR", help="Directory for every artifact.")
  cmd.add_argument("--folds",
    help="Cross-validation folds. Default: %(default)s.",
    type=int,
    default=5)
  cmd.add_argument("--seed", help="Fold and toy seed. Default: %(default)s.", type=int, default=0)
  cmd.add_argument("--fb-docs-grid",
    metavar="N",
    help="Tune the feedback depth on the training folds (no values: the default grid).",
    type=int,
    nargs="*",
    default=None)


def common_arguments(parser):
  parser.add_argument(
    "-v",
    "--verbose",
    action="count",
    default=0,
    help="Increase output verbosity. Repeat for increased verbosity.",
  )
  parser.add_argument("-c", "--config",
    metavar="TOML_FILE",
    help="Configuration file. Command-line flags take precedence.",
    default=None,
    type=Path)
  parser.add_argument("--log-file",
    metavar="FILE",
    help="Also write log messages to this file.",
    default=None,
    type=Path)


COMMANDS = {
  "index": (srf_index, _parser_index, "Build an inverted index from a corpus."),
  "search": (srf_search, _parser_search, "Retrieve ranked lists with BM25 or LM-Dirichlet."),
  "expand": (srf_expand, _parser_expand, "Expand queries with RM3 and retrieve again."),
  "label": (srf_label, _parser_label, "Label queries that benefit from feedback."),
  "train": (srf_train, _parser_train, "Train a feedback decider."),
  "decide": (srf_decide, _parser_decide, "Decide which queries get feedback."),
  "fuse": (srf_fuse, _parser_fuse, "Combine pre- and post-feedback runs."),
  "eval": (srf_eval, _parser_eval, "Compute MAP, nDCG@10 and decision accuracy."),
  "oracle": (srf_oracle, _parser_oracle, "Per-query best of the two runs."),
  "report": (srf_report, _parser_report, "Decision/outcome contingency table."),
  "toy": (srf_toy, _parser_toy, "Write the generated toy collection."),
  "tune": (srf_tune, _parser_tune, "Grid search and cross-validate fusion parameters."),
  "pipeline": (srf_pipeline, _parser_pipeline, "Run every stage end to end."),
}


def define_parser():
  parser = argparse.ArgumentParser("srf",
    description="Selective pseudo-relevance feedback: retrieval, expansion, deciders and fusion.")
  parser.set_defaults(cmd=None)

  subparsers = parser.add_subparsers()
  for name, (handler, define, description) in COMMANDS.items():
    cmd = subparsers.add_parser(name, help=description, description=description)
    cmd.set_defaults(cmd=handler)
    common_arguments(cmd)
    define(cmd)

  return parser


def main(argv: list[str] | None = None) -> int:
  parser = define_parser()
  args = parser.parse_args(argv)

  if args.cmd is None:
    parser.print_usage(sys.stderr)
    return 2

  log.min_level = args.verbose + 1
  log_output.output_file(args.log_file)

  try:
    args.cmd(args)
  except SrfError as e:
    message = " ".join(str(e).split())
    print(f"srf: error: {e.code}: {message}", file=sys.stderr)
    return 1
  except Exception as e:
    log.exception(e)
    return 2
  finally:
    log_output.output_file(None)
  return 0


if __name__ == "__main__":
  sys.exit(main())
