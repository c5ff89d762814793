from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evaluation import Qrels
from .formats import write_corpus, write_qrels, write_queries
from .log import Logger as log

N_DOCS = 500
N_QUERIES = 60
N_TOPICS = 10
TOPIC_WORDS = 24
BACKGROUND_WORDS = 200

# share of a document's tokens drawn from its topic, the background, the next topic
DOC_MIXTURE = (0.5, 0.4, 0.1)
# chance that a query also carries a word of the next topic
DRIFT_RATE = 0.3
# every third query asks for a handful of documents sharing a rare anchor term
ANCHOR_EVERY = 3
ANCHOR_DOCS = 4


@dataclass(frozen=True)
class ToyCollection:
  corpus: list[tuple[str, str]]
  queries: list[tuple[str, str]]
  qrels: Qrels
  seed: int

  CORPUS_FILE = "corpus.tsv"
  QUERIES_FILE = "queries.tsv"
  QRELS_FILE = "qrels.txt"


def _zipf(n: int) -> np.ndarray:
  weights = 1.0 / np.arange(1, n + 1)
  return weights / weights.sum()


def _plant(words: list[str], term: str, rng: np.random.Generator) -> None:
  for _ in range(2):
    words.insert(int(rng.integers(0, len(words) + 1)), term)


def generate_toy_collection(
    seed: int = 0,
    n_docs: int = N_DOCS,
    n_queries: int = N_QUERIES,
    n_topics: int = N_TOPICS) -> ToyCollection:
  """Synthesise a small judged collection of topical clusters.

  Every document belongs to one topic and mixes that topic's words with
  background words and a few words of the next topic. Most queries are sets
  of topic words, sometimes with a word of the next topic that pulls feedback
  towards the wrong cluster; documents of the query's topic are relevant
  (grade 2 when they match two or more query terms). Every third query is
  an anchor query: a rare term planted twice in a few documents of its topic
  plus the topic's most frequent word. Only the anchored documents are
  relevant, the initial ranking already puts them first and feedback can
  only lose ground."""
  rng = np.random.default_rng(seed)
  topic_words = [[f"t{t:02d}w{w:02d}" for w in range(TOPIC_WORDS)] for t in range(n_topics)]
  background = [f"bg{i:03d}" for i in range(BACKGROUND_WORDS)]
  topic_p = _zipf(TOPIC_WORDS)
  background_p = _zipf(BACKGROUND_WORDS)

  doc_topics = rng.integers(0, n_topics, size=n_docs)
  doc_ids = [f"d{i:04d}" for i in range(n_docs)]
  doc_words = []
  for topic in doc_topics:
    length = int(rng.integers(30, 81))
    n_topic, n_background, n_next = rng.multinomial(length, DOC_MIXTURE)
    words = [
      *(topic_words[topic][w] for w in rng.choice(TOPIC_WORDS, size=n_topic, p=topic_p)),
      *(background[w] for w in rng.choice(BACKGROUND_WORDS, size=n_background, p=background_p)),
      *(topic_words[(topic + 1) % n_topics][w]
        for w in rng.choice(TOPIC_WORDS, size=n_next, p=topic_p)),
    ]
    doc_words.append([words[j] for j in rng.permutation(len(words))])

  queries = []
  judgments = {}
  for q in range(n_queries):
    qid = f"q{q:03d}"
    topic = q % n_topics
    members = [i for i, t in enumerate(doc_topics) if t == topic]
    if q % ANCHOR_EVERY == ANCHOR_EVERY - 1 and members:
      anchor = f"a{q:03d}"
      picked = rng.choice(members, size=min(ANCHOR_DOCS, len(members)), replace=False)
      for i in sorted(int(i) for i in picked):
        _plant(doc_words[i], anchor, rng)
        judgments[(qid, doc_ids[i])] = 2
      for i in members:
        judgments.setdefault((qid, doc_ids[i]), 0)
      queries.append((qid, f"{anchor} {topic_words[topic][0]}"))
      continue

    n_terms = int(rng.integers(2, 5))
    picked = rng.choice(TOPIC_WORDS, size=n_terms, replace=False, p=topic_p)
    terms = [topic_words[topic][w] for w in picked]
    drift = None
    if rng.random() < DRIFT_RATE:
      drift = topic_words[(topic + 1) % n_topics][int(rng.choice(TOPIC_WORDS, p=topic_p))]
      terms.append(drift)
    queries.append((qid, " ".join(terms)))
    for i, doc_topic in enumerate(doc_topics):
      if doc_topic == topic:
        matched = sum(1 for t in set(terms) if t in doc_words[i])
        judgments[(qid, doc_ids[i])] = 2 if matched >= 2 else 1
      elif drift is not None and drift in doc_words[i]:
        judgments[(qid, doc_ids[i])] = 0

  corpus = [(doc_id, " ".join(words)) for doc_id, words in zip(doc_ids, doc_words)]
  qrels = Qrels(judgments)
  log.activity("generated toy collection (seed {}): {} documents, {} queries, {} judgments",
    seed, len(corpus), len(queries), len(qrels))
  return ToyCollection(corpus, queries, qrels, seed)


def write_toy_collection(collection: ToyCollection, directory: Path) -> dict[str, Path]:
  directory = Path(directory)
  paths = {
    "corpus": directory / ToyCollection.CORPUS_FILE,
    "queries": directory / ToyCollection.QUERIES_FILE,
    "qrels": directory / ToyCollection.QRELS_FILE,
  }
  write_corpus(paths["corpus"], collection.corpus)
  write_queries(paths["queries"], collection.queries)
  write_qrels(paths["qrels"], collection.qrels)
  log.info("toy collection written to {}", directory)
  return paths
