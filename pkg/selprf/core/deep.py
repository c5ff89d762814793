"""Twin-branch feedback decider.

Each branch pairs a query with its top-k documents, encodes every
(query, document) pair into a vector and runs an LSTM over the k pair
vectors in rank order. Both branches share all encoder and aggregator
parameters. During training the two branch vectors are concatenated and
fed to a sigmoid head; the expanded-query half is zeroed with probability
``branch_dropout`` so that the head also works when, at inference time,
only the original-query branch is available and the other half is 0.

Gradients are computed by hand (batched over all pairs) and checked
against finite differences in the tests.
"""
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .config import DeepConfig
from .decision import METHOD_DEEP, DecisionOutcome, sigmoid
from .errors import DegenerateLabelsError, FormatError, ValidationError
from .feedback import ExpandedQuery
from .index import BinaryReader, pack_str
from .log import Logger as log
from .retrieval import Query, RankedList

log = log.sublogger("deep")

DECIDER_MAGIC = b"SRFD"
DECIDER_VERSION = 1

# overlap statistics appended to every pair input
N_STATS = 2


class Vocabulary:
  UNK = 0
  EMPTY = 1
  RESERVED = ("<unk>", "<empty>")

  def __init__(self, tokens: Iterable[str]) -> None:
    self.tokens: tuple[str, ...] = (*self.RESERVED, *tokens)
    self._ids = {t: i for i, t in enumerate(self.tokens)}
    if len(self._ids) != len(self.tokens):
      raise ValidationError("vocabulary tokens must be unique")

  @classmethod
  def build(cls, instances: "Iterable[TrainingInstance]", max_vocab: int = 20000) -> "Vocabulary":
    counts: Counter[str] = Counter()
    for x in instances:
      counts.update(x.query)
      counts.update(x.expanded)
      for doc in (*x.pre_docs, *x.post_docs):
        counts.update(doc)
    for reserved in cls.RESERVED:
      counts.pop(reserved, None)
    # most frequent first, ties by token
    kept = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max_vocab]
    return cls(t for t, _ in kept)

  def __len__(self) -> int:
    return len(self.tokens)

  def __eq__(self, other: object) -> bool:
    return isinstance(other, Vocabulary) and self.tokens == other.tokens

  def id(self, token: str) -> int:
    return self._ids.get(token, self.UNK)

  def encode(self, tokens: Sequence[str]) -> list[int]:
    if not tokens:
      return [self.EMPTY]
    return [self.id(t) for t in tokens]


@dataclass(frozen=True)
class TrainingInstance:
  query: tuple[str, ...]
  pre_docs: tuple[tuple[str, ...], ...]
  expanded: tuple[str, ...]
  post_docs: tuple[tuple[str, ...], ...]
  y: int
  query_id: str = ""

  def __post_init__(self) -> None:
    object.__setattr__(self, "query", tuple(self.query))
    object.__setattr__(self, "expanded", tuple(self.expanded))
    object.__setattr__(self, "pre_docs", tuple(tuple(d) for d in self.pre_docs))
    object.__setattr__(self, "post_docs", tuple(tuple(d) for d in self.post_docs))
    if not self.pre_docs or len(self.pre_docs) != len(self.post_docs):
      raise ValidationError("both branches need the same number (>= 1) of document slots",
        self.query_id, len(self.pre_docs), len(self.post_docs))
    if self.y not in (0, 1):
      raise ValidationError("label must be 0 or 1", self.query_id, self.y)

  @property
  def k(self) -> int:
    return len(self.pre_docs)


def pad_documents(
    ranked: RankedList,
    doc_tokens: Callable[[str], Sequence[str]],
    k: int) -> tuple[tuple[str, ...], ...]:
  """Token sequences of the top ``k`` documents, padded with empty documents."""
  docs = [tuple(doc_tokens(d)) for d in ranked.top(k)]
  return tuple(docs + [()] * (k - len(docs)))


def build_instance(
    query: Query,
    pre_list: RankedList,
    expanded: ExpandedQuery,
    post_list: RankedList,
    doc_tokens: Callable[[str], Sequence[str]],
    k: int,
    y: int) -> TrainingInstance:
  return TrainingInstance(
    query=query.terms,
    pre_docs=pad_documents(pre_list, doc_tokens, k),
    expanded=tuple(expanded.tokens()),
    post_docs=pad_documents(post_list, doc_tokens, k),
    y=y,
    query_id=query.query_id)


###############################################################################
# Parameters
###############################################################################
@dataclass
class PairEncoderParams:
  vocabulary: Vocabulary
  embedding: np.ndarray  # (|V|, d)
  weight: np.ndarray  # (p, 3d + N_STATS)
  bias: np.ndarray  # (p,)

  @property
  def embedding_dim(self) -> int:
    return self.embedding.shape[1]

  @property
  def output_dim(self) -> int:
    return self.weight.shape[0]


@dataclass
class AggregatorParams:
  # gates stacked as input, forget, output, candidate
  weight: np.ndarray  # (4h, p + h)
  bias: np.ndarray  # (4h,)

  @property
  def hidden_dim(self) -> int:
    return self.weight.shape[0] // 4


@dataclass
class DeciderParams:
  encoder: PairEncoderParams
  aggregator: AggregatorParams
  head_weight: np.ndarray  # (2h,)
  head_bias: np.ndarray  # (1,)
  branch_dropout: float
  k: int

  def __post_init__(self) -> None:
    d = self.encoder.embedding_dim
    p = self.encoder.output_dim
    h = self.aggregator.hidden_dim
    expected = {
      "embedding": (len(self.encoder.vocabulary), d),
      "pair_weight": (p, 3 * d + N_STATS),
      "pair_bias": (p,),
      "lstm_weight": (4 * h, p + h),
      "lstm_bias": (4 * h,),
      "head_weight": (2 * h,),
      "head_bias": (1,),
    }
    for name, tensor in self.tensors().items():
      if tensor.shape != expected[name]:
        raise ValidationError("parameter tensor has the wrong shape", name, tensor.shape)
      if not np.all(np.isfinite(tensor)):
        raise ValidationError("parameter tensor is not finite", name)

  def tensors(self) -> dict[str, np.ndarray]:
    """Every trainable tensor, in the order they are initialised and stored."""
    return {
      "embedding": self.encoder.embedding,
      "pair_weight": self.encoder.weight,
      "pair_bias": self.encoder.bias,
      "lstm_weight": self.aggregator.weight,
      "lstm_bias": self.aggregator.bias,
      "head_weight": self.head_weight,
      "head_bias": self.head_bias,
    }

  def parameter_count(self) -> int:
    return sum(t.size for t in self.tensors().values())

  @property
  def hidden_dim(self) -> int:
    return self.aggregator.hidden_dim


def _generators(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
  init_seq, mask_seq = np.random.SeedSequence(seed).spawn(2)
  return np.random.default_rng(init_seq), np.random.default_rng(mask_seq)


def init_decider(vocabulary: Vocabulary, config: DeepConfig, k: int | None = None) -> DeciderParams:
  rng, _ = _generators(config.seed)
  d, p, h = config.embedding_dim, config.pair_dim, config.hidden_dim
  s = config.init_scale

  def _uniform(*shape):
    return rng.uniform(-s, s, size=shape)

  return DeciderParams(
    encoder=PairEncoderParams(
      vocabulary, _uniform(len(vocabulary), d), _uniform(p, 3 * d + N_STATS),
      _uniform(p)),
    aggregator=AggregatorParams(_uniform(4 * h, p + h), _uniform(4 * h)),
    head_weight=_uniform(2 * h),
    head_bias=_uniform(1),
    branch_dropout=config.branch_dropout,
    k=k if k is not None else config.k)


###############################################################################
# Forward and backward passes
###############################################################################
class _Bags:
  """Bag-of-ids of a batch of token sequences, laid out for mean pooling.

  Rows are grouped by sequence (``starts`` opens each group) and carry the
  weight count/length of their id. ``order``/``unique``/``unique_starts``
  regroup the same rows by id for scattering gradients back to the table."""

  def __init__(self, sequences: Sequence[Sequence[int]]) -> None:
    ids: list[int] = []
    weights: list[float] = []
    starts: list[int] = []
    for seq in sequences:
      starts.append(len(ids))
      for token_id, count in sorted(Counter(seq).items()):
        ids.append(token_id)
        weights.append(count / len(seq))
    self.n = len(sequences)
    self.ids = np.array(ids, dtype=np.int64)
    self.weights = np.array(weights)[:, None]
    self.starts = np.array(starts, dtype=np.int64)
    self.rows = np.repeat(np.arange(self.n), np.diff([*starts, len(ids)]))
    self.order = np.argsort(self.ids, kind="stable")
    self.unique, self.unique_starts = np.unique(self.ids[self.order], return_index=True)

  def pool(self, table: np.ndarray) -> np.ndarray:
    return np.add.reduceat(table[self.ids] * self.weights, self.starts, axis=0)

  def scatter(self, grad: np.ndarray, out: np.ndarray) -> None:
    """Add the gradient of ``pool`` w.r.t. the table rows to ``out``."""
    contributions = (grad[self.rows] * self.weights)[self.order]
    out[self.unique] += np.add.reduceat(contributions, self.unique_starts, axis=0)


@dataclass(frozen=True)
class _Pairs:
  n: int
  queries: _Bags
  docs: _Bags
  stats: np.ndarray  # (n, N_STATS)


def overlap_stats(query: Sequence[str], doc: Sequence[str]) -> tuple[float, float]:
  """Share of distinct query terms found in the document, share of document tokens in the query."""
  if not query or not doc:
    return 0.0, 0.0
  q = set(query)
  return len(q.intersection(doc)) / len(q), sum(1 for t in doc if t in q) / len(doc)


def _make_pairs(
    vocabulary: Vocabulary,
    pairs: Sequence[tuple[Sequence[str], Sequence[str]]]) -> _Pairs:
  return _Pairs(
    n=len(pairs),
    queries=_Bags([vocabulary.encode(q) for q, _ in pairs]),
    docs=_Bags([vocabulary.encode(d) for _, d in pairs]),
    stats=np.array([overlap_stats(q, d) for q, d in pairs]).reshape(len(pairs), N_STATS))


def _branch_pairs(
    vocabulary: Vocabulary,
    branches: Sequence[tuple[Sequence[str], Sequence[Sequence[str]]]]) -> _Pairs:
  return _make_pairs(vocabulary, [(query, doc) for query, docs in branches for doc in docs])


def _encode(enc: PairEncoderParams, pairs: _Pairs) -> tuple[np.ndarray, tuple]:
  q = pairs.queries.pool(enc.embedding)
  d = pairs.docs.pool(enc.embedding)
  X = np.concatenate([q, d, q * d, pairs.stats], axis=1)
  H = np.tanh(X @ enc.weight.T + enc.bias)
  return H, (q, d, X, H)


def _encode_backward(enc: PairEncoderParams, pairs: _Pairs, cache: tuple, dH: np.ndarray):
  q, d, X, H = cache
  dim = enc.embedding_dim
  dA = dH * (1 - H**2)
  g_weight = dA.T @ X
  g_bias = dA.sum(axis=0)
  dX = dA @ enc.weight
  dq = dX[:, :dim] + dX[:, 2 * dim:3 * dim] * d
  dd = dX[:, dim:2 * dim] + dX[:, 2 * dim:3 * dim] * q
  g_embedding = np.zeros_like(enc.embedding)
  pairs.queries.scatter(dq, g_embedding)
  pairs.docs.scatter(dd, g_embedding)
  return g_embedding, g_weight, g_bias


def _aggregate(agg: AggregatorParams, seq: np.ndarray) -> tuple[np.ndarray, list]:
  """Run the LSTM over ``seq`` (sequences, k, p); returns the last hidden states."""
  n_seq, k, _ = seq.shape
  hd = agg.hidden_dim
  h = np.zeros((n_seq, hd))
  c = np.zeros((n_seq, hd))
  steps = []
  for t in range(k):
    inp = np.concatenate([seq[:, t], h], axis=1)
    z = inp @ agg.weight.T + agg.bias
    i = sigmoid(z[:, :hd])
    f = sigmoid(z[:, hd:2 * hd])
    o = sigmoid(z[:, 2 * hd:3 * hd])
    g = np.tanh(z[:, 3 * hd:])
    c_next = f * c + i * g
    tc = np.tanh(c_next)
    steps.append((inp, c, i, f, o, g, tc))
    h = o * tc
    c = c_next
  return h, steps


def _aggregate_backward(agg: AggregatorParams, steps: list, dh_last: np.ndarray, p: int):
  n_seq = dh_last.shape[0]
  k = len(steps)
  g_weight = np.zeros_like(agg.weight)
  g_bias = np.zeros_like(agg.bias)
  d_seq = np.zeros((n_seq, k, p))
  dh = dh_last
  dc = np.zeros_like(dh_last)
  for t in reversed(range(k)):
    inp, c_prev, i, f, o, g, tc = steps[t]
    do = dh * tc
    dc = dc + dh * o * (1 - tc**2)
    dz = np.concatenate([
      dc * g * i * (1 - i),
      dc * c_prev * f * (1 - f),
      do * o * (1 - o),
      dc * i * (1 - g**2),
    ], axis=1)
    g_weight += dz.T @ inp
    g_bias += dz.sum(axis=0)
    dinp = dz @ agg.weight
    d_seq[:, t] = dinp[:, :p]
    dh = dinp[:, p:]
    dc = dc * f
  return d_seq, g_weight, g_bias


def _branch_vectors(params: DeciderParams, pairs: _Pairs) -> tuple[np.ndarray, tuple]:
  H, enc_cache = _encode(params.encoder, pairs)
  seq = H.reshape(pairs.n // params.k, params.k, params.encoder.output_dim)
  h_last, steps = _aggregate(params.aggregator, seq)
  return h_last, (enc_cache, steps)


def _instance_branches(instances: Sequence[TrainingInstance]) -> list:
  return [
    *((x.query, x.pre_docs) for x in instances),
    *((x.expanded, x.post_docs) for x in instances),
  ]


def _check_instances(instances: Sequence[TrainingInstance], k: int) -> None:
  for x in instances:
    if x.k != k:
      raise ValidationError("instance has the wrong number of document slots", x.query_id, x.k, k)


def _merge(h_last: np.ndarray, masks: np.ndarray) -> np.ndarray:
  n = len(masks)
  return np.concatenate([h_last[:n], h_last[n:] * masks[:, None]], axis=1)


def _loss_and_gradients(
    params: DeciderParams,
    pairs: _Pairs,
    y: np.ndarray,
    masks: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
  n = len(y)
  hd = params.hidden_dim
  h_last, (enc_cache, steps) = _branch_vectors(params, pairs)
  merged = _merge(h_last, masks)
  theta = sigmoid(merged @ params.head_weight + params.head_bias[0])
  loss = float(np.mean((theta - y) ** 2))

  dz = 2 * (theta - y) / n * theta * (1 - theta)
  grads = {
    "head_weight": merged.T @ dz,
    "head_bias": np.array([dz.sum()]),
  }
  dmerged = np.outer(dz, params.head_weight)
  dh_last = np.concatenate([dmerged[:, :hd], dmerged[:, hd:] * masks[:, None]], axis=0)
  d_seq, grads["lstm_weight"], grads["lstm_bias"] = _aggregate_backward(
    params.aggregator, steps, dh_last, params.encoder.output_dim)
  dH = d_seq.reshape(pairs.n, params.encoder.output_dim)
  grads["embedding"], grads["pair_weight"], grads["pair_bias"] = _encode_backward(
    params.encoder, pairs, enc_cache, dH)
  return loss, grads


def loss_and_gradients(
    params: DeciderParams,
    instances: Sequence[TrainingInstance],
    masks: "Sequence[float] | np.ndarray") -> tuple[float, dict[str, np.ndarray]]:
  """Mean squared error of theta against the labels and its gradient for every tensor.

  ``masks[i]`` multiplies the expanded-query half of instance ``i`` (1 keeps it, 0 drops it)."""
  _check_instances(instances, params.k)
  masks = np.asarray(masks, dtype=np.float64)
  if masks.shape != (len(instances),):
    raise ValidationError("one branch mask per instance is required", masks.shape)
  pairs = _branch_pairs(params.encoder.vocabulary, _instance_branches(instances))
  y = np.array([x.y for x in instances], dtype=np.float64)
  return _loss_and_gradients(params, pairs, y, masks)


def expected_loss(params: DeciderParams, instances: Sequence[TrainingInstance]) -> float:
  """Training objective averaged over the branch-dropout masks."""
  n = len(instances)
  kept, _ = loss_and_gradients(params, instances, np.ones(n))
  dropped, _ = loss_and_gradients(params, instances, np.zeros(n))
  return (1 - params.branch_dropout) * kept + params.branch_dropout * dropped


def encode_pair(
    query: Sequence[str],
    doc: Sequence[str],
    params: PairEncoderParams) -> np.ndarray:
  H, _ = _encode(params, _make_pairs(params.vocabulary, [(query, doc)]))
  return H[0]


def encode_branch(
    query: Sequence[str],
    docs: Sequence[Sequence[str]],
    params: DeciderParams) -> np.ndarray:
  if len(docs) != params.k:
    raise ValidationError("branch needs exactly k document slots", len(docs), params.k)
  h_last, _ = _branch_vectors(params, _branch_pairs(params.encoder.vocabulary, [(query, docs)]))
  return h_last[0]


def merged_representation(
    instance: TrainingInstance,
    params: DeciderParams,
    mask: float = 1.0) -> np.ndarray:
  _check_instances([instance], params.k)
  pairs = _branch_pairs(params.encoder.vocabulary, _instance_branches([instance]))
  h_last, _ = _branch_vectors(params, pairs)
  return _merge(h_last, np.array([mask]))[0]


def forward_train(instance: TrainingInstance, params: DeciderParams, mask: float = 1.0) -> float:
  merged = merged_representation(instance, params, mask)
  return float(sigmoid(merged @ params.head_weight + params.head_bias[0]))


def forward_infer(
    query: Sequence[str],
    docs: Sequence[Sequence[str]],
    params: DeciderParams,
    query_id: str = "") -> DecisionOutcome:
  # the expanded-query half of the head input is always the zero vector
  merged = np.concatenate([encode_branch(query, docs, params), np.zeros(params.hidden_dim)])
  theta = float(sigmoid(merged @ params.head_weight + params.head_bias[0]))
  return DecisionOutcome(query_id, theta, theta > 0.5, METHOD_DEEP)


def train_decider(
    dataset: Sequence[TrainingInstance],
    config: DeepConfig | None = None,
    on_epoch: Callable[[int, float], None] | None = None) -> DeciderParams:
  config = config or DeepConfig()
  if not dataset:
    raise ValidationError("empty training set")
  k = dataset[0].k
  _check_instances(dataset, k)
  if len({x.y for x in dataset}) < 2:
    raise DegenerateLabelsError("degenerate labels: training set has a single class", dataset[0].y)

  vocabulary = Vocabulary.build(dataset, config.max_vocab)
  params = init_decider(vocabulary, config, k)
  _, mask_rng = _generators(config.seed)
  log.activity("training on {} instances (k={}, |V|={}, {} parameters)",
    len(dataset), k, len(vocabulary), params.parameter_count())

  pairs = _branch_pairs(vocabulary, _instance_branches(dataset))
  y = np.array([x.y for x in dataset], dtype=np.float64)
  initial = expected_loss(params, dataset)
  for epoch in range(config.epochs):
    masks = (mask_rng.random(len(dataset)) >= config.branch_dropout).astype(np.float64)
    loss, grads = _loss_and_gradients(params, pairs, y, masks)
    for name, tensor in params.tensors().items():
      tensor -= config.learning_rate * grads[name]
    if on_epoch is not None:
      on_epoch(epoch, loss)
    if epoch % 50 == 0:
      log.debug("epoch {}: loss {:.6f}", epoch, loss)
  final = expected_loss(params, dataset)
  log.activity("training loss {:.6f} -> {:.6f} after {} epochs", initial, final, config.epochs)
  return params


###############################################################################
# Binary persistence
###############################################################################
# Layout (little-endian):
#   magic "SRFD", u8 version, u32 |V| d p h k, f64 branch_dropout
#   |V|-2 x str token (reserved ids are implicit)
#   tensors as f64 in DeciderParams.tensors() order
def save_decider(params: DeciderParams, path: Path) -> None:
  path = Path(path)
  path.parent.mkdir(parents=True, exist_ok=True)
  vocabulary = params.encoder.vocabulary
  chunks = [
    DECIDER_MAGIC,
    struct.pack("<B", DECIDER_VERSION),
    struct.pack("<5I", len(vocabulary), params.encoder.embedding_dim, params.encoder.output_dim,
      params.hidden_dim, params.k),
    struct.pack("<d", params.branch_dropout),
    *(pack_str(t) for t in vocabulary.tokens[len(Vocabulary.RESERVED):]),
    *(t.astype("<f8").tobytes() for t in params.tensors().values()),
  ]
  path.write_bytes(b"".join(chunks))
  log.activity("saved decider ({} parameters): {}", params.parameter_count(), path)


def load_decider(path: Path) -> DeciderParams:
  path = Path(path)
  data = path.read_bytes()
  magic = data[:len(DECIDER_MAGIC)]
  if magic != DECIDER_MAGIC:
    raise FormatError("not a decider file", path,
      f"expected magic {DECIDER_MAGIC!r}, found {magic!r}")
  reader = BinaryReader(data)
  reader.offset = len(DECIDER_MAGIC)
  try:
    (version,) = reader.unpack("<B")
    if version != DECIDER_VERSION:
      raise FormatError("unsupported decider version", path,
        f"expected {DECIDER_VERSION}, found {version}")
    n_vocab, d, p, h, k = reader.unpack("<5I")
    (branch_dropout,) = reader.unpack("<d")
    if n_vocab < len(Vocabulary.RESERVED):
      raise FormatError("decider vocabulary misses the reserved tokens", path, n_vocab)
    vocabulary = Vocabulary(reader.read_str() for _ in range(n_vocab - len(Vocabulary.RESERVED)))

    def _tensor(*shape):
      count = int(np.prod(shape))
      values = reader.unpack(f"<{count}d")
      return np.array(values, dtype=np.float64).reshape(shape)

    params = DeciderParams(
      encoder=PairEncoderParams(
        vocabulary, _tensor(n_vocab, d), _tensor(p, 3 * d + N_STATS), _tensor(p)),
      aggregator=AggregatorParams(_tensor(4 * h, p + h), _tensor(4 * h)),
      head_weight=_tensor(2 * h),
      head_bias=_tensor(1),
      branch_dropout=branch_dropout,
      k=k)
  except (struct.error, UnicodeDecodeError) as e:
    raise FormatError("truncated decider file", path, e)
  if reader.offset != len(data):
    raise FormatError("trailing bytes in decider file", path, len(data) - reader.offset)
  log.activity("loaded decider ({} parameters): {}", params.parameter_count(), path)
  return params
