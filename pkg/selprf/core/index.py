import math
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .config import TokenizerConfig
from .errors import DuplicateError, FormatError, ValidationError
from .log import Logger as log
from .tokenizer import tokenize

INDEX_MAGIC = b"SRFX"
INDEX_VERSION = 1

Posting = tuple[int, int]


@dataclass(frozen=True)
class Document:
  doc_id: str
  text: str
  length: int

  @classmethod
  def from_text(cls, doc_id: str, text: str, config: TokenizerConfig | None = None) -> "Document":
    return cls(doc_id=doc_id, text=text, length=len(tokenize(text, config)))


class TermDistribution:
  """Probability mass over vocabulary terms.

  When built with ``normalized=True`` the mass is checked to sum to 1 (within 1e-9)."""

  TOLERANCE = 1e-9

  def __init__(self, mass: Mapping[str, float], normalized: bool = True) -> None:
    for term, p in mass.items():
      if not p >= 0:
        raise ValidationError("negative probability mass", term, p)
    self._mass = dict(mass)
    self.normalized = normalized
    if normalized and self._mass and abs(self.total - 1.0) > self.TOLERANCE:
      raise ValidationError("term distribution does not sum to 1", self.total)

  @classmethod
  def from_weights(cls, weights: Mapping[str, float]) -> "TermDistribution":
    total = sum(weights.values())
    if total <= 0:
      raise ValidationError("cannot normalize an empty term distribution")
    return cls({t: w / total for t, w in weights.items()})

  def __getitem__(self, term: str) -> float:
    return self._mass.get(term, 0.0)

  def __contains__(self, term: str) -> bool:
    return term in self._mass

  def __iter__(self) -> Iterator[str]:
    return iter(self._mass)

  def __len__(self) -> int:
    return len(self._mass)

  def __eq__(self, other: object) -> bool:
    if not isinstance(other, TermDistribution):
      return False
    return self._mass == other._mass

  def __repr__(self) -> str:
    return f"TermDistribution({self._mass!r})"

  def items(self):
    return self._mass.items()

  def as_dict(self) -> dict[str, float]:
    return dict(self._mass)

  @property
  def total(self) -> float:
    return math.fsum(self._mass.values())

  def top(self, n: int) -> "TermDistribution":
    # highest mass first, ties by term
    kept = sorted(self._mass.items(), key=lambda kv: (-kv[1], kv[0]))[:n]
    return TermDistribution.from_weights(dict(kept))


class InvertedIndex:
  def __init__(self,
      postings: Mapping[str, "list[Posting] | tuple[Posting, ...]"],
      doc_ids: list[str],
      doc_lengths: list[int],
      tokenizer: TokenizerConfig | None = None) -> None:
    self.tokenizer = tokenizer or TokenizerConfig()
    self.postings: dict[str, tuple[Posting, ...]] = {
      term: tuple(postings[term]) for term in sorted(postings)
    }
    self.doc_ids = tuple(doc_ids)
    self.doc_lengths = tuple(doc_lengths)
    self._internal = {doc_id: i for i, doc_id in enumerate(self.doc_ids)}
    self._cf = {term: sum(tf for _, tf in plist) for term, plist in self.postings.items()}
    self.total_tokens = sum(self._cf.values())
    self._term_vectors: list[dict[str, int]] = [{} for _ in self.doc_ids]
    for term, plist in self.postings.items():
      for internal, tf in plist:
        self._term_vectors[internal][term] = tf
    self.avdl = self.total_tokens / len(self.doc_ids) if self.doc_ids else 0.0

  @property
  def N(self) -> int:
    return len(self.doc_ids)

  @property
  def vocabulary_size(self) -> int:
    return len(self.postings)

  def df(self, term: str) -> int:
    return len(self.postings.get(term, ()))

  def cf(self, term: str) -> int:
    return self._cf.get(term, 0)

  def internal_id(self, doc_id: str) -> int:
    try:
      return self._internal[doc_id]
    except KeyError:
      raise ValidationError("unknown document", doc_id)

  def has_doc(self, doc_id: str) -> bool:
    return doc_id in self._internal

  def doc_length(self, doc_id: str) -> int:
    return self.doc_lengths[self.internal_id(doc_id)]

  def term_vector(self, internal: int) -> dict[str, int]:
    return self._term_vectors[internal]

  def doc_term_vector(self, doc_id: str) -> dict[str, int]:
    return self._term_vectors[self.internal_id(doc_id)]

  def doc_tokens(self, doc_id: str) -> list[str]:
    tv = self.doc_term_vector(doc_id)
    return [t for t in sorted(tv) for _ in range(tv[t])]

  def check_invariants(self) -> None:
    for term, plist in self.postings.items():
      ids = [i for i, _ in plist]
      if ids != sorted(set(ids)):
        raise FormatError("postings not strictly sorted", term)
      if any(tf <= 0 for _, tf in plist):
        raise FormatError("non-positive term frequency", term)
    lengths = [sum(tv.values()) for tv in self._term_vectors]
    if lengths != list(self.doc_lengths):
      raise FormatError("document lengths disagree with postings")

  def __eq__(self, other: object) -> bool:
    if not isinstance(other, InvertedIndex):
      return False
    return (
      self.postings == other.postings
      and self.doc_ids == other.doc_ids
      and self.doc_lengths == other.doc_lengths
      and self.tokenizer == other.tokenizer
    )

  def __repr__(self) -> str:
    return (
      f"InvertedIndex(N={self.N}, |V|={self.vocabulary_size}, |C|={self.total_tokens})"
    )


def build_index(
    corpus: "Iterable[tuple[str, str] | Document]",
    config: TokenizerConfig | None = None) -> InvertedIndex:
  config = config or TokenizerConfig()
  postings: dict[str, list[Posting]] = {}
  doc_ids: list[str] = []
  doc_lengths: list[int] = []
  seen: set[str] = set()
  for entry in corpus:
    if isinstance(entry, Document):
      doc_id, text = entry.doc_id, entry.text
    else:
      doc_id, text = entry
    if doc_id in seen:
      log.error("duplicate document id: {}", doc_id)
      raise DuplicateError("duplicate document id", doc_id)
    seen.add(doc_id)
    internal = len(doc_ids)
    tokens = tokenize(text, config)
    for term, tf in Counter(tokens).items():
      postings.setdefault(term, []).append((internal, tf))
    doc_ids.append(doc_id)
    doc_lengths.append(len(tokens))
    if internal and internal % 10000 == 0:
      log.activity("indexed {} documents", internal)
  if not doc_ids:
    raise ValidationError("cannot index an empty corpus")
  index = InvertedIndex(postings, doc_ids, doc_lengths, tokenizer=config)
  log.activity("built {}", index)
  return index


def collection_model(index: InvertedIndex) -> TermDistribution:
  if index.total_tokens <= 0:
    raise ValidationError("collection model of an empty index")
  total = index.total_tokens
  return TermDistribution({t: index.cf(t) / total for t in index.postings})


###############################################################################
# Binary persistence
###############################################################################
# Layout (little-endian):
#   magic "SRFX", u8 version, u8 flags (bit 0: lowercase), str stopwords
#   u32 N, N x (str doc_id, u32 length)
#   u32 |V|, |V| x (str term, u32 df, df x (u32 internal id, u32 tf))
# where str is u32 byte length followed by UTF-8 bytes.

def pack_str(value: str) -> bytes:
  raw = value.encode("utf-8")
  return struct.pack("<I", len(raw)) + raw


class BinaryReader:
  def __init__(self, data: bytes) -> None:
    self.data = data
    self.offset = 0

  def unpack(self, fmt: str) -> tuple:
    values = struct.unpack_from(fmt, self.data, self.offset)
    self.offset += struct.calcsize(fmt)
    return values

  def read_str(self) -> str:
    (size,) = self.unpack("<I")
    end = self.offset + size
    if end > len(self.data):
      raise struct.error("string past end of buffer")
    value = self.data[self.offset:end].decode("utf-8")
    self.offset = end
    return value


def save_index(index: InvertedIndex, path: Path) -> None:
  path = Path(path)
  path.parent.mkdir(parents=True, exist_ok=True)
  chunks = [
    INDEX_MAGIC,
    struct.pack("<BB", INDEX_VERSION, 1 if index.tokenizer.lowercase else 0),
    pack_str(index.tokenizer.stopwords),
    struct.pack("<I", index.N),
  ]
  for doc_id, length in zip(index.doc_ids, index.doc_lengths):
    chunks.append(pack_str(doc_id))
    chunks.append(struct.pack("<I", length))
  chunks.append(struct.pack("<I", len(index.postings)))
  for term, plist in index.postings.items():
    chunks.append(pack_str(term))
    chunks.append(struct.pack("<I", len(plist)))
    chunks.append(struct.pack(f"<{2 * len(plist)}I", *(v for p in plist for v in p)))
  path.write_bytes(b"".join(chunks))
  log.activity("saved {} to {}", index, path)


def load_index(path: Path) -> InvertedIndex:
  path = Path(path)
  data = path.read_bytes()
  if len(data) < len(INDEX_MAGIC) + 1:
    raise FormatError("truncated index file", path)
  magic = data[:len(INDEX_MAGIC)]
  if magic != INDEX_MAGIC:
    raise FormatError("not an index file", path, f"expected magic {INDEX_MAGIC!r}, found {magic!r}")
  reader = BinaryReader(data)
  reader.offset = len(INDEX_MAGIC)
  try:
    (version,) = reader.unpack("<B")
    if version != INDEX_VERSION:
      raise FormatError("unsupported index version", path,
        f"expected {INDEX_VERSION}, found {version}")
    (flags,) = reader.unpack("<B")
    tokenizer = TokenizerConfig(lowercase=bool(flags & 1), stopwords=reader.read_str())
    (n_docs,) = reader.unpack("<I")
    doc_ids = []
    doc_lengths = []
    for _ in range(n_docs):
      doc_ids.append(reader.read_str())
      doc_lengths.append(reader.unpack("<I")[0])
    (n_terms,) = reader.unpack("<I")
    postings: dict[str, list[Posting]] = {}
    for _ in range(n_terms):
      term = reader.read_str()
      (df,) = reader.unpack("<I")
      flat = reader.unpack(f"<{2 * df}I")
      if any(i >= n_docs for i in flat[0::2]):
        raise FormatError("posting refers to an unknown document", path, term)
      postings[term] = list(zip(flat[0::2], flat[1::2]))
  except (struct.error, UnicodeDecodeError) as e:
    raise FormatError("truncated index file", path, e)
  if reader.offset != len(data):
    raise FormatError("trailing bytes in index file", path, len(data) - reader.offset)
  index = InvertedIndex(postings, doc_ids, doc_lengths, tokenizer=tokenizer)
  index.check_invariants()
  log.activity("loaded {} from {}", index, path)
  return index
