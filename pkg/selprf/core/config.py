import dataclasses
import sys

if sys.version_info >= (3, 11):
  import tomllib
else:
  import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ValidationError
from .log import Logger as log


def _require(cond: bool, msg: str, *details) -> None:
  if not cond:
    raise ValidationError(msg, *details)


@dataclass(frozen=True)
class TokenizerConfig:
  lowercase: bool = True
  # "none", "default" (bundled list) or a path to a one-word-per-line file
  stopwords: str = "none"


@dataclass(frozen=True)
class RetrievalConfig:
  model: str = "bm25"
  k1: float = 1.2
  b: float = 0.75
  mu: float = 1000.0
  depth: int = 1000

  def __post_init__(self) -> None:
    _require(self.model in ("bm25", "lm"), "unknown retrieval model", self.model)
    _require(self.k1 >= 0, "k1 must be non-negative", self.k1)
    _require(0 <= self.b <= 1, "b must be in [0,1]", self.b)
    _require(self.mu > 0, "mu must be positive", self.mu)
    _require(self.depth >= 1, "depth must be >= 1", self.depth)


@dataclass(frozen=True)
class FeedbackConfig:
  fb_docs: int = 10
  fb_terms: int = 20
  lambda_: float = 0.6

  def __post_init__(self) -> None:
    _require(self.fb_docs >= 1, "fb_docs must be >= 1", self.fb_docs)
    _require(self.fb_terms >= 1, "fb_terms must be >= 1", self.fb_terms)
    _require(0 <= self.lambda_ <= 1, "lambda must be in [0,1]", self.lambda_)


@dataclass(frozen=True)
class DecisionConfig:
  tau: float = 0.5
  td2f_quantile: float = 0.95
  top_n: int = 10
  learning_rate: float = 0.1
  l2: float = 1e-4
  epochs: int = 2000

  def __post_init__(self) -> None:
    _require(0 <= self.tau <= 1, "tau must be in [0,1]", self.tau)
    _require(0 < self.td2f_quantile <= 1, "td2f quantile must be in (0,1]", self.td2f_quantile)
    _require(self.top_n >= 1, "top_n must be >= 1", self.top_n)
    _require(self.learning_rate > 0, "learning rate must be positive", self.learning_rate)
    _require(self.l2 >= 0, "l2 must be non-negative", self.l2)
    _require(self.epochs >= 1, "epochs must be >= 1", self.epochs)


@dataclass(frozen=True)
class DeepConfig:
  embedding_dim: int = 32
  pair_dim: int = 64
  hidden_dim: int = 64
  k: int = 10
  learning_rate: float = 1.0
  epochs: int = 300
  branch_dropout: float = 0.5
  init_scale: float = 0.1
  seed: int = 0
  max_vocab: int = 20000

  def __post_init__(self) -> None:
    for name in ("embedding_dim", "pair_dim", "hidden_dim", "k", "epochs", "max_vocab"):
      _require(getattr(self, name) >= 1, f"{name} must be >= 1", getattr(self, name))
    _require(self.learning_rate > 0, "learning rate must be positive", self.learning_rate)
    _require(0 <= self.branch_dropout <= 1, "branch dropout must be in [0,1]", self.branch_dropout)
    _require(self.init_scale > 0, "init scale must be positive", self.init_scale)


@dataclass(frozen=True)
class FusionConfig:
  aleph: int = 1000
  alpha: float = 0.5
  depth: int = 1000

  def __post_init__(self) -> None:
    _require(self.depth >= 1, "fusion depth must be >= 1", self.depth)
    # aleph == depth is allowed: a document at the last rank then scores like a missing one
    _require(self.aleph >= self.depth, "aleph must not be smaller than the fusion depth",
      self.aleph, self.depth)
    _require(0 <= self.alpha <= 1, "alpha must be in [0,1]", self.alpha)


@dataclass(frozen=True)
class SrfConfig:
  tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
  retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
  feedback: FeedbackConfig = field(default_factory=FeedbackConfig)
  decision: DecisionConfig = field(default_factory=DecisionConfig)
  deep: DeepConfig = field(default_factory=DeepConfig)
  fusion: FusionConfig = field(default_factory=FusionConfig)

  def override(self, section: str, **values) -> "SrfConfig":
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
      return self
    current = getattr(self, section)
    return dataclasses.replace(self, **{section: dataclasses.replace(current, **values)})


# TOML cannot use the reserved word as a key name in our dataclass
_KEY_ALIASES = {"lambda": "lambda_"}


def _section_from_dict(cls: type, section: str, values: dict[str, Any]):
  known = {f.name for f in dataclasses.fields(cls)}
  kwargs = {}
  for key, value in values.items():
    name = _KEY_ALIASES.get(key, key)
    if name not in known:
      raise ValidationError("unknown configuration key", f"{section}.{key}")
    kwargs[name] = value
  return cls(**kwargs)


def config_from_dict(values: dict[str, Any]) -> SrfConfig:
  sections = {f.name: f for f in dataclasses.fields(SrfConfig)}
  kwargs = {}
  for section, content in values.items():
    if section not in sections:
      raise ValidationError("unknown configuration section", section)
    if not isinstance(content, dict):
      raise ValidationError("configuration section must be a table", section)
    kwargs[section] = _section_from_dict(sections[section].default_factory, section, content)
  return SrfConfig(**kwargs)


def load_config(path: Path | None) -> SrfConfig:
  if path is None:
    return SrfConfig()
  try:
    with Path(path).open("rb") as f:
      values = tomllib.load(f)
  except tomllib.TOMLDecodeError as e:
    raise ValidationError("invalid configuration file", path, e)
  config = config_from_dict(values)
  log.activity("loaded configuration: {}", path)
  log.debug("configuration: {}", config)
  return config
