import re
from functools import lru_cache
from importlib.resources import as_file, files
from pathlib import Path

from .. import data as pkg_data
from .config import TokenizerConfig
from .errors import ValidationError
from .log import Logger as log

# A token is a maximal run of letters and digits (underscore is a separator).
_TOKEN_RE = re.compile(r"[^\W_]+")


def _read_stopwords(path: Path) -> frozenset[str]:
  words = frozenset(
    w.strip().lower()
    for w in path.read_text(encoding="utf-8").splitlines()
    if w.strip() and not w.startswith("#")
  )
  log.debug("loaded {} stopwords: {}", len(words), path)
  return words


@lru_cache(maxsize=8)
def load_stopwords(spec: str) -> frozenset[str]:
  if spec == "none":
    return frozenset()
  if spec == "default":
    with as_file(files(pkg_data).joinpath("stopwords.txt")) as bundled:
      return _read_stopwords(bundled)
  path = Path(spec)
  if not path.is_file():
    raise ValidationError("stopword file not found", spec)
  return _read_stopwords(path)


def tokenize(text: str, config: TokenizerConfig | None = None) -> list[str]:
  if config is None:
    config = TokenizerConfig()
  if config.lowercase:
    text = text.lower()
  tokens = _TOKEN_RE.findall(text)
  stopwords = load_stopwords(config.stopwords)
  if stopwords:
    tokens = [t for t in tokens if t not in stopwords]
  return tokens


