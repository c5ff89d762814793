import os
import re
import sys
import threading
import time
import traceback
from contextlib import contextmanager
from enum import IntEnum
from pathlib import Path
from typing import IO, Generator

from termcolor import colored


class LoggerError(Exception):
  def __init__(self, msg):
    self.msg = msg


class Level(IntEnum):
  quiet = 0
  error = 100
  warning = 200
  info = 300
  activity = 350
  debug = 400
  trace = 500
  tracedbg = 5000

  @property
  def initial(self) -> str:
    return self.name[0]


# levels enabled by each -v, starting from none
_VERBOSITY_STEPS = (Level.warning, Level.info, Level.activity, Level.debug, Level.trace)

_COLORS = {
  Level.error: "red",
  Level.warning: "yellow",
  Level.info: "green",
  Level.activity: "cyan",
  Level.debug: "magenta",
}

_LOCK = threading.RLock()
_LEVEL = Level.info
_FILE: "IO[str] | None" = None
_NOCOLOR = not sys.stderr.isatty()
_LOGGERS: "dict[str, SrfLogger]" = {}


def parse_level(val: "Level | int | str | None") -> Level:
  """Accept a level, a level name, or a verbosity count (0 = warnings only)."""
  if val is None:
    return Level.quiet
  if isinstance(val, Level):
    return val
  if isinstance(val, str):
    if val.isdigit():
      return parse_level(int(val))
    try:
      return Level[val.lower()]
    except KeyError:
      raise LoggerError(f"unknown log level: {val}")
  if val >= len(_VERBOSITY_STEPS):
    return Level.tracedbg
  return _VERBOSITY_STEPS[max(val, 0)]


def set_verbosity(lvl: "Level | int | str") -> None:
  global _LEVEL
  with _LOCK:
    _LEVEL = parse_level(lvl)


def verbosity() -> Level:
  return _LEVEL


def output_file(path: Path | None) -> None:
  """Mirror every emitted line to ``path`` (uncoloured), or stop mirroring."""
  global _FILE
  with _LOCK:
    if _FILE is not None:
      _FILE.close()
      _FILE = None
    if path is None:
      return
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    _FILE = path.open("w", encoding="utf-8")


def logger(context: str, parent: "SrfLogger | None" = None) -> "SrfLogger":
  with _LOCK:
    name = _kebab(context)
    if parent is not None:
      name = f"{parent.context}.{name}"
    existing = _LOGGERS.get(name)
    if existing is None:
      existing = _LOGGERS[name] = SrfLogger(name)
    return existing


def _kebab(val: str) -> str:
  if not val:
    raise LoggerError("invalid logger context")
  val = val[0].lower() + val[1:]
  return re.sub(r"(?<!^)(?=[A-Z])", "-", val).lower()


def _emit(lvl: Level, line: str, exc_info=None) -> None:
  with _LOCK:
    if _FILE is not None:
      print(line, file=_FILE)
      _FILE.flush()
    color = _COLORS.get(lvl)
    if color is not None and not _NOCOLOR:
      line = colored(line, color, force_color=True)
    print(line, file=sys.stderr)
    sys.stderr.flush()
    if exc_info:
      traceback.print_exception(*exc_info, file=sys.stderr)


class SrfLogger:
  Level = Level

  def __init__(self, context: str) -> None:
    self.context = context
    self._min_level: Level | None = None

  @property
  def level(self) -> Level:
    return _LEVEL

  @level.setter
  def level(self, val: "Level | int | str") -> None:
    set_verbosity(val)

  @property
  def min_level(self) -> Level | None:
    return self._min_level

  @min_level.setter
  def min_level(self, val: "Level | int | str") -> None:
    # raise the verbosity to at least val, never lower it
    self._min_level = parse_level(val)
    if self._min_level > _LEVEL:
      set_verbosity(self._min_level)

  def enabled(self, lvl: Level) -> bool:
    return _LEVEL >= lvl

  def _log(self, lvl: Level, fmt, *args, exc_info=None) -> None:
    if not self.enabled(lvl):
      return
    if not args:
      fmt, args = "{}", (fmt,)
    msg = str(fmt).format(*args)
    sep = "" if msg.startswith("[") else " "
    _emit(lvl, f"[{lvl.initial}][{self.context}]{sep}{msg}", exc_info)

  def exception(self, e: BaseException) -> None:
    self._log(Level.error, "[exception] {}", e, exc_info=sys.exc_info())

  def error(self, fmt, *args) -> None:
    self._log(Level.error, fmt, *args)

  def warning(self, fmt, *args) -> None:
    self._log(Level.warning, fmt, *args)

  def info(self, fmt, *args) -> None:
    self._log(Level.info, fmt, *args)

  def activity(self, fmt, *args) -> None:
    self._log(Level.activity, fmt, *args)

  def debug(self, fmt, *args) -> None:
    self._log(Level.debug, fmt, *args)

  def trace(self, fmt, *args) -> None:
    self._log(Level.trace, fmt, *args)

  def tracedbg(self, fmt, *args) -> None:
    self._log(Level.tracedbg, fmt, *args)

  def sublogger(self, subcontext: str) -> "SrfLogger":
    return logger(subcontext, parent=self)

  @contextmanager
  def timed(self, label: str) -> Generator[None, None, None]:
    """Log at activity level how long the wrapped stage took."""
    started = time.perf_counter()
    self.activity("[{}] started", label)
    try:
      yield
    finally:
      self.activity("[{}] done in {:.3f}s", label, time.perf_counter() - started)


Logger = logger("selprf")

# VERBOSITY (level name or -v count) sets the starting verbosity
if os.environ.get("VERBOSITY"):
  set_verbosity(os.environ["VERBOSITY"])
