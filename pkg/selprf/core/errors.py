from pathlib import Path


class SrfError(RuntimeError):
  code = "error"

  def __init__(self, msg: str, *details) -> None:
    super().__init__(msg, *details)
    self.msg = msg
    self.details = details

  def __str__(self) -> str:
    if not self.details:
      return self.msg
    return f"{self.msg}: {', '.join(map(str, self.details))}"


class ValidationError(SrfError):
  code = "invalid-argument"


class DuplicateError(SrfError):
  code = "duplicate"


class FormatError(SrfError):
  code = "format"


class ParseError(SrfError):
  code = "parse"

  def __init__(self, msg: str, path: "Path | str | None" = None, line: int | None = None) -> None:
    super().__init__(msg)
    self.path = path
    self.line = line

  def __str__(self) -> str:
    where = []
    if self.path is not None:
      where.append(str(self.path))
    if self.line is not None:
      where.append(f"line {self.line}")
    if not where:
      return self.msg
    return f"{':'.join(where)}: {self.msg}"


class MissingDataError(SrfError):
  code = "missing"


class DegenerateLabelsError(SrfError):
  code = "degenerate-labels"


class FeedbackError(SrfError):
  code = "no-feedback"
