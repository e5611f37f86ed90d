"""Error hierarchy shared by the library and the command line tool.

Every failure surfaced to a caller belongs to one of three categories so
that the CLI can map it to a stable exit code and a machine readable tag:

* parse (exit 2): malformed input files, unknown config keys, bad flags
* domain (exit 3): inputs that parse but violate a model precondition
* numerical (exit 4): linear algebra breakdowns that survive the jitter
  ladder and other safeguards
"""

from __future__ import annotations


class GraduationError(Exception):
    """Base class; ``category`` is the machine readable tag."""

    category = "error"
    exit_code = 1


class ParseError(GraduationError):
    category = "parse"
    exit_code = 2


class DomainError(GraduationError):
    category = "domain"
    exit_code = 3


class NumericalError(GraduationError):
    category = "numerical"
    exit_code = 4
