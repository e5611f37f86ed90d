"""Run configuration: the key-value file format and manifest round-trip.

A config file holds ``key = value`` lines, ``#`` comments, and any
number of ``[discount]`` sections, each contributing one segment:

    populations = M,F
    common_term = true
    prior_scale = 100
    iterations = 2000
    burn_in = 500
    chains = 2
    seed = 7

    [discount]
    ages = -5
    delta = 0.99

    [discount]
    ages = 6-35
    delta = 0.80

    [discount]
    ages = 36+
    delta = 0.85

Age ranges are inclusive: ``A-B``, ``-B`` (open below), ``A+`` (open
above), or a single age. A section may also name a ``population`` to
override the shared schedule there. Command line flags beat file values,
which beat the built-in defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ParseError
from .model import (
    DiscountSchedule,
    DiscountSegment,
    DlmSpec,
    WishartPrior,
    build_common_term,
    build_local_linear,
    default_schedule,
)

__all__ = ["RunConfig", "parse_config", "build_spec", "spec_to_manifest", "spec_from_manifest",
           "schedule_to_manifest", "schedule_from_manifest"]

_BLEND_CHOICES = ("none", "linear")


@dataclass
class RunConfig:
    """Everything a run can configure, with package defaults filled in."""

    populations: tuple[str, ...] | None = None
    common_term: bool = False
    prior_mean: tuple[float, ...] | float = 0.0
    prior_scale: float = 100.0
    d0: float = 3.0
    s0_scale: float = 0.01
    seed: int | None = None
    iterations: int = 2000
    burn_in: int = 500
    thin: int = 1
    chains: int = 1
    block_discount: bool = False
    horizon: int | None = None
    terminal_age: int | None = None
    blend: str = "none"
    delta: float | None = None
    segments: tuple[DiscountSegment, ...] = ()

    def schedule(self) -> DiscountSchedule:
        if self.segments:
            return DiscountSchedule(self.segments)
        return default_schedule()


def _parse_bool(text: str, where: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ParseError(f"{where}: expected a boolean, got {text!r}")


def _parse_int(text: str, where: str) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise ParseError(f"{where}: expected an integer, got {text!r}") from None


def _parse_float(text: str, where: str) -> float:
    try:
        value = float(text.strip())
    except ValueError:
        raise ParseError(f"{where}: expected a number, got {text!r}") from None
    if not np.isfinite(value):
        raise ParseError(f"{where}: expected a finite number, got {text!r}")
    return value


def _parse_ages(text: str, where: str) -> tuple[int | None, int | None]:
    text = text.strip()
    if text.endswith("+"):
        return _parse_int(text[:-1], where), None
    if text.startswith("-"):
        return None, _parse_int(text[1:], where)
    if "-" in text:
        lo_txt, hi_txt = text.split("-", 1)
        return _parse_int(lo_txt, where), _parse_int(hi_txt, where)
    age = _parse_int(text, where)
    return age, age


def parse_config(path) -> RunConfig:
    """Parse a config file; unknown keys are rejected, not ignored."""
    try:
        text = open(path, encoding="utf-8").read()
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from exc
    cfg = RunConfig()
    segments: list[DiscountSegment] = []
    section: dict[str, str] | None = None
    section_line = 0

    def finish_section():
        nonlocal section
        if section is None:
            return
        where = f"{path}:{section_line}"
        if "ages" not in section or "delta" not in section:
            raise ParseError(f"{where}: [discount] section needs both 'ages' and 'delta'")
        lo, hi = _parse_ages(section["ages"], where)
        segments.append(
            DiscountSegment(
                delta=_parse_float(section["delta"], where),
                age_lo=lo,
                age_hi=hi,
                population=section.get("population"),
            )
        )
        section = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{path}:{lineno}"
        if line.startswith("["):
            finish_section()
            if line != "[discount]":
                raise ParseError(f"{where}: unknown section {line}")
            section = {}
            section_line = lineno
            continue
        if "=" not in line:
            raise ParseError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if section is not None:
            if key not in ("ages", "delta", "population"):
                raise ParseError(f"{where}: unknown key {key!r} in [discount] section")
            if key in section:
                raise ParseError(f"{where}: duplicate key {key!r} in [discount] section")
            section[key] = value
            continue
        if key == "populations":
            cfg.populations = tuple(p.strip() for p in value.split(",") if p.strip())
            if not cfg.populations:
                raise ParseError(f"{where}: populations list is empty")
        elif key == "common_term":
            cfg.common_term = _parse_bool(value, where)
        elif key == "prior_mean":
            parts = [p for p in value.split(",") if p.strip()]
            if len(parts) == 1:
                cfg.prior_mean = _parse_float(parts[0], where)
            else:
                cfg.prior_mean = tuple(_parse_float(p, where) for p in parts)
        elif key == "prior_scale":
            cfg.prior_scale = _parse_float(value, where)
        elif key == "d0":
            cfg.d0 = _parse_float(value, where)
        elif key == "s0_scale":
            cfg.s0_scale = _parse_float(value, where)
        elif key == "seed":
            cfg.seed = _parse_int(value, where)
        elif key == "iterations":
            cfg.iterations = _parse_int(value, where)
        elif key == "burn_in":
            cfg.burn_in = _parse_int(value, where)
        elif key == "thin":
            cfg.thin = _parse_int(value, where)
        elif key == "chains":
            cfg.chains = _parse_int(value, where)
        elif key == "block_discount":
            cfg.block_discount = _parse_bool(value, where)
        elif key == "horizon":
            cfg.horizon = _parse_int(value, where)
        elif key == "terminal_age":
            cfg.terminal_age = _parse_int(value, where)
        elif key == "blend":
            if value not in _BLEND_CHOICES:
                raise ParseError(f"{where}: blend must be one of {_BLEND_CHOICES}, got {value!r}")
            cfg.blend = value
        elif key == "delta":
            cfg.delta = _parse_float(value, where)
        else:
            raise ParseError(f"{where}: unknown config key {key!r}")
    finish_section()
    cfg.segments = tuple(segments)
    return cfg


def build_spec(cfg: RunConfig, data_populations) -> DlmSpec:
    """Model implied by the config for a table's populations.

    The config may restrict or reorder the populations; by default the
    table's own order is used.
    """
    pops = cfg.populations if cfg.populations else tuple(data_populations)
    builder = build_common_term if cfg.common_term else build_local_linear
    return builder(
        pops,
        prior_mean=cfg.prior_mean,
        prior_scale=cfg.prior_scale,
        d0=cfg.d0,
        s0_scale=cfg.s0_scale,
    )


def spec_to_manifest(spec: DlmSpec) -> dict:
    return {
        "populations": list(spec.populations),
        "common_term": spec.common_term,
        "init_mean": spec.init_mean.tolist(),
        "init_cov": spec.init_cov.tolist(),
        "d0": spec.wishart.d0,
        "s0": spec.wishart.s0.tolist(),
    }


def spec_from_manifest(entry: dict) -> DlmSpec:
    try:
        pops = tuple(str(p) for p in entry["populations"])
        common = bool(entry["common_term"])
        init_mean = np.asarray(entry["init_mean"], dtype=float)
        init_cov = np.asarray(entry["init_cov"], dtype=float)
        prior = WishartPrior(d0=float(entry["d0"]), s0=np.asarray(entry["s0"], dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"manifest model entry is malformed: {exc}") from exc
    builder = build_common_term if common else build_local_linear
    base = builder(pops)
    return replace(base, init_mean=init_mean, init_cov=init_cov, wishart=prior)


def schedule_to_manifest(schedule: DiscountSchedule) -> list[dict]:
    return [
        {
            "delta": seg.delta,
            "age_lo": seg.age_lo,
            "age_hi": seg.age_hi,
            "population": seg.population,
        }
        for seg in schedule.segments
    ]


def schedule_from_manifest(entries) -> DiscountSchedule:
    try:
        segments = tuple(
            DiscountSegment(
                delta=float(e["delta"]),
                age_lo=None if e.get("age_lo") is None else int(e["age_lo"]),
                age_hi=None if e.get("age_hi") is None else int(e["age_hi"]),
                population=e.get("population"),
            )
            for e in entries
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"manifest schedule entry is malformed: {exc}") from exc
    return DiscountSchedule(segments)
