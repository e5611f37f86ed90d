"""Binary draw archive and flat exports.

The archive is a single little-endian file:

    bytes 0..7    magic "DLMGRAD1"
    bytes 8..11   format version (u32, currently 1)
    bytes 12..59  six u64 fields: n_draws, n_states (ages + 1),
                  state_dim, n_populations, n_missing, first_age + 2**32
                  (offset keeps the unsigned field safe for negatives)
    then float64 arrays back to back, C order:
                  states, precision, obs_cov, missing_values, final_cov
    then the missing mask as u8, shape (populations, n_states - 1)

Model structure, discount schedule and sampler settings travel in the
run manifest next to the archive; loading needs both.

Writes here and elsewhere in the package go through a temp file and an
atomic rename so a crashed run never leaves a half-written output.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import DomainError, ParseError
from .sampler import GibbsConfig, PosteriorDraws

__all__ = [
    "save_draws",
    "load_draws",
    "export_draws_csv",
    "write_bytes_atomic",
    "write_text_atomic",
]

_MAGIC = b"DLMGRAD1"
_VERSION = 1
_AGE_OFFSET = 2**32


def write_bytes_atomic(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text_atomic(path, text: str) -> None:
    write_bytes_atomic(path, text.encode("utf-8"))


def save_draws(draws: PosteriorDraws, path) -> None:
    """Serialise the posterior draws to the binary archive format."""
    n_draws = draws.n_draws
    n_states = draws.states.shape[1]
    p = draws.states.shape[2]
    npop = len(draws.populations)
    n_miss = draws.missing_values.shape[1]
    first_age = int(draws.ages[0])
    header = _MAGIC + struct.pack(
        "<IQQQQQQ",
        _VERSION,
        n_draws,
        n_states,
        p,
        npop,
        n_miss,
        first_age + _AGE_OFFSET,
    )
    parts = [header]
    for arr in (
        draws.states,
        draws.precision,
        draws.obs_cov,
        draws.missing_values,
        draws.final_cov,
    ):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(draws.missing_mask, dtype=np.uint8).tobytes())
    write_bytes_atomic(path, b"".join(parts))


def _take(buf: memoryview, offset: int, count: int, shape) -> tuple[np.ndarray, int]:
    nbytes = count * 8
    if offset + nbytes > len(buf):
        raise ParseError("draw archive is truncated")
    arr = np.frombuffer(buf[offset : offset + nbytes], dtype="<f8").reshape(shape).copy()
    return arr, offset + nbytes


def load_draws(path, spec, config: GibbsConfig) -> PosteriorDraws:
    """Read an archive written by :func:`save_draws`.

    ``spec`` and ``config`` come from the manifest saved alongside; the
    archive's dimensions are checked against them.
    """
    try:
        payload = Path(path).read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read draw archive {path}: {exc}") from exc
    if len(payload) < len(_MAGIC) + 4 + 6 * 8:
        raise ParseError(f"{path} is too short to be a draw archive")
    if payload[: len(_MAGIC)] != _MAGIC:
        raise ParseError(f"{path} is not a draw archive (bad magic)")
    fields = struct.unpack_from("<IQQQQQQ", payload, len(_MAGIC))
    version, n_draws, n_states, p, npop, n_miss, age_field = fields
    if version != _VERSION:
        raise ParseError(f"{path} uses archive version {version}, expected {_VERSION}")
    first_age = int(age_field) - _AGE_OFFSET
    if p != spec.state_dim or npop != spec.n_populations:
        raise DomainError(
            f"archive dimensions (state {p}, populations {npop}) do not match the manifest model"
        )
    n_ages = n_states - 1
    buf = memoryview(payload)
    offset = len(_MAGIC) + 4 + 6 * 8
    states, offset = _take(buf, offset, n_draws * n_states * p, (n_draws, n_states, p))
    precision, offset = _take(buf, offset, n_draws * npop * npop, (n_draws, npop, npop))
    obs_cov, offset = _take(buf, offset, n_draws * npop * npop, (n_draws, npop, npop))
    missing_values, offset = _take(buf, offset, n_draws * n_miss, (n_draws, n_miss))
    final_cov, offset = _take(buf, offset, p * p, (p, p))
    mask_bytes = npop * n_ages
    if offset + mask_bytes != len(buf):
        raise ParseError(f"{path} has trailing or missing bytes")
    missing_mask = (
        np.frombuffer(buf[offset : offset + mask_bytes], dtype=np.uint8)
        .reshape(npop, n_ages)
        .astype(bool)
    )
    if int(missing_mask.sum()) != n_miss:
        raise ParseError(f"{path} missing-cell count disagrees with its mask")
    draws = PosteriorDraws(
        spec=spec,
        config=config,
        ages=np.arange(first_age, first_age + n_ages),
        states=states,
        precision=precision,
        obs_cov=obs_cov,
        missing_values=missing_values,
        missing_mask=missing_mask,
        final_cov=final_cov,
        meta={},
    )
    return draws


def export_draws_csv(draws: PosteriorDraws, path) -> None:
    """Write every draw as long-format text.

    Columns: ``draw, kind, label, age, value``. Kinds are ``state`` (label
    is the state component), ``precision`` and ``obs_cov`` (label is
    ``row,col`` in population labels, age empty), and ``missing`` (label
    is the population, age is the imputed cell's age).
    """
    spec = draws.spec
    labels = spec.state_labels
    pops = draws.populations
    first_age = int(draws.ages[0])
    miss_cells = list(zip(*np.nonzero(draws.missing_mask)))
    lines = ["draw,kind,label,age,value"]
    for d in range(draws.n_draws):
        for s, label in enumerate(labels):
            for k in range(draws.states.shape[1]):
                age = first_age - 1 + k
                lines.append(f"{d},state,{label},{age},{draws.states[d, k, s]:.17g}")
        for i in range(len(pops)):
            for j in range(len(pops)):
                lines.append(f"{d},precision,{pops[i]}|{pops[j]},,{draws.precision[d, i, j]:.17g}")
                lines.append(f"{d},obs_cov,{pops[i]}|{pops[j]},,{draws.obs_cov[d, i, j]:.17g}")
        for c, (i, k) in enumerate(miss_cells):
            age = first_age + int(k)
            lines.append(f"{d},missing,{pops[i]},{age},{draws.missing_values[d, c]:.17g}")
    write_text_atomic(path, "\n".join(lines) + "\n")
