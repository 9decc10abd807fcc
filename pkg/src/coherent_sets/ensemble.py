"""Trajectory ensembles with explicit availability masks.

Positions live in a dense ``(n, num_times, d)`` array. Cells that were never
observed hold NaN and are flagged ``False`` in ``mask``; nothing downstream
reads them.
"""

from __future__ import annotations

import csv
import json
import math
import os
import re
import tempfile
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

COORDINATE_CONVENTIONS = ("cartesian", "lonlat-degrees")
FORMATS = ("long", "wide")


class EnsembleError(ValueError):
    """Raised for malformed ensemble data or files."""


@dataclass(frozen=True, eq=False)
class TrajectoryEnsemble:
    """n trajectories sampled on a common grid of ``num_times`` slices."""

    positions: np.ndarray
    mask: np.ndarray
    masses: np.ndarray | None = None
    time_labels: tuple | None = None
    ids: tuple[str, ...] | None = None
    coordinates: str = "cartesian"

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim == 2:
            pos = pos[:, :, None]
        if pos.ndim != 3:
            raise EnsembleError(f"positions must be (n, num_times, d), got shape {pos.shape}")
        mask = np.array(self.mask, dtype=bool)
        if mask.shape != pos.shape[:2]:
            raise EnsembleError(f"mask shape {mask.shape} does not match positions {pos.shape[:2]}")
        n, num_times, _ = pos.shape
        if n == 0 or num_times == 0:
            raise EnsembleError("ensemble must have at least one trajectory and one time slice")
        empty = np.flatnonzero(~mask.any(axis=1))
        if empty.size:
            raise EnsembleError(f"trajectory {int(empty[0])} has no available observations")
        if not np.all(np.isfinite(pos[mask])):
            raise EnsembleError("available positions must be finite")
        pos[~mask] = np.nan

        masses = None
        if self.masses is not None:
            masses = np.array(self.masses, dtype=float).reshape(-1)
            if masses.shape != (n,):
                raise EnsembleError(f"expected {n} masses, got {masses.shape[0]}")
            if not np.all(np.isfinite(masses)) or np.any(masses < 0) or not np.any(masses > 0):
                raise EnsembleError("masses must be finite, nonnegative and not all zero")
            masses.setflags(write=False)

        ids = tuple(str(i) for i in range(n)) if self.ids is None else tuple(str(i) for i in self.ids)
        if len(ids) != n:
            raise EnsembleError(f"expected {n} ids, got {len(ids)}")
        if len(set(ids)) != n:
            raise EnsembleError("trajectory ids must be unique")
        labels = None
        if self.time_labels is not None:
            labels = tuple(self.time_labels)
            if len(labels) != num_times:
                raise EnsembleError(f"expected {num_times} time labels, got {len(labels)}")
        if self.coordinates not in COORDINATE_CONVENTIONS:
            raise EnsembleError(f"unknown coordinate convention {self.coordinates!r}")

        pos.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "time_labels", labels)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def num_times(self) -> int:
        return self.positions.shape[1]

    @property
    def d(self) -> int:
        return self.positions.shape[2]

    @property
    def support_sizes(self) -> np.ndarray:
        """|T_i| for every trajectory."""
        return self.mask.sum(axis=1)

    @property
    def weights(self) -> np.ndarray:
        """Per-trajectory masses, all ones when none were given."""
        if self.masses is None:
            return np.ones(self.n)
        return self.masses

    def embedded(self) -> np.ndarray:
        """Flat time-major ``(n, num_times * d)`` view, NaN where unobserved."""
        return self.positions.reshape(self.n, -1)

    def with_mask(self, mask: np.ndarray) -> "TrajectoryEnsemble":
        return TrajectoryEnsemble(
            positions=np.where(mask[:, :, None], self.positions, np.nan),
            mask=mask,
            masses=self.masses,
            time_labels=self.time_labels,
            ids=self.ids,
            coordinates=self.coordinates,
        )


@dataclass(frozen=True)
class AvailabilityIndex:
    """Per-slice lists I_t of trajectories observed at slice t."""

    sets: tuple[tuple[int, ...], ...]
    n: int = field(default=0)

    def __len__(self) -> int:
        return len(self.sets)

    def __getitem__(self, t: int) -> tuple[int, ...]:
        return self.sets[t]

    def total(self) -> int:
        return sum(len(s) for s in self.sets)

    def to_mask(self) -> np.ndarray:
        mask = np.zeros((self.n, len(self.sets)), dtype=bool)
        for t, members in enumerate(self.sets):
            mask[list(members), t] = True
        return mask


def build_availability_index(e: TrajectoryEnsemble) -> AvailabilityIndex:
    sets = tuple(tuple(int(i) for i in np.flatnonzero(e.mask[:, t])) for t in range(e.num_times))
    return AvailabilityIndex(sets=sets, n=e.n)


def thin_ensemble(e: TrajectoryEnsemble, fraction: float, seed: int) -> TrajectoryEnsemble:
    """Drop each available observation independently with probability ``fraction``.

    A trajectory whose draw would leave it empty is redrawn from the same
    Bernoulli process conditioned on keeping at least one observation, so
    every trajectory survives.

    Args:
        e: ensemble to thin.
        fraction: removal probability in [0, 1).
        seed: seed for the generator; identical seeds give identical output.

    Returns:
        A new ensemble with a sparser mask and the same positions elsewhere.
    """
    if not 0.0 <= fraction < 1.0:
        raise EnsembleError(f"fraction must lie in [0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    keep = e.mask & (rng.random(e.mask.shape) >= fraction)
    for i in np.flatnonzero(~keep.any(axis=1)):
        avail = np.flatnonzero(e.mask[i])
        size = avail.size
        # number retained ~ Binomial(size, 1 - fraction) conditioned on >= 1
        counts = np.arange(1, size + 1)
        pmf = stats.binom.pmf(counts, size, 1.0 - fraction)
        if pmf.sum() > 0:
            retained = int(rng.choice(counts, p=pmf / pmf.sum()))
        else:
            retained = 1
        chosen = rng.choice(avail, size=retained, replace=False)
        keep[i, chosen] = True
    return e.with_mask(keep)


# ----------------------------------------------------------------------------
# file formats


def manifest_path(path: str | os.PathLike) -> Path:
    """Sidecar location for a CSV: ``foo.csv`` -> ``foo.json``."""
    return Path(path).with_suffix(".json")


def _parse_float(token: str, where: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise EnsembleError(f"{where}: cannot parse {token!r} as a number") from None
    if not math.isfinite(value):
        raise EnsembleError(f"{where}: non-finite value {token!r}")
    return value


def _time_key(token: str):
    """Sort key for time labels: numbers numerically, else ISO timestamps, else text."""
    try:
        return (0, float(token), "")
    except ValueError:
        pass
    try:
        return (1, datetime.fromisoformat(token).timestamp(), "")
    except ValueError:
        return (2, 0.0, token)


def _label_value(token: str):
    try:
        value = float(token)
    except ValueError:
        return token
    return int(value) if value.is_integer() and re.fullmatch(r"[+-]?\d+", token.strip()) else value


def read_manifest(path: str | os.PathLike) -> dict:
    side = manifest_path(path)
    if not side.exists():
        return {}
    with open(side) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise EnsembleError(f"{side}: invalid JSON manifest ({exc})") from None
    if not isinstance(data, dict):
        raise EnsembleError(f"{side}: manifest must be a JSON object")
    return data


def load_ensemble(path: str | os.PathLike, format: str | None = None) -> TrajectoryEnsemble:
    """Read a long- or wide-format CSV (plus optional JSON sidecar).

    Args:
        path: CSV file.
        format: ``"long"`` or ``"wide"``; guessed from the header when omitted.

    Returns:
        The ensemble, with trajectories ordered by first appearance of their id
        and time slices given by the sorted union of observed time labels.
    """
    manifest = read_manifest(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise EnsembleError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if any(cell.strip() for cell in r)]
    if format is None:
        format = manifest.get("format") or ("long" if len(header) > 1 and header[1] == "t" else "wide")
    if format not in FORMATS:
        raise EnsembleError(f"unknown format {format!r}; expected one of {FORMATS}")

    mass_column = manifest.get("mass_column")
    coordinates = manifest.get("coordinates", "cartesian")
    if format == "long":
        e = _parse_long(path, header, body, mass_column, coordinates)
    else:
        e = _parse_wide(path, header, body, mass_column, coordinates)
    if "d" in manifest and int(manifest["d"]) != e.d:
        raise EnsembleError(f"{path}: manifest declares d={manifest['d']} but data has d={e.d}")
    return e


def _parse_long(path, header, body, mass_column, coordinates) -> TrajectoryEnsemble:
    if len(header) < 3 or header[0] != "id" or header[1] != "t":
        raise EnsembleError(f"{path}: long format header must start with 'id,t,c0'")
    coord_cols = [j for j, h in enumerate(header) if re.fullmatch(r"c\d+", h)]
    if not coord_cols:
        raise EnsembleError(f"{path}: no coordinate columns c0..c{{d-1}}")
    expected = [f"c{j}" for j in range(len(coord_cols))]
    if [header[j] for j in coord_cols] != expected:
        raise EnsembleError(f"{path}: coordinate columns must be {','.join(expected)}")
    mass_idx = header.index(mass_column) if mass_column else None
    if mass_column and mass_idx is None:
        raise EnsembleError(f"{path}: mass column {mass_column!r} missing")

    ids: dict[str, int] = {}
    records = []
    masses: dict[str, float] = {}
    seen = set()
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise EnsembleError(
                f"{path}:{lineno}: expected {len(header)} fields, got {len(row)} (inconsistent dimension?)"
            )
        tid, t = row[0].strip(), row[1].strip()
        if not tid or not t:
            raise EnsembleError(f"{path}:{lineno}: empty id or time")
        if (tid, t) in seen:
            raise EnsembleError(f"{path}:{lineno}: duplicate observation for id={tid!r}, t={t!r}")
        seen.add((tid, t))
        ids.setdefault(tid, len(ids))
        coords = [_parse_float(row[j], f"{path}:{lineno}") for j in coord_cols]
        records.append((tid, t, coords))
        if mass_idx is not None:
            masses[tid] = _parse_float(row[mass_idx], f"{path}:{lineno}")
    if not records:
        raise EnsembleError(f"{path}: no observations")

    times = sorted({t for _, t, _ in records}, key=_time_key)
    numeric = {}
    for t in times:
        numeric.setdefault(_time_key(t), t)
    if len(numeric) != len(times):
        raise EnsembleError(f"{path}: distinct time tokens denote the same time")
    t_index = {t: k for k, t in enumerate(times)}
    d = len(coord_cols)
    pos = np.full((len(ids), len(times), d), np.nan)
    mask = np.zeros((len(ids), len(times)), dtype=bool)
    for tid, t, coords in records:
        pos[ids[tid], t_index[t]] = coords
        mask[ids[tid], t_index[t]] = True
    mass_arr = np.array([masses[i] for i in ids]) if mass_idx is not None else None
    return TrajectoryEnsemble(
        positions=pos,
        mask=mask,
        masses=mass_arr,
        time_labels=tuple(_label_value(t) for t in times),
        ids=tuple(ids),
        coordinates=coordinates,
    )


_WIDE_COLUMN = re.compile(r"t(.+)_c(\d+)")


def _parse_wide(path, header, body, mass_column, coordinates) -> TrajectoryEnsemble:
    if not header or header[0] != "id":
        raise EnsembleError(f"{path}: wide format header must start with 'id'")
    cells = {}
    mass_idx = None
    for j, h in enumerate(header[1:], start=1):
        if mass_column and h == mass_column:
            mass_idx = j
            continue
        match = _WIDE_COLUMN.fullmatch(h)
        if not match:
            raise EnsembleError(f"{path}: unrecognised wide column {h!r}")
        cells[j] = (match.group(1), int(match.group(2)))
    if mass_column and mass_idx is None:
        raise EnsembleError(f"{path}: mass column {mass_column!r} missing")
    times = sorted({t for t, _ in cells.values()}, key=_time_key)
    d = max(c for _, c in cells.values()) + 1
    for t in times:
        comps = sorted(c for tt, c in cells.values() if tt == t)
        if comps != list(range(d)):
            raise EnsembleError(f"{path}: slice t{t} has components {comps}, expected 0..{d - 1}")
    t_index = {t: k for k, t in enumerate(times)}

    n = len(body)
    pos = np.full((n, len(times), d), np.nan)
    mask = np.zeros((n, len(times)), dtype=bool)
    ids = []
    masses = []
    for i, row in enumerate(body):
        lineno = i + 2
        if len(row) != len(header):
            raise EnsembleError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        ids.append(row[0].strip())
        filled = np.zeros((len(times), d), dtype=bool)
        for j, (t, c) in cells.items():
            token = row[j].strip()
            if token == "" or token.lower() == "nan":
                continue
            pos[i, t_index[t], c] = _parse_float(token, f"{path}:{lineno}")
            filled[t_index[t], c] = True
        partial = filled.any(axis=1) & ~filled.all(axis=1)
        if partial.any():
            raise EnsembleError(f"{path}:{lineno}: slice with only some coordinates present")
        mask[i] = filled.all(axis=1)
        if mass_idx is not None:
            masses.append(_parse_float(row[mass_idx], f"{path}:{lineno}"))
    if len(set(ids)) != len(ids):
        raise EnsembleError(f"{path}: duplicate trajectory id")
    return TrajectoryEnsemble(
        positions=pos,
        mask=mask,
        masses=np.array(masses) if mass_idx is not None else None,
        time_labels=tuple(_label_value(t) for t in times),
        ids=tuple(ids),
        coordinates=coordinates,
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def atomic_write(path: str | os.PathLike, writer, mode: str = "w") -> None:
    """Write through a temp file in the target directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, newline="" if "b" not in mode else None) as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_ensemble(
    e: TrajectoryEnsemble,
    path: str | os.PathLike,
    format: str = "long",
    extra_manifest: dict | None = None,
) -> Path:
    """Write ``e`` as CSV plus JSON sidecar. Floats use round-trip ``repr``.

    Returns:
        Path of the sidecar manifest.
    """
    if format not in FORMATS:
        raise EnsembleError(f"unknown format {format!r}")
    labels = e.time_labels if e.time_labels is not None else tuple(range(e.num_times))
    label_tokens = [_fmt(t) if isinstance(t, float) else str(t) for t in labels]
    has_mass = e.masses is not None

    def write_long(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "t"] + [f"c{j}" for j in range(e.d)] + (["mass"] if has_mass else []))
        for i in range(e.n):
            for t in np.flatnonzero(e.mask[i]):
                row = [e.ids[i], label_tokens[t]] + [_fmt(v) for v in e.positions[i, t]]
                if has_mass:
                    row.append(_fmt(e.masses[i]))
                w.writerow(row)

    def write_wide(fh):
        w = csv.writer(fh, lineterminator="\n")
        cols = [f"t{label_tokens[t]}_c{j}" for t in range(e.num_times) for j in range(e.d)]
        w.writerow(["id"] + cols + (["mass"] if has_mass else []))
        for i in range(e.n):
            row = [e.ids[i]]
            for t in range(e.num_times):
                if e.mask[i, t]:
                    row.extend(_fmt(v) for v in e.positions[i, t])
                else:
                    row.extend([""] * e.d)
            if has_mass:
                row.append(_fmt(e.masses[i]))
            w.writerow(row)

    manifest = {
        "format": format,
        "d": e.d,
        "n": e.n,
        "num_times": e.num_times,
        "coordinates": e.coordinates,
        "mass_column": "mass" if has_mass else None,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    atomic_write(path, write_long if format == "long" else write_wide)
    side = manifest_path(path)
    atomic_write(side, lambda fh: json.dump(manifest, fh, indent=2, sort_keys=True))
    return side


def from_arrays(
    positions: np.ndarray,
    mask: np.ndarray | None = None,
    masses: Sequence[float] | None = None,
    **kwargs,
) -> TrajectoryEnsemble:
    """Convenience constructor; a missing mask means every cell is observed."""
    positions = np.asarray(positions, dtype=float)
    if positions.ndim == 2:
        positions = positions[:, :, None]
    if mask is None:
        mask = np.ones(positions.shape[:2], dtype=bool)
    return TrajectoryEnsemble(positions=positions, mask=mask, masses=masses, **kwargs)
