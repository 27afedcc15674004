"""Functional data containers, grid inner products and dataset I/O.

Images are stored as an ``n x d`` matrix of row-major vectorized pixel
values. Integrals over the image domain are Riemann sums with a uniform
cell measure, so ``int f(s) g(s) ds == cell_measure * f @ g``.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml


class DimensionError(ValueError):
    """Raised when grids, matrices or files disagree on their shapes."""


class DatasetError(ValueError):
    """Raised when an on-disk dataset fails validation."""


def _frozen_array(values, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FunctionalGrid:
    """Uniform discretization of the image domain.

    Parameters
    ----------
    dims : tuple of int
        Grid extents per axis, e.g. ``(300, 300)``.
    cell_measure : float, optional
        Measure of one grid cell. Defaults to ``1 / d`` so the domain has
        unit measure at any resolution.
    """

    dims: tuple[int, ...]
    cell_measure: float | None = None

    def __post_init__(self):
        dims = tuple(int(k) for k in self.dims)
        if not dims or any(k <= 0 for k in dims):
            raise DimensionError(f"grid dims must be positive integers, got {self.dims}")
        object.__setattr__(self, "dims", dims)
        if self.cell_measure is None:
            object.__setattr__(self, "cell_measure", 1.0 / math.prod(dims))
        elif not self.cell_measure > 0:
            raise ValueError("cell_measure must be positive")
        else:
            object.__setattr__(self, "cell_measure", float(self.cell_measure))

    @property
    def d(self) -> int:
        return math.prod(self.dims)

    def check_same(self, other: "FunctionalGrid") -> None:
        if self.dims != other.dims or self.cell_measure != other.cell_measure:
            raise DimensionError(f"grid mismatch: {self} vs {other}")


@dataclass(frozen=True, eq=False)
class FunctionOnGrid:
    """A function sampled on every point of a grid (length ``d`` vector)."""

    grid: FunctionalGrid
    values: np.ndarray

    def __post_init__(self):
        vals = _frozen_array(self.values, 1, "function values")
        if vals.shape[0] != self.grid.d:
            raise DimensionError(f"function has {vals.shape[0]} values, grid has d={self.grid.d}")
        object.__setattr__(self, "values", vals)

    def __add__(self, other: "FunctionOnGrid") -> "FunctionOnGrid":
        self.grid.check_same(other.grid)
        return FunctionOnGrid(self.grid, self.values + other.values)

    def __sub__(self, other: "FunctionOnGrid") -> "FunctionOnGrid":
        self.grid.check_same(other.grid)
        return FunctionOnGrid(self.grid, self.values - other.values)

    def __mul__(self, c: float) -> "FunctionOnGrid":
        return FunctionOnGrid(self.grid, float(c) * self.values)

    __rmul__ = __mul__

    def as_image(self) -> np.ndarray:
        return self.values.reshape(self.grid.dims)

    @classmethod
    def zeros(cls, grid: FunctionalGrid) -> "FunctionOnGrid":
        return cls(grid, np.zeros(grid.d))


@dataclass(frozen=True, eq=False)
class ImageMatrix:
    """``n x d`` matrix whose row ``i`` is the vectorized image of subject ``i``."""

    grid: FunctionalGrid
    values: np.ndarray

    def __post_init__(self):
        vals = _frozen_array(self.values, 2, "image matrix")
        if vals.shape[1] != self.grid.d:
            raise DimensionError(f"image rows have length {vals.shape[1]}, grid has d={self.grid.d}")
        object.__setattr__(self, "values", vals)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def row(self, i: int) -> FunctionOnGrid:
        return FunctionOnGrid(self.grid, self.values[i])

    def mean_function(self) -> FunctionOnGrid:
        return FunctionOnGrid(self.grid, self.values.mean(axis=0))

    def scaled(self, c: float) -> "ImageMatrix":
        return ImageMatrix(self.grid, float(c) * self.values)

    def take(self, rows) -> "ImageMatrix":
        return ImageMatrix(self.grid, self.values[np.asarray(rows)])


@dataclass(frozen=True, eq=False)
class SubjectData:
    """Longitudinal records, covariates and survival outcome of one subject.

    ``q_design`` holds the random-effect design rows at the visit times and
    must be either a column of ones (random intercept) or ``[1, t]``
    (random intercept and slope).
    """

    id: str
    times: np.ndarray
    y: np.ndarray
    z: np.ndarray
    omega: np.ndarray
    q_design: np.ndarray
    survival_time: float
    event: bool

    def __post_init__(self):
        object.__setattr__(self, "id", str(self.id))
        times = _frozen_array(self.times, 1, f"times of subject {self.id}")
        y = _frozen_array(self.y, 1, f"y of subject {self.id}")
        z = _frozen_array(np.atleast_1d(self.z), 1, f"z of subject {self.id}")
        omega = _frozen_array(np.atleast_1d(self.omega), 1, f"omega of subject {self.id}")
        q = _frozen_array(np.asarray(self.q_design, dtype=float).reshape(len(times), -1), 2,
                          f"q_design of subject {self.id}")
        if len(times) < 1:
            raise ValueError(f"subject {self.id} has no longitudinal records")
        if len(y) != len(times):
            raise DimensionError(f"subject {self.id}: {len(y)} outcomes for {len(times)} times")
        if np.any(np.diff(times) <= 0):
            raise ValueError(f"subject {self.id}: visit times must be strictly increasing")
        if not self.survival_time >= 0:
            raise ValueError(f"subject {self.id}: survival time must be nonnegative")
        if times[-1] > self.survival_time:
            raise ValueError(f"subject {self.id}: visit after the survival time")
        if q.shape[1] not in (1, 2) or not np.all(q[:, 0] == 1.0):
            raise ValueError(f"subject {self.id}: q_design must be [1] or [1, t]")
        if q.shape[1] == 2 and not np.array_equal(q[:, 1], times):
            raise ValueError(f"subject {self.id}: second q column must equal the visit times")
        for name, val in (("times", times), ("y", y), ("z", z), ("omega", omega), ("q_design", q)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "survival_time", float(self.survival_time))
        object.__setattr__(self, "event", bool(self.event))

    @property
    def n_visits(self) -> int:
        return len(self.times)


@dataclass(frozen=True, eq=False)
class FjmDataset:
    """Images aligned with subject records (row ``i`` belongs to ``subjects[i]``)."""

    images: ImageMatrix
    subjects: tuple[SubjectData, ...]

    def __post_init__(self):
        subjects = tuple(self.subjects)
        if len(subjects) != self.images.n:
            raise DimensionError(f"{self.images.n} images but {len(subjects)} subjects")
        if not subjects:
            raise ValueError("dataset has no subjects")
        ids = [s.id for s in subjects]
        if len(set(ids)) != len(ids):
            raise ValueError("subject ids must be unique")
        pz = {len(s.z) for s in subjects}
        pw = {len(s.omega) for s in subjects}
        r = {s.q_design.shape[1] for s in subjects}
        if len(pz) != 1 or len(pw) != 1 or len(r) != 1:
            raise DimensionError("subjects disagree on covariate or random-effect dimensions")
        object.__setattr__(self, "subjects", subjects)

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def grid(self) -> FunctionalGrid:
        return self.images.grid

    @cached_property
    def arrays(self) -> "LongArrays":
        return LongArrays.from_subjects(self.subjects)

    def take(self, rows) -> "FjmDataset":
        rows = np.asarray(rows)
        return FjmDataset(self.images.take(rows), tuple(self.subjects[i] for i in rows))

    def with_images(self, images: ImageMatrix) -> "FjmDataset":
        return FjmDataset(images, self.subjects)


@dataclass(frozen=True, eq=False)
class LongArrays:
    """Flat (long-format) numeric view of a list of subjects."""

    subject: np.ndarray      # (N,) subject index of each visit
    time: np.ndarray         # (N,)
    y: np.ndarray            # (N,)
    q: np.ndarray            # (N, r)
    z: np.ndarray            # (n, p_z)
    omega: np.ndarray        # (n, p_w)
    T: np.ndarray            # (n,)
    event: np.ndarray        # (n,) bool
    counts: np.ndarray       # (n,) visits per subject
    last_time: np.ndarray    # (n,)

    @classmethod
    def from_subjects(cls, subjects: Sequence[SubjectData]) -> "LongArrays":
        counts = np.array([s.n_visits for s in subjects])
        return cls(
            subject=np.repeat(np.arange(len(subjects)), counts),
            time=np.concatenate([s.times for s in subjects]),
            y=np.concatenate([s.y for s in subjects]),
            q=np.vstack([s.q_design for s in subjects]),
            z=np.vstack([s.z for s in subjects]),
            omega=np.vstack([s.omega for s in subjects]),
            T=np.array([s.survival_time for s in subjects]),
            event=np.array([s.event for s in subjects], dtype=bool),
            counts=counts,
            last_time=np.array([s.times[-1] for s in subjects]),
        )

    @property
    def n(self) -> int:
        return len(self.T)

    @property
    def r(self) -> int:
        return self.q.shape[1]


def inner_product(f: FunctionOnGrid, g: FunctionOnGrid) -> float:
    """Riemann-sum approximation of ``int f(s) g(s) ds``."""
    f.grid.check_same(g.grid)
    return float(f.grid.cell_measure * np.dot(f.values, g.values))


def functional_matvec(X: ImageMatrix, f: FunctionOnGrid) -> np.ndarray:
    """Return the vector ``(int x_i(s) f(s) ds)_i`` for every image row."""
    X.grid.check_same(f.grid)
    return X.grid.cell_measure * (X.values @ f.values)


def l2_norm(f: FunctionOnGrid) -> float:
    return math.sqrt(inner_product(f, f))


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------

MANIFEST_KEYS = ("image_header", "image_payload", "longitudinal", "survival")


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _csv_bytes(header: list[str], rows: list[list]) -> bytes:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(v if isinstance(v, str) else repr(v) for v in row))
    return ("\n".join(lines) + "\n").encode()


def write_dataset(data: FjmDataset, manifest_path) -> None:
    """Write ``data`` as a manifest plus header, payload and two CSV tables.

    Sibling files are named after the manifest stem. Floats are written with
    ``repr`` (shortest round-trip form) so :func:`load_dataset` restores them
    bit for bit.
    """
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    stem = manifest_path.stem
    for s in data.subjects:
        if s.n_visits == 0:
            raise DatasetError(f"subject {s.id} has no longitudinal records")
    names = {
        "image_header": f"{stem}.header.json",
        "image_payload": f"{stem}.images.f64",
        "longitudinal": f"{stem}.longitudinal.csv",
        "survival": f"{stem}.survival.csv",
    }
    grid = data.grid
    header = {
        "dims": list(grid.dims),
        "dtype": "f64",
        "order": "row-major",
        "n": data.n,
        "subject_ids": [s.id for s in data.subjects],
        "cell_measure": grid.cell_measure,
    }
    r = data.subjects[0].q_design.shape[1]
    pz = len(data.subjects[0].z)
    pw = len(data.subjects[0].omega)
    long_rows, surv_rows = [], []
    for s in data.subjects:
        for k in range(s.n_visits):
            long_rows.append([s.id, float(s.times[k]), float(s.y[k])]
                             + [float(v) for v in s.q_design[k]] + [float(v) for v in s.z])
        surv_rows.append([s.id, s.survival_time, "1" if s.event else "0"]
                         + [float(v) for v in s.omega])
    d = manifest_path.parent
    _atomic_write(d / names["image_header"], json.dumps(header, indent=1).encode())
    _atomic_write(d / names["image_payload"], data.images.values.astype("<f8").tobytes())
    _atomic_write(d / names["longitudinal"], _csv_bytes(
        ["id", "time", "y"] + [f"q{j + 1}" for j in range(r)] + [f"z{j + 1}" for j in range(pz)],
        long_rows))
    _atomic_write(d / names["survival"], _csv_bytes(
        ["id", "survival_time", "event"] + [f"omega{j + 1}" for j in range(pw)], surv_rows))
    _atomic_write(manifest_path, yaml.safe_dump(names, sort_keys=False).encode())


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    if not path.exists():
        raise DatasetError(f"missing file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError(f"empty table: {path}")
        return header, [row for row in reader if row]


def _prefixed(header: list[str], prefix: str, start: int, path: Path) -> int:
    cols = header[start:]
    for j, c in enumerate(cols):
        if c != f"{prefix}{j + 1}":
            raise DatasetError(f"{path}: unexpected column {c!r}, wanted {prefix}{j + 1}")
    return len(cols)


def load_dataset(manifest_path) -> FjmDataset:
    """Load a dataset written by :func:`write_dataset` (or by hand, same format)."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest: {manifest_path}")
    manifest = yaml.safe_load(manifest_path.read_text()) or {}
    missing = [k for k in MANIFEST_KEYS if k not in manifest]
    if missing:
        raise DatasetError(f"{manifest_path}: manifest lacks keys {missing}")
    base = manifest_path.parent
    paths = {k: base / str(manifest[k]) for k in MANIFEST_KEYS}
    for k, p in paths.items():
        if not p.exists():
            raise DatasetError(f"missing {k} file: {p}")

    header = json.loads(paths["image_header"].read_text())
    if header.get("order", "row-major") != "row-major":
        raise DatasetError(f"{paths['image_header']}: only row-major order is supported")
    dtype = {"f64": "<f8", "f32": "<f4"}.get(header.get("dtype", "f64"))
    if dtype is None:
        raise DatasetError(f"{paths['image_header']}: unsupported dtype {header.get('dtype')!r}")
    grid = FunctionalGrid(tuple(header["dims"]), header.get("cell_measure"))
    ids = [str(i) for i in header["subject_ids"]]
    n = int(header["n"])
    if len(ids) != n:
        raise DatasetError(f"{paths['image_header']}: n={n} but {len(ids)} subject ids")
    payload = np.fromfile(paths["image_payload"], dtype=dtype)
    if payload.size != n * grid.d:
        raise DatasetError(
            f"{paths['image_payload']}: expected n*d = {n}*{grid.d} = {n * grid.d} values, "
            f"found {payload.size}")
    images = ImageMatrix(grid, payload.astype(np.float64).reshape(n, grid.d))

    lh, lrows = _read_csv(paths["longitudinal"])
    if lh[:3] != ["id", "time", "y"]:
        raise DatasetError(f"{paths['longitudinal']}: header must start with id,time,y")
    r = sum(1 for c in lh[3:] if c.startswith("q"))
    _prefixed(lh[:3 + r], "q", 3, paths["longitudinal"])
    pz = _prefixed(lh, "z", 3 + r, paths["longitudinal"])
    sh, srows = _read_csv(paths["survival"])
    if sh[:3] != ["id", "survival_time", "event"]:
        raise DatasetError(f"{paths['survival']}: header must start with id,survival_time,event")
    _prefixed(sh, "omega", 3, paths["survival"])

    visits: dict[str, list[list[float]]] = {}
    for row in lrows:
        visits.setdefault(row[0], []).append([float(v) for v in row[1:]])
    surv = {row[0]: row[1:] for row in srows}
    for sid in ids:
        if sid not in visits:
            raise DatasetError(f"subject {sid} has no longitudinal records")
        if sid not in surv:
            raise DatasetError(f"subject {sid} missing from survival table")
    extra = (set(visits) | set(surv)) - set(ids)
    if extra:
        raise DatasetError(f"subject ids not in image header: {sorted(extra)}")

    subjects = []
    for sid in ids:
        rec = np.array(visits[sid], dtype=np.float64)
        z = rec[:, 2 + r:]
        if np.any(z != z[0]):
            raise DatasetError(f"subject {sid}: time-varying z covariates are not supported")
        srow = surv[sid]
        if srow[1] not in ("0", "1"):
            raise DatasetError(f"subject {sid}: event must be 0 or 1")
        subjects.append(SubjectData(
            id=sid, times=rec[:, 0], y=rec[:, 1], z=z[0] if pz else np.zeros(0),
            omega=np.array([float(v) for v in srow[2:]]), q_design=rec[:, 2:2 + r],
            survival_time=float(srow[0]), event=srow[1] == "1"))
    return FjmDataset(images, tuple(subjects))


def write_function(f: FunctionOnGrid, header_path) -> None:
    """Write one function as ``<stem>.json`` header plus raw ``<stem>.f64`` payload."""
    header_path = Path(header_path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    payload = header_path.with_suffix(".f64")
    header = {"dims": list(f.grid.dims), "dtype": "f64", "order": "row-major", "n": 1,
              "cell_measure": f.grid.cell_measure, "payload": payload.name}
    _atomic_write(payload, f.values.astype("<f8").tobytes())
    _atomic_write(header_path, json.dumps(header, indent=1).encode())


def read_function(header_path) -> FunctionOnGrid:
    header_path = Path(header_path)
    try:
        header = json.loads(header_path.read_text())
        raw = (header_path.parent / header["payload"]).read_bytes()
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read function image {header_path}: {exc}") from exc
    grid = FunctionalGrid(tuple(header["dims"]), header["cell_measure"])
    values = np.frombuffer(raw, dtype="<f8")
    if values.size != grid.d:
        raise DatasetError(f"{header_path}: payload has {values.size} values, grid needs {grid.d}")
    return FunctionOnGrid(grid, values.astype(np.float64))
