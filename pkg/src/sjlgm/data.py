"""Datasets for joint longitudinal / spatial survival analysis.

Subjects are nested in ``K`` regions. Each subject has one survival record
``(time, event)`` and one or more longitudinal measurements taken strictly
before the survival time. Storage is columnar (numpy arrays); the record
classes are provided for inspection and for building small datasets by hand.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class LongitudinalRecord:
    subject_id: str
    region_id: int
    time: float
    outcome: float
    covariates: tuple[float, ...] = ()


@dataclass(frozen=True)
class SurvivalRecord:
    subject_id: str
    region_id: int
    time: float
    event: int
    covariates: tuple[float, ...] = ()


@dataclass(frozen=True, eq=False)
class AdjacencyGraph:
    """Undirected neighbourhood graph over regions ``0..K-1``."""

    region_count: int
    edges: frozenset[tuple[int, int]]

    def __post_init__(self):
        for a, b in self.edges:
            if a == b:
                raise DataError(f"self-loop on region {a}")
            if not (0 <= a < self.region_count and 0 <= b < self.region_count):
                raise DataError(f"edge ({a}, {b}) references a region outside [0, {self.region_count})")
            if a > b:
                raise DataError("edges must be stored as (low, high) pairs; use AdjacencyGraph.from_pairs")

    @classmethod
    def from_pairs(cls, region_count: int, pairs: Iterable[tuple[int, int]]) -> "AdjacencyGraph":
        edges = set()
        for a, b in pairs:
            a, b = int(a), int(b)
            if a == b:
                raise DataError(f"self-loop on region {a}")
            edges.add((min(a, b), max(a, b)))
        return cls(int(region_count), frozenset(edges))

    @classmethod
    def lattice(cls, rows: int, cols: int) -> "AdjacencyGraph":
        """Rook adjacency on a ``rows x cols`` grid, regions numbered row-major."""
        pairs = []
        for r in range(rows):
            for c in range(cols):
                k = r * cols + c
                if c + 1 < cols:
                    pairs.append((k, k + 1))
                if r + 1 < rows:
                    pairs.append((k, k + cols))
        return cls.from_pairs(rows * cols, pairs)

    @property
    def neighbor_counts(self) -> np.ndarray:
        n = np.zeros(self.region_count, dtype=int)
        for a, b in self.edges:
            n[a] += 1
            n[b] += 1
        return n

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def neighbors(self, k: int) -> list[int]:
        out = [b for a, b in self.edges if a == k] + [a for a, b in self.edges if b == k]
        return sorted(out)

    def components(self) -> list[list[int]]:
        """Connected components (isolated regions form singleton components)."""
        parent = list(range(self.region_count))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for a, b in self.edges:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        groups: dict[int, list[int]] = {}
        for k in range(self.region_count):
            groups.setdefault(find(k), []).append(k)
        return [groups[r] for r in sorted(groups)]

    def __eq__(self, other):
        return (
            isinstance(other, AdjacencyGraph)
            and self.region_count == other.region_count
            and self.edges == other.edges
        )

    def __hash__(self):
        return hash((self.region_count, self.edges))


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class JointDataset:
    """Longitudinal + survival records aligned on a dense subject index.

    Attributes
    ----------
    subject_ids : tuple of str
        Original identifiers, in dense-index order.
    subject_region : (N,) int
    long_subject, long_time, long_y : (n_obs,) arrays
    long_x : (n_obs, p1) array
    surv_time, surv_event : (N,) arrays
    surv_x : (N, p2) array
    """

    subject_ids: tuple[str, ...]
    subject_region: np.ndarray
    long_subject: np.ndarray
    long_time: np.ndarray
    long_y: np.ndarray
    long_x: np.ndarray
    surv_time: np.ndarray
    surv_event: np.ndarray
    surv_x: np.ndarray
    graph: AdjacencyGraph
    long_covariate_names: tuple[str, ...] = ()
    surv_covariate_names: tuple[str, ...] = ()
    subject_index: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_arrays(
        cls,
        subject_ids: Sequence[str],
        subject_region,
        graph: AdjacencyGraph,
        long_subject=(),
        long_time=(),
        long_y=(),
        long_x=None,
        surv_time=(),
        surv_event=(),
        surv_x=None,
        long_covariate_names: Sequence[str] = (),
        surv_covariate_names: Sequence[str] = (),
        strict: bool = False,
        clamp: bool = False,
    ) -> "JointDataset":
        """Build and validate a dataset from columnar arrays.

        Either outcome table may be empty (longitudinal-only or survival-only
        data); when both are present every subject must appear in both.
        """
        ids = tuple(str(s) for s in subject_ids)
        n = len(ids)
        n_obs = len(long_time)
        long_x = np.zeros((n_obs, 0)) if long_x is None else np.asarray(long_x, dtype=float).reshape(n_obs, -1)
        surv_x = np.zeros((len(surv_time), 0)) if surv_x is None else np.asarray(surv_x, dtype=float).reshape(len(surv_time), -1)
        long_time = np.asarray(long_time, dtype=float)
        surv_time = np.asarray(surv_time, dtype=float)
        if len(surv_time) and clamp:
            ls = np.asarray(long_subject, dtype=int)
            over = long_time >= surv_time[ls]
            if over.any():
                logger.warning("clamping %d longitudinal times to the survival time", int(over.sum()))
                long_time = np.where(over, np.nextafter(surv_time[ls], -np.inf), long_time)
        ds = cls(
            subject_ids=ids,
            subject_region=_frozen(subject_region, int),
            long_subject=_frozen(long_subject, int),
            long_time=_frozen(long_time),
            long_y=_frozen(long_y),
            long_x=_frozen(long_x),
            surv_time=_frozen(surv_time),
            surv_event=_frozen(surv_event, int),
            surv_x=_frozen(surv_x),
            graph=graph,
            long_covariate_names=tuple(long_covariate_names),
            surv_covariate_names=tuple(surv_covariate_names),
            subject_index={s: i for i, s in enumerate(ids)},
        )
        if len(ds.subject_index) != n:
            raise DataError("duplicate subject identifiers")
        ds.validate(strict=strict)
        return ds

    # -- shape -------------------------------------------------------------
    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def n_regions(self) -> int:
        return self.graph.region_count

    @property
    def n_obs(self) -> int:
        return len(self.long_time)

    @property
    def has_longitudinal(self) -> bool:
        return self.n_obs > 0

    @property
    def has_survival(self) -> bool:
        return len(self.surv_time) > 0

    @property
    def replications(self) -> np.ndarray:
        """m_ik, number of longitudinal measurements per subject."""
        return np.bincount(self.long_subject, minlength=self.n_subjects)

    @property
    def subjects_per_region(self) -> np.ndarray:
        return np.bincount(self.subject_region, minlength=self.n_regions)

    # -- record views ------------------------------------------------------
    @property
    def longitudinal(self) -> list[LongitudinalRecord]:
        return [
            LongitudinalRecord(
                self.subject_ids[s], int(self.subject_region[s]), float(t), float(y), tuple(float(v) for v in x)
            )
            for s, t, y, x in zip(self.long_subject, self.long_time, self.long_y, self.long_x)
        ]

    @property
    def survival(self) -> list[SurvivalRecord]:
        return [
            SurvivalRecord(self.subject_ids[i], int(self.subject_region[i]), float(t), int(d), tuple(float(v) for v in x))
            for i, (t, d, x) in enumerate(zip(self.surv_time, self.surv_event, self.surv_x))
        ]

    def validate(self, strict: bool = False) -> None:
        n, K = self.n_subjects, self.n_regions
        if n == 0:
            raise DataError("dataset has no subjects")
        if self.subject_region.shape != (n,):
            raise DataError("subject_region must have one entry per subject")
        if np.any(self.subject_region < 0) or np.any(self.subject_region >= K):
            bad = int(np.flatnonzero((self.subject_region < 0) | (self.subject_region >= K))[0])
            raise DataError(f"subject {self.subject_ids[bad]} has region {self.subject_region[bad]} outside [0, {K})")
        if not self.has_longitudinal and not self.has_survival:
            raise DataError("dataset has neither longitudinal nor survival records")
        if self.has_survival:
            if len(self.surv_time) != n:
                raise DataError("exactly one survival record per subject is required")
            if np.any(~np.isin(self.surv_event, (0, 1))):
                raise DataError("event indicators must be 0 or 1")
            if np.any(~np.isfinite(self.surv_time)) or np.any(self.surv_time <= 0):
                bad = int(np.flatnonzero(~(self.surv_time > 0))[0])
                raise DataError(f"survival time for subject {self.subject_ids[bad]} must be positive")
        if self.has_longitudinal:
            if np.any(self.long_subject < 0) or np.any(self.long_subject >= n):
                raise DataError("longitudinal record references an unknown subject")
            m = self.replications
            if np.any(m == 0):
                missing = self.subject_ids[int(np.flatnonzero(m == 0)[0])]
                raise DataError(f"subject {missing} has no longitudinal measurements")
            if np.any(self.long_time < 0):
                raise DataError("longitudinal times must be non-negative")
            if self.has_survival:
                T = self.surv_time[self.long_subject]
                after = self.long_time > T
                at = self.long_time == T
                if after.any() or (strict and at.any()):
                    i = int(np.flatnonzero(after | (at if strict else False))[0])
                    raise DataError(
                        f"longitudinal record {i} (subject {self.subject_ids[self.long_subject[i]]}, "
                        f"time {self.long_time[i]}) is not before the survival time {T[i]}"
                    )
                if at.any():
                    logger.warning("%d longitudinal times equal the survival time", int(at.sum()))


@dataclass(frozen=True)
class DatasetSummary:
    n_subjects: int
    n_regions: int
    n_events: int
    n_longitudinal: int
    censoring_rate: float
    mean_replications: float
    subjects_per_region_mean: float
    subjects_per_region_sd: float
    empty_regions: int


def summarize_dataset(d: JointDataset) -> DatasetSummary:
    N = d.n_subjects
    events = int(d.surv_event.sum()) if d.has_survival else 0
    per_region = d.subjects_per_region
    return DatasetSummary(
        n_subjects=N,
        n_regions=d.n_regions,
        n_events=events,
        n_longitudinal=d.n_obs,
        censoring_rate=1.0 - events / N if d.has_survival else float("nan"),
        mean_replications=d.n_obs / N,
        subjects_per_region_mean=float(per_region.mean()),
        subjects_per_region_sd=float(per_region.std(ddof=1)) if len(per_region) > 1 else 0.0,
        empty_regions=int((per_region == 0).sum()),
    )


# -- file formats ----------------------------------------------------------

def read_graph(path) -> AdjacencyGraph:
    """Read a graph file.

    First non-empty line is ``K``. Remaining lines are either
    ``k: j1 j2 ...`` neighbour lists or ``k j`` edge pairs.
    """
    lines = [(i + 1, ln.split("#", 1)[0].strip()) for i, ln in enumerate(Path(path).read_text().splitlines())]
    lines = [(i, ln) for i, ln in lines if ln]
    if not lines:
        raise DataError(f"{path}: empty graph file")
    try:
        K = int(lines[0][1])
    except ValueError:
        raise DataError(f"{path}:{lines[0][0]}: expected region count, got {lines[0][1]!r}") from None
    pairs = []
    for lineno, ln in lines[1:]:
        start = len(pairs)
        try:
            if ":" in ln:
                head, tail = ln.split(":", 1)
                k = int(head)
                pairs.extend((k, int(j)) for j in tail.replace(",", " ").split())
            else:
                parts = ln.replace(",", " ").split()
                if len(parts) != 2:
                    raise ValueError
                pairs.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise DataError(f"{path}:{lineno}: cannot parse graph line {ln!r}") from None
        for a, b in pairs[start:]:
            if not (0 <= a < K and 0 <= b < K):
                raise DataError(f"{path}:{lineno}: region index out of range [0, {K})")
    try:
        return AdjacencyGraph.from_pairs(K, pairs)
    except DataError as e:
        raise DataError(f"{path}: {e}") from None


def write_graph(graph: AdjacencyGraph, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"{graph.region_count}\n")
        for k in range(graph.region_count):
            fh.write(f"{k}: {' '.join(str(j) for j in graph.neighbors(k))}\n")


def _read_csv(path, required: Sequence[str], covariates: Sequence[str] | None):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path}:1: missing column(s) {', '.join(missing)}")
        if covariates is None:
            covariates = [h for h in header if h not in required]
        absent = [c for c in covariates if c not in header]
        if absent:
            raise DataError(f"{path}:1: covariate column(s) not found: {', '.join(absent)}")
        idx = {h: header.index(h) for h in header}
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rows.append((lineno, row))
    return header, idx, list(covariates), rows


def load_dataset(
    longitudinal_path,
    survival_path,
    graph_path,
    long_covariates: Sequence[str] | None = None,
    surv_covariates: Sequence[str] | None = None,
    strict: bool = False,
    clamp: bool = False,
) -> JointDataset:
    """Load and validate the three input files.

    ``long_covariates``/``surv_covariates`` select covariate columns by header
    name; by default every non-required column is used. With ``strict`` a
    longitudinal time equal to the survival time is rejected; with ``clamp``
    offending times are moved just below the survival time instead.
    """
    graph = read_graph(graph_path)
    K = graph.region_count

    _, sidx, scov, srows = _read_csv(survival_path, ("subject", "region", "time", "event"), surv_covariates)
    ids, regions, stime, sevent, sx, sline = [], [], [], [], [], {}
    for lineno, row in srows:
        try:
            sid = row[sidx["subject"]].strip()
            reg = int(row[sidx["region"]])
            t = float(row[sidx["time"]])
            ev = int(float(row[sidx["event"]]))
            x = [float(row[sidx[c]]) for c in scov]
        except ValueError as e:
            raise DataError(f"{survival_path}:{lineno}: {e}") from None
        if sid in sline:
            raise DataError(f"{survival_path}:{lineno}: duplicate survival record for subject {sid}")
        if not 0 <= reg < K:
            raise DataError(f"{survival_path}:{lineno}: region {reg} out of range [0, {K})")
        if ev not in (0, 1):
            raise DataError(f"{survival_path}:{lineno}: event must be 0 or 1")
        if not t > 0:
            raise DataError(f"{survival_path}:{lineno}: survival time must be positive")
        sline[sid] = lineno
        ids.append(sid)
        regions.append(reg)
        stime.append(t)
        sevent.append(ev)
        sx.append(x)

    _, lidx, lcov, lrows = _read_csv(longitudinal_path, ("subject", "region", "time", "y"), long_covariates)
    lsub, ltime, ly, lx = [], [], [], []
    index = {s: i for i, s in enumerate(ids)}
    seen = set()
    for lineno, row in lrows:
        try:
            sid = row[lidx["subject"]].strip()
            reg = int(row[lidx["region"]])
            t = float(row[lidx["time"]])
            y = float(row[lidx["y"]])
            x = [float(row[lidx[c]]) for c in lcov]
        except ValueError as e:
            raise DataError(f"{longitudinal_path}:{lineno}: {e}") from None
        if not 0 <= reg < K:
            raise DataError(f"{longitudinal_path}:{lineno}: region {reg} out of range [0, {K})")
        if sid not in index:
            raise DataError(f"subject {sid} appears in {longitudinal_path} (line {lineno}) but not in {survival_path}")
        i = index[sid]
        if reg != regions[i]:
            raise DataError(f"{longitudinal_path}:{lineno}: subject {sid} region {reg} disagrees with survival file")
        T = stime[i]
        if t > T or (strict and t == T):
            if not clamp:
                raise DataError(
                    f"{longitudinal_path}:{lineno}: time {t} for subject {sid} is not before its survival time {T}"
                )
        seen.add(sid)
        lsub.append(i)
        ltime.append(t)
        ly.append(y)
        lx.append(x)
    for sid in ids:
        if sid not in seen:
            raise DataError(f"subject {sid} appears in {survival_path} (line {sline[sid]}) but not in {longitudinal_path}")

    return JointDataset.from_arrays(
        ids,
        regions,
        graph,
        long_subject=lsub,
        long_time=ltime,
        long_y=ly,
        long_x=np.array(lx, dtype=float).reshape(len(lsub), len(lcov)),
        surv_time=stime,
        surv_event=sevent,
        surv_x=np.array(sx, dtype=float).reshape(len(ids), len(scov)),
        long_covariate_names=lcov,
        surv_covariate_names=scov,
        strict=strict,
        clamp=clamp,
    )


def write_dataset(d: JointDataset, longitudinal_path, survival_path, graph_path) -> None:
    """Write the three files so that :func:`load_dataset` reproduces ``d``."""
    with open(survival_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "region", "time", "event", *d.surv_covariate_names])
        for i, sid in enumerate(d.subject_ids):
            w.writerow([sid, int(d.subject_region[i]), repr(float(d.surv_time[i])), int(d.surv_event[i]),
                        *(repr(float(v)) for v in d.surv_x[i])])
    with open(longitudinal_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "region", "time", "y", *d.long_covariate_names])
        for j in range(d.n_obs):
            s = int(d.long_subject[j])
            w.writerow([d.subject_ids[s], int(d.subject_region[s]), repr(float(d.long_time[j])),
                        repr(float(d.long_y[j])), *(repr(float(v)) for v in d.long_x[j])])
    write_graph(d.graph, graph_path)


def datasets_equal(a: JointDataset, b: JointDataset) -> bool:
    """Field-for-field equality."""
    arrays = ("subject_region", "long_subject", "long_time", "long_y", "long_x",
              "surv_time", "surv_event", "surv_x")
    return (
        a.subject_ids == b.subject_ids
        and a.graph == b.graph
        and a.long_covariate_names == b.long_covariate_names
        and a.surv_covariate_names == b.surv_covariate_names
        and all(np.array_equal(getattr(a, f), getattr(b, f)) for f in arrays)
    )
