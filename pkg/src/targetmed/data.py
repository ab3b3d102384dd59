"""Observed-data model: tables, estimand specs, fold plans and positivity checks."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numpy.typing import NDArray

ESTIMAND_KINDS = ("theta_k_prime", "theta_k", "theta_all")
DEFAULT_TRUNC = 0.01
MISSING_TOKENS = {"", "na", "nan", "null", "none"}


class ConfigError(ValueError):
    """Invalid configuration, schema or input data (CLI exit code 2)."""


class EstimationError(RuntimeError):
    """Failure inside estimation (CLI exit code 3)."""


def _frozen(arr: NDArray) -> NDArray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ObservationTable:
    """Validated complete-case dataset ``O = (W, A, M, Y)``.

    ``w`` is the (already dummy-coded) confounder matrix and ``mediators`` is
    an ``(n, K)`` matrix whose column order is the causal order used by the
    mediator partition.
    """

    y: NDArray
    a: NDArray
    w: NDArray
    mediators: NDArray
    w_names: tuple[str, ...] = ()
    mediator_names: tuple[str, ...] = ()
    outcome_name: str = "y"
    exposure_name: str = "a"

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=float).reshape(-1)
        a = np.asarray(self.a, dtype=float).reshape(-1)
        n = y.shape[0]
        w = np.asarray(self.w, dtype=float).reshape(n, -1) if n else np.zeros((0, 0))
        m = np.asarray(self.mediators, dtype=float)
        if m.ndim == 1:
            m = m.reshape(-1, 1)
        if a.shape[0] != n or w.shape[0] != n or m.shape[0] != n:
            raise ConfigError("all columns must have the same number of rows")
        if m.shape[1] < 1:
            raise ConfigError("at least one mediator is required")
        for name, arr in (("y", y), ("a", a), ("w", w), ("mediators", m)):
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"non-finite or missing values in {name}")
        if np.unique(a).size > 2:
            raise ConfigError("exposure must be binary")
        w_names = tuple(self.w_names) or tuple(f"w{j + 1}" for j in range(w.shape[1]))
        m_names = tuple(self.mediator_names) or tuple(f"m{j + 1}" for j in range(m.shape[1]))
        if len(w_names) != w.shape[1] or len(m_names) != m.shape[1]:
            raise ConfigError("column names do not match matrix widths")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "a", _frozen(a))
        object.__setattr__(self, "w", _frozen(w))
        object.__setattr__(self, "mediators", _frozen(m))
        object.__setattr__(self, "w_names", w_names)
        object.__setattr__(self, "mediator_names", m_names)

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def K(self) -> int:
        return int(self.mediators.shape[1])

    @property
    def y_is_binary(self) -> bool:
        return bool(np.all((self.y == 0.0) | (self.y == 1.0)))

    def mediator_is_binary(self, index: int) -> bool:
        col = self.mediators[:, index]
        return bool(np.all((col == 0.0) | (col == 1.0)))

    def take(self, rows: Sequence[int] | NDArray) -> "ObservationTable":
        rows = np.asarray(rows)
        return ObservationTable(
            y=self.y[rows], a=self.a[rows], w=self.w[rows], mediators=self.mediators[rows],
            w_names=self.w_names, mediator_names=self.mediator_names,
            outcome_name=self.outcome_name, exposure_name=self.exposure_name,
        )

    def with_outcome(self, y: NDArray) -> "ObservationTable":
        return ObservationTable(
            y=y, a=self.a, w=self.w, mediators=self.mediators, w_names=self.w_names,
            mediator_names=self.mediator_names, outcome_name=self.outcome_name,
            exposure_name=self.exposure_name,
        )


@dataclass(frozen=True)
class MediatorPartition:
    """Split of mediator indices into ancestors ``Z``, the target ``M_k`` and descendants ``L``."""

    z_indices: tuple[int, ...]
    k_index: int
    l_indices: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        z = tuple(int(i) for i in self.z_indices)
        l = tuple(int(i) for i in self.l_indices)
        object.__setattr__(self, "z_indices", z)
        object.__setattr__(self, "l_indices", l)
        object.__setattr__(self, "k_index", int(self.k_index))
        members = list(z) + [self.k_index] + list(l)
        if len(set(members)) != len(members):
            raise ConfigError("mediator partition blocks must be disjoint")

    def validate(self, K: int) -> None:
        members = sorted(self.z_indices + (self.k_index,) + self.l_indices)
        if members != list(range(K)):
            raise ConfigError(
                f"mediator partition must cover mediators 0..{K - 1} exactly, got {members}"
            )

    @classmethod
    def all_but(cls, k_index: int, K: int) -> "MediatorPartition":
        return cls(tuple(i for i in range(K) if i != k_index), k_index, ())


@dataclass(frozen=True)
class ArmSpec:
    a_prime: float = 1.0
    a_star: float = 0.0

    def __post_init__(self) -> None:
        if self.a_prime == self.a_star:
            raise ConfigError("a_prime and a_star must differ")

    def validate(self, table: ObservationTable) -> None:
        levels = set(np.unique(table.a).tolist())
        if levels != {float(self.a_prime), float(self.a_star)}:
            raise ConfigError(
                f"exposure levels {sorted(levels)} do not match arms "
                f"(a_prime={self.a_prime}, a_star={self.a_star})"
            )


@dataclass(frozen=True)
class EstimandSpec:
    """Which interventional mean to target.

    ``theta_k_prime`` uses the full partition, ``theta_k`` only ``k_index``
    (every other mediator is treated as ``Z``) and ``theta_all`` ignores it.
    """

    kind: str
    partition: MediatorPartition | None = None
    arms: ArmSpec = field(default_factory=ArmSpec)

    def __post_init__(self) -> None:
        if self.kind not in ESTIMAND_KINDS:
            raise ConfigError(f"unknown estimand kind {self.kind!r}")
        if self.kind != "theta_all" and self.partition is None:
            raise ConfigError(f"{self.kind} requires a mediator partition")

    def effective_partition(self, K: int) -> MediatorPartition | None:
        """Partition actually used by the mediator-shift machinery.

        ``theta_all`` with a single mediator is the ``Z = L = {}`` special
        case of ``theta_k_prime``; with several mediators it returns ``None``.
        """
        if self.kind == "theta_k_prime":
            self.partition.validate(K)
            return self.partition
        if self.kind == "theta_k":
            if not 0 <= self.partition.k_index < K:
                raise ConfigError(f"k_index {self.partition.k_index} out of range")
            return MediatorPartition.all_but(self.partition.k_index, K)
        if K == 1:
            return MediatorPartition((), 0, ())
        return None

    def bind(self, table: ObservationTable) -> MediatorPartition | None:
        """Validate against a table; raises before any estimation work."""
        self.arms.validate(table)
        part = self.effective_partition(table.K)
        if part is not None and not table.mediator_is_binary(part.k_index):
            name = table.mediator_names[part.k_index]
            raise ConfigError(f"mediator {name!r} must be binary for {self.kind}")
        return part


@dataclass(frozen=True)
class CrossFitPlan:
    """Outer fold labels (0-based) plus per-row inner labels for super-learner CV."""

    J: int
    assignments: NDArray
    seed: int
    stratified: bool
    inner_assignments: NDArray | None = None
    inner_folds: int = 5

    def __post_init__(self) -> None:
        object.__setattr__(self, "assignments", _frozen(np.asarray(self.assignments, dtype=int)))
        if self.inner_assignments is not None:
            object.__setattr__(
                self, "inner_assignments", _frozen(np.asarray(self.inner_assignments, dtype=int))
            )

    @property
    def n(self) -> int:
        return int(self.assignments.shape[0])

    def fold_sizes(self) -> NDArray:
        return np.bincount(self.assignments, minlength=self.J)

    def take(self, rows: NDArray) -> "CrossFitPlan":
        inner = None if self.inner_assignments is None else self.inner_assignments[rows]
        return CrossFitPlan(self.J, self.assignments[rows], self.seed, self.stratified, inner,
                            self.inner_folds)


@dataclass(frozen=True)
class PositivityReport:
    min_g: float
    min_r: float
    trunc_bound: float
    n_truncated: int
    min_pa: float = math.nan

    def to_dict(self) -> dict:
        return {"min_g": self.min_g, "min_r": self.min_r, "min_pa": self.min_pa,
                "trunc_bound": self.trunc_bound, "n_truncated": self.n_truncated}


# ---------------------------------------------------------------------------
# loading


def _parse_cell(raw: str, row: int, column: str) -> str:
    value = raw.strip()
    if value.lower() in MISSING_TOKENS:
        raise ConfigError(f"missing value at row {row}, column {column!r}")
    return value


def _to_float(value: str, row: int, column: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(
            f"non-numeric value {value!r} at row {row}, column {column!r}"
        ) from None


def load_table(path: str | Path, schema: Mapping, delimiter: str = ",") -> ObservationTable:
    """Read a CSV file into an :class:`ObservationTable`.

    ``schema`` keys: ``outcome``, ``exposure``, ``confounders`` (list),
    ``mediators`` (list, causal order), optional ``categorical`` (subset of
    confounders). Categorical confounders are dummy coded against their
    lexicographically first level. Rows are numbered from 1 (first data row)
    in error messages.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"data file {str(path)!r} does not exist")
    outcome = schema.get("outcome")
    exposure = schema.get("exposure")
    confounders = list(schema.get("confounders", []))
    mediators = list(schema.get("mediators", []))
    categorical = set(schema.get("categorical", []))
    if not outcome or not exposure:
        raise ConfigError("schema must name an outcome and an exposure column")
    if not mediators:
        raise ConfigError("schema must name at least one mediator column")
    unknown_cat = categorical - set(confounders)
    if unknown_cat:
        raise ConfigError(f"categorical columns {sorted(unknown_cat)} are not confounders")

    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ConfigError("data file is empty") from None
        wanted = [outcome, exposure] + confounders + mediators
        for col in wanted:
            if col not in header:
                raise ConfigError(f"column {col!r} not found in data header")
        pos = {name: header.index(name) for name in wanted}
        cells: dict[str, list[str]] = {name: [] for name in wanted}
        for row_no, record in enumerate(reader, start=1):
            if not record or all(not c.strip() for c in record):
                continue
            if len(record) < len(header):
                record = record + [""] * (len(header) - len(record))
            for name in wanted:
                cells[name].append(_parse_cell(record[pos[name]], row_no, name))

    n = len(cells[outcome])
    if n == 0:
        raise ConfigError("data file has no rows")

    def numeric(name: str) -> NDArray:
        return np.array([_to_float(v, i + 1, name) for i, v in enumerate(cells[name])])

    y = numeric(outcome)
    a = numeric(exposure)
    if np.unique(a).size != 2:
        raise ConfigError("exposure must be binary")

    w_cols: list[NDArray] = []
    w_names: list[str] = []
    for name in confounders:
        if name in categorical:
            levels = sorted(set(cells[name]))
            values = np.array(cells[name])
            for level in levels[1:]:
                w_cols.append((values == level).astype(float))
                w_names.append(f"{name}={level}")
        else:
            w_cols.append(numeric(name))
            w_names.append(name)
    w = np.column_stack(w_cols) if w_cols else np.zeros((n, 0))
    m = np.column_stack([numeric(name) for name in mediators])
    return ObservationTable(
        y=y, a=a, w=w, mediators=m, w_names=tuple(w_names), mediator_names=tuple(mediators),
        outcome_name=outcome, exposure_name=exposure,
    )


def save_table(table: ObservationTable, path: str | Path, delimiter: str = ",") -> None:
    """Write a table so that :func:`load_table` reads it back bit-exactly."""
    header = [table.outcome_name, table.exposure_name, *table.w_names, *table.mediator_names]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(header)
        for i in range(table.n):
            row = [table.y[i], table.a[i], *table.w[i], *table.mediators[i]]
            writer.writerow([repr(float(v)) for v in row])


def table_schema(table: ObservationTable) -> dict:
    """Schema dict matching the layout written by :func:`save_table`."""
    return {
        "outcome": table.outcome_name,
        "exposure": table.exposure_name,
        "confounders": list(table.w_names),
        "mediators": list(table.mediator_names),
    }


# ---------------------------------------------------------------------------
# folds


def default_stratify(table: ObservationTable) -> bool:
    if not table.y_is_binary:
        return False
    prevalence = float(table.y.mean())
    return min(prevalence, 1.0 - prevalence) < 0.2


def partition_folds(
    table: ObservationTable,
    J: int,
    seed: int,
    stratified: bool | None = None,
    inner_folds: int = 5,
) -> CrossFitPlan:
    """Randomly split rows into ``J`` near-equal folds.

    When stratified, each outcome class receives a shuffled round-robin label
    sequence; the round robin continues across classes so overall fold sizes
    also differ by at most one.
    """
    if J < 2:
        raise ConfigError("fold count J must be at least 2")
    n = table.n
    if J > n:
        raise ConfigError(f"fold count J={J} exceeds the number of rows n={n}")
    if stratified is None:
        stratified = default_stratify(table)
    if stratified and not table.y_is_binary:
        raise ConfigError("stratified cross-fitting requires a binary outcome")
    rng = np.random.default_rng(seed)
    labels = np.empty(n, dtype=int)
    if stratified:
        offset = 0
        for cls in (0.0, 1.0):
            idx = np.flatnonzero(table.y == cls)
            if idx.size == 0:
                continue
            if idx.size < J:
                warnings.warn(
                    f"outcome stratum y={cls:g} has {idx.size} rows < J={J}; "
                    "assigning round-robin within the stratum",
                    stacklevel=2,
                )
            seq = (np.arange(idx.size) + offset) % J
            labels[idx] = rng.permutation(seq)
            offset = (offset + idx.size) % J
    else:
        labels[:] = rng.permutation(np.arange(n) % J)
    inner = rng.permutation(np.arange(n) % inner_folds)
    return CrossFitPlan(J=J, assignments=labels, seed=seed, stratified=bool(stratified),
                        inner_assignments=inner, inner_folds=inner_folds)


# ---------------------------------------------------------------------------
# positivity


def positivity_diagnostics(nuisances, trunc_bound: float = DEFAULT_TRUNC) -> PositivityReport:
    """Minima of the raw propensity and mediator probabilities plus a clip count.

    Works on anything exposing ``g_raw`` (P(A=a'|w)) and ``r_raw``
    (P(M_k=1|a',z,w)); ``r_raw`` may be ``None`` (joint-mediator estimands),
    in which case ``pa`` (P(A=a'|m,w)) is checked instead.
    """
    g = np.asarray(nuisances.g_raw, dtype=float)
    min_g = float(min(g.min(), (1.0 - g).min()))
    out = (g < trunc_bound) | (g > 1.0 - trunc_bound)
    n_trunc = int(out.sum())
    r_raw = getattr(nuisances, "r_raw", None)
    if r_raw is not None:
        r = np.asarray(r_raw, dtype=float)
        mk = getattr(nuisances, "mk", None)
        if mk is not None:
            r_obs = np.where(np.asarray(mk) == 1.0, r, 1.0 - r)
        else:
            r_obs = np.minimum(r, 1.0 - r)
        min_r = float(r_obs.min())
        n_trunc += int(((r < trunc_bound) | (r > 1.0 - trunc_bound)).sum())
    else:
        min_r = math.nan
    pa = getattr(nuisances, "pa", None)
    min_pa = math.nan
    if pa is not None:
        # P(A=a'|m,w) is stored after clipping, so count values sitting on the bound
        pa = np.asarray(pa, dtype=float)
        min_pa = float(np.minimum(pa, 1.0 - pa).min())
        n_trunc += int(((pa <= trunc_bound) | (pa >= 1.0 - trunc_bound)).sum())
    return PositivityReport(min_g=min_g, min_r=min_r, trunc_bound=trunc_bound,
                            n_truncated=n_trunc, min_pa=min_pa)
