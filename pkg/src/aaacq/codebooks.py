"""Activation-aware adaptive codebook learning (the AAAC method).

Per layer, two scalar reconstruction tables are learned from the normalized
weight distribution and per-column activation importance.  Learning
alternates a per-group table assignment (each group of `sel_size` weights
picks the table with lower importance-weighted reconstruction error) with
importance-weighted scalar k-means refinement of each table.  Final tables
are rounded to BF16, the assignment is recomputed, and codes are emitted as
nearest-entry indices under each group's selected table.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import LayoutError, UnsupportedConfigError, ValidationError
from .grids import SCALE_MODES, BaseFormat, compute_scales, round_bf16
from .quantizers import expand_groups, normalize, recon_codes
from .tensors import LayerBundle


@dataclass(frozen=True)
class AaacConfig:
    """Layout and iteration parameters for one learning run.

    The selection group size must divide the scale group size (a selection
    group never spans two scales), both must divide the layer's column count,
    and selection groups coarser than scale groups are not supported.
    """

    fmt: BaseFormat
    group_size: int
    sel_size: int
    n_outer: int = 3
    n_inner: int = 10
    scale_mode: str = "exact-bf16"

    def __post_init__(self):
        if self.sel_size > self.group_size:
            raise UnsupportedConfigError(
                f"selection group size {self.sel_size} exceeds scale group size "
                f"{self.group_size}; the packed layout stores selection bits in "
                "scale signs or finer-grained bitsets only"
            )
        if self.group_size % self.sel_size != 0:
            raise ValidationError(
                f"selection group size {self.sel_size} must divide "
                f"scale group size {self.group_size}"
            )
        if self.n_outer < 1 or self.n_inner < 1:
            raise ValidationError("iteration counts must be at least 1")
        if self.scale_mode not in SCALE_MODES:
            raise ValidationError(
                f"unknown scale mode {self.scale_mode!r}; supported: {list(SCALE_MODES)}"
            )

    @classmethod
    def for_format(cls, fmt: BaseFormat, **overrides) -> "AaacConfig":
        g = overrides.pop("group_size", fmt.group_size)
        s = overrides.pop("sel_size", g)
        return cls(fmt=fmt, group_size=g, sel_size=s, **overrides)

    def check_layout(self, cols: int) -> None:
        if cols % self.group_size != 0:
            raise LayoutError(
                f"column count {cols} is not divisible by scale group size {self.group_size}"
            )
        if cols % self.sel_size != 0:
            raise LayoutError(
                f"column count {cols} is not divisible by selection group size {self.sel_size}"
            )


@dataclass(frozen=True)
class LearnResult:
    """Everything a packed layer needs, plus the optimization trace."""

    table0: np.ndarray      # float32, BF16 values, non-decreasing
    table1: np.ndarray
    selection: np.ndarray   # uint8, (rows, cols / sel_size)
    codes: np.ndarray       # uint8, (rows, cols)
    scales: np.ndarray      # float32, (rows, cols / group_size)
    trace: np.ndarray = field(repr=False)  # float64 objective after each step


def importance(activations: np.ndarray) -> np.ndarray:
    """Per-column importance: the sum of squared calibration activations.

    Accumulates in float64 over the sorted squares, so the result is exactly
    invariant to the order of the calibration tokens.
    """
    x = np.asarray(activations, dtype=np.float64)
    return np.sort(x * x, axis=0).sum(axis=0)


def weighted_error(
    weights: np.ndarray, reconstructed: np.ndarray, col_importance: np.ndarray
) -> float:
    """Importance-weighted squared reconstruction error in weight units."""
    d = np.asarray(weights, dtype=np.float64) - np.asarray(reconstructed, dtype=np.float64)
    return float((d * d * np.asarray(col_importance, dtype=np.float64)).sum())


def init_tables(w_norm, table_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Quantile initialization of the two tables.

    Table 0 takes evenly spaced quantiles spanning the full range of the
    normalized weights; table 1 starts half a quantile step later and still
    ends at the maximum, giving distinct but nearby starting grids.
    Quantiles interpolate linearly between order statistics.
    """
    w = np.asarray(w_norm, dtype=np.float64).ravel()
    if w.size == 0:
        raise ValidationError("cannot initialize tables from an empty weight set")
    if table_size < 2:
        raise ValidationError("table size must be at least 2")
    steps = np.arange(table_size) / (table_size - 1)
    t0 = np.quantile(w, steps)
    delta = 1.0 / (2 * (table_size - 1))
    t1 = np.quantile(w, delta + (1.0 - delta) * steps)
    return t0, t1


def _group_errors(w_norm, col_importance, table0, table1, sel_size):
    """Weighted and unweighted per-group squared errors under both tables."""
    n, k = w_norm.shape
    se0 = (w_norm - np.asarray(table0, dtype=np.float64)[recon_codes(table0, w_norm)]) ** 2
    se1 = (w_norm - np.asarray(table1, dtype=np.float64)[recon_codes(table1, w_norm)]) ** 2
    shape = (n, k // sel_size, sel_size)
    i_row = np.asarray(col_importance, dtype=np.float64)
    e0w = (se0 * i_row).reshape(shape).sum(axis=2)
    e1w = (se1 * i_row).reshape(shape).sum(axis=2)
    e0u = se0.reshape(shape).sum(axis=2)
    e1u = se1.reshape(shape).sum(axis=2)
    return e0w, e1w, e0u, e1u


def _decide(e0w, e1w, e0u, e1u, col_importance, sel_size):
    # Ties keep table 0.  Groups whose columns carry zero total importance
    # fall back to the unweighted comparison.
    i_groups = np.asarray(col_importance, dtype=np.float64).reshape(-1, sel_size).sum(axis=1)
    dead = i_groups == 0
    sigma = np.where(dead[np.newaxis, :], e1u < e0u, e1w < e0w)
    return sigma.astype(np.uint8)


def select_tables(w_norm, col_importance, table0, table1, sel_size: int) -> np.ndarray:
    """Per selection group, the table with lower weighted reconstruction error.

    Returns one bit per group of `sel_size` contiguous in-row weights; ties
    select table 0.
    """
    w = np.asarray(w_norm, dtype=np.float64)
    if w.shape[1] % sel_size != 0:
        raise LayoutError(
            f"column count {w.shape[1]} is not divisible by selection group size {sel_size}"
        )
    e0w, e1w, e0u, e1u = _group_errors(w, col_importance, table0, table1, sel_size)
    return _decide(e0w, e1w, e0u, e1u, col_importance, sel_size)


def _lloyd_step(table, values, weights, codes):
    """One weighted centroid update; cells with zero total weight keep their entry."""
    m = table.size
    num = np.bincount(codes, weights=weights * values, minlength=m)
    den = np.bincount(codes, weights=weights, minlength=m)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), table)


def kmeans_update(table, values, weights, n_inner: int) -> np.ndarray:
    """Importance-weighted scalar k-means on a multiset of (value, weight) pairs.

    Runs `n_inner` Lloyd iterations, assigning each member to its nearest
    entry (ties toward the lower index) and moving each entry to the weighted
    centroid of its cell.  Entries with empty or zero-weight cells are kept.
    The returned table is sorted ascending.
    """
    t = np.asarray(table, dtype=np.float64).copy()
    v = np.asarray(values, dtype=np.float64).ravel()
    w = np.asarray(weights, dtype=np.float64).ravel()
    for _ in range(n_inner):
        t = _lloyd_step(t, v, w, recon_codes(t, v))
    return np.sort(t)


def _cell_error(table, values, weights, codes):
    d = values - np.asarray(table, dtype=np.float64)[codes]
    return float((weights * d * d).sum())


def learn(
    bundle: LayerBundle,
    cfg: AaacConfig,
    col_importance: np.ndarray | None = None,
) -> LearnResult:
    """Learn two codebooks, the per-group selection, and the codes for a layer.

    Steps: compute group scales, normalize, compute activation importance
    (unit importance when no activations are available or when every column
    has zero importance), initialize both tables from quantiles, then
    alternate assignment and per-table weighted k-means for `cfg.n_outer`
    rounds.  The tables are then rounded to BF16, the selection recomputed,
    and codes emitted under each group's selected table.

    The trace records the importance-weighted objective on normalized weights
    after the assignment step and after every inner k-means iteration; it is
    non-increasing until the final BF16 rounding, which is not recorded.

    `col_importance` overrides the activation-derived importance when given.
    """
    cfg.check_layout(bundle.cols)
    w = bundle.weights
    n, k = w.shape
    table_size = cfg.fmt.table_size

    scales = compute_scales(w, cfg.fmt, cfg.group_size, cfg.scale_mode)
    w_norm = normalize(w, scales, cfg.group_size)

    if col_importance is not None:
        imp = np.asarray(col_importance, dtype=np.float64)
        if imp.shape != (k,):
            raise ValidationError(f"importance must have shape ({k},), got {imp.shape}")
        if (imp < 0).any() or not np.isfinite(imp).all():
            raise ValidationError("importance values must be finite and non-negative")
    elif bundle.activations is not None:
        imp = importance(bundle.activations)
    else:
        imp = np.ones(k, dtype=np.float64)
    if not imp.any():
        imp = np.ones(k, dtype=np.float64)

    t0, t1 = init_tables(w_norm, table_size)
    imp_wide = np.broadcast_to(imp, (n, k))
    trace = []

    for _ in range(cfg.n_outer):
        e0w, e1w, e0u, e1u = _group_errors(w_norm, imp, t0, t1, cfg.sel_size)
        sigma = _decide(e0w, e1w, e0u, e1u, imp, cfg.sel_size)
        trace.append(float(np.where(sigma, e1w, e0w).sum()))

        member1 = expand_groups(sigma, cfg.sel_size).astype(bool)
        v0, i0 = w_norm[~member1], imp_wide[~member1]
        v1, i1 = w_norm[member1], imp_wide[member1]
        codes0 = recon_codes(t0, v0)
        codes1 = recon_codes(t1, v1)
        for _ in range(cfg.n_inner):
            t0 = _lloyd_step(t0, v0, i0, codes0)
            t1 = _lloyd_step(t1, v1, i1, codes1)
            codes0 = recon_codes(t0, v0)
            codes1 = recon_codes(t1, v1)
            trace.append(
                _cell_error(t0, v0, i0, codes0) + _cell_error(t1, v1, i1, codes1)
            )
        t0 = np.sort(t0)
        t1 = np.sort(t1)

    t0 = round_bf16(t0).astype(np.float32)
    t1 = round_bf16(t1).astype(np.float32)
    sigma = select_tables(w_norm, imp, t0, t1, cfg.sel_size)
    member1 = expand_groups(sigma, cfg.sel_size).astype(bool)
    codes = np.where(member1, recon_codes(t1, w_norm), recon_codes(t0, w_norm))
    return LearnResult(
        table0=t0,
        table1=t1,
        selection=sigma,
        codes=codes.astype(np.uint8),
        scales=scales,
        trace=np.asarray(trace, dtype=np.float64),
    )
