"""Per-class margin-offset calculation from label statistics.

The offsets follow the optimal-allocation rule: rho_0k = tau * sqrt(N-N_k)/N_k
penalizes background pixels scored as class k, and rho_k0 = mu_k * rho_0k
penalizes class-k pixels scored as background, with

    mu_k = P_k * sqrt(N_k) / (upsilon*(N-N_k) - P_k*sqrt(N-N_k)).

Minority classes therefore receive large rho_0k, and the pairwise ratios
rho_0i/rho_0j = (N_j/N_i) * sqrt(N-N_i)/sqrt(N-N_j) minimize the associated
generalization-gap bound (see the bound module).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateError, FormatError, StatsError
from .segdata import LabelStats

DEFAULT_TAU = 10.0
DEFAULT_UPSILON = 1.0

#: relative tolerance for the structural invariant rho_k0 == mu_k * rho_0k
MU_CONSISTENCY_RTOL = 1e-12
#: relative tolerance for the optimal-ratio check
RATIO_RTOL = 1e-10


@dataclass
class MarginOffsets:
    """Per-class margin-offsets plus the hyper-parameters that produced them.

    ``corollary_ok`` is False when the offsets were loaded from a hand-edited
    file that no longer satisfies the optimal pairwise ratios; such overrides
    are allowed for ablation experiments.
    """

    rho_0k: np.ndarray
    rho_k0: np.ndarray
    mu_k: np.ndarray
    tau: float
    upsilon: float
    corollary_ok: bool = True

    def __post_init__(self) -> None:
        self.rho_0k = np.asarray(self.rho_0k, dtype=np.float64)
        self.rho_k0 = np.asarray(self.rho_k0, dtype=np.float64)
        self.mu_k = np.asarray(self.mu_k, dtype=np.float64)
        if not (self.rho_0k.shape == self.rho_k0.shape == self.mu_k.shape):
            raise ConfigError("margin-offset arrays must share one shape")
        for name, arr in (("rho_0k", self.rho_0k), ("rho_k0", self.rho_k0)):
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name} contains non-finite values")
            if np.any(arr <= 0):
                raise ConfigError(f"{name} must be strictly positive")
        rel = np.abs(self.rho_k0 - self.mu_k * self.rho_0k) / np.abs(self.rho_k0)
        if np.max(rel) > MU_CONSISTENCY_RTOL:
            raise ConfigError("rho_k0 != mu_k * rho_0k beyond tolerance")

    @property
    def k_classes(self) -> int:
        return self.rho_0k.size

    @property
    def rho_max(self) -> float:
        return float(max(self.rho_0k.max(), self.rho_k0.max()))


def compute_margins(
    stats: LabelStats,
    tau: float = DEFAULT_TAU,
    upsilon: float = DEFAULT_UPSILON,
) -> MarginOffsets:
    """Compute per-class margin-offsets from exact label statistics.

    Raises when a class is empty, when the dataset is single-class (the
    offsets degenerate to zero), or when upsilon is too small to keep every
    mu_k denominator positive.
    """
    if tau <= 0 or upsilon <= 0:
        raise ConfigError("tau and upsilon must be positive")
    n = float(stats.n_total)
    n_k = stats.n_per_class.astype(np.float64)
    if np.any(n_k < 1):
        empty = int(np.flatnonzero(n_k < 1)[0])
        raise StatsError(f"empty class {empty}: margin-offsets need N_k >= 1")
    if np.any(n_k == n):
        full = int(np.flatnonzero(n_k == n)[0])
        raise DegenerateError(
            f"class {full} owns every pixel; sqrt(N-N_k)=0 makes rho_0k=0"
        )
    p_k = n_k / n
    rest = np.sqrt(n - n_k)
    mu_den = upsilon * (n - n_k) - p_k * rest
    if np.any(mu_den <= 0):
        upsilon_min = float(np.max(p_k / rest))
        raise ConfigError(
            f"mu underflow: upsilon={upsilon:g} makes a mu_k denominator "
            f"non-positive; use upsilon > {upsilon_min:.6g}"
        )
    mu_k = p_k * np.sqrt(n_k) / mu_den
    rho_0k = tau * rest / n_k
    rho_k0 = mu_k * rho_0k
    return MarginOffsets(rho_0k=rho_0k, rho_k0=rho_k0, mu_k=mu_k, tau=tau, upsilon=upsilon)


def verify_corollary_ratios(
    m: MarginOffsets, stats: LabelStats, rtol: float = RATIO_RTOL
) -> tuple[bool, float]:
    """Check the optimal-allocation ratio conditions; return (ok, worst deviation).

    Two families are verified: rho_0i/rho_0j against the closed-form count
    ratio for every class pair, and rho_k0/rho_0k against mu_k.
    """
    if m.k_classes != stats.k_classes:
        raise ConfigError("margins and stats disagree on the number of classes")
    n = float(stats.n_total)
    n_k = stats.n_per_class.astype(np.float64)
    weight = np.sqrt(n - n_k) / n_k  # rho_0k is proportional to this
    actual = m.rho_0k[:, None] / m.rho_0k[None, :]
    expected = weight[:, None] / weight[None, :]
    dev_pairs = float(np.max(np.abs(actual / expected - 1.0)))
    dev_mu = float(np.max(np.abs(m.rho_k0 / (m.mu_k * m.rho_0k) - 1.0)))
    worst = max(dev_pairs, dev_mu)
    return worst <= rtol, worst


# ---------------------------------------------------------------------------
# CSV persistence
# ---------------------------------------------------------------------------

MARGINS_CSV_HEADER = ["class_index", "n_pixels", "p_k", "mu_k", "rho_0k", "rho_k0"]


def write_margins_csv(m: MarginOffsets, stats: LabelStats, path) -> None:
    if m.k_classes != stats.k_classes:
        raise ConfigError("margins and stats disagree on the number of classes")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MARGINS_CSV_HEADER)
        for k in range(m.k_classes):
            writer.writerow(
                [
                    k,
                    int(stats.n_per_class[k]),
                    f"{stats.p_per_class[k]:.12g}",
                    f"{m.mu_k[k]:.12g}",
                    f"{m.rho_0k[k]:.12g}",
                    f"{m.rho_k0[k]:.12g}",
                ]
            )


def _recover_scalar(per_class: np.ndarray) -> float:
    """Collapse per-class hyper-parameter estimates; NaN when they disagree."""
    ref = float(np.mean(per_class))
    if ref <= 0 or not math.isfinite(ref):
        return math.nan
    if np.max(np.abs(per_class - ref)) > 1e-9 * abs(ref):
        return math.nan
    return ref


def read_margins_csv(path, with_stats: bool = False):
    """Load margin-offsets (and optionally the embedded stats) from CSV.

    Structural invariants (positivity, finiteness, rho_k0 = mu_k*rho_0k) are
    hard errors.  A violated optimal-ratio condition only clears the
    ``corollary_ok`` flag so hand-edited allocations stay loadable.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != MARGINS_CSV_HEADER:
        raise FormatError(f"margins CSV header mismatch: {rows[0] if rows else 'empty'}")
    counts, mu, rho_0k, rho_k0 = [], [], [], []
    for row in rows[1:]:
        if len(row) != 6:
            raise FormatError(f"margins CSV row has {len(row)} fields, expected 6")
        if int(row[0]) != len(counts):
            raise FormatError(f"margins CSV class indices out of order at {row[0]}")
        counts.append(int(row[1]))
        mu.append(float(row[3]))
        rho_0k.append(float(row[4]))
        rho_k0.append(float(row[5]))
    mu = np.asarray(mu)
    rho_0k = np.asarray(rho_0k)
    rho_k0 = np.asarray(rho_k0)
    for name, arr in (("mu_k", mu), ("rho_0k", rho_0k), ("rho_k0", rho_k0)):
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"margins CSV column {name} contains non-finite values")
    if np.any(rho_0k <= 0) or np.any(rho_k0 <= 0):
        raise FormatError("margins CSV violates a structural invariant: "
                          "offsets must be strictly positive")
    # the file stores 12 significant digits, so the stored mu_k can miss
    # rho_k0/rho_0k by a few 1e-12; validate at format precision, then snap
    ratio = rho_k0 / rho_0k
    if np.max(np.abs(mu / ratio - 1.0)) > 1e-9:
        raise FormatError(
            "margins CSV violates a structural invariant: mu_k != rho_k0/rho_0k"
        )
    mu = ratio
    stats = LabelStats.from_counts(counts)
    n = float(stats.n_total)
    n_k = stats.n_per_class.astype(np.float64)
    rest = np.sqrt(n - n_k)
    tau = _recover_scalar(rho_0k * n_k / rest)
    with np.errstate(divide="ignore", invalid="ignore"):
        upsilon = _recover_scalar(
            (stats.p_per_class * np.sqrt(n_k) / mu + stats.p_per_class * rest) / (n - n_k)
        )
    try:
        margins = MarginOffsets(
            rho_0k=rho_0k, rho_k0=rho_k0, mu_k=mu, tau=tau, upsilon=upsilon
        )
    except ConfigError as exc:
        raise FormatError(f"margins CSV violates a structural invariant: {exc}") from exc
    ok, _ = verify_corollary_ratios(margins, stats)
    margins.corollary_ok = ok
    if with_stats:
        return margins, stats
    return margins
