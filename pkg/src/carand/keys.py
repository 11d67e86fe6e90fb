"""Addressing of imbalance cells shared by trajectories, summaries and reports.

A cell is (scope, index): scope is "overall", "margin" or "stratum"; index is
() for the two-arm overall, (i, k) for margin (covariate i, level k, 1-based),
(flat,) for a stratum, and gains a leading 1-based treatment for multi-arm
designs. The CSV encoding joins with ";" and prefixes the treatment as "t2".
"""

from __future__ import annotations

from .covariates import CovariateSpec

OVERALL = "overall"
MARGIN = "margin"
STRATUM = "stratum"

CellIndex = tuple[int, ...]
CellKey = tuple[str, CellIndex]


def index_label(scope: str, index: CellIndex, arms: int = 2) -> str:
    parts = list(index)
    prefix = []
    if arms > 2:
        prefix = [f"t{parts.pop(0)}"]
    return ";".join(prefix + [str(p) for p in parts])


def cell_keys(
    spec: CovariateSpec,
    arms: int = 2,
    retained_strata=None,
) -> list[CellKey]:
    """All cells for a design, overall first, then margins, then strata."""
    strata = range(spec.stratum_count) if retained_strata is None else retained_strata
    treatments = [()] if arms == 2 else [(t,) for t in range(1, arms + 1)]
    keys: list[CellKey] = []
    for t in treatments:
        keys.append((OVERALL, t))
    for t in treatments:
        for margin in spec.enumerate_margins():
            keys.append((MARGIN, (*t, *margin)))
    for t in treatments:
        for flat in strata:
            keys.append((STRATUM, (*t, int(flat))))
    return keys
