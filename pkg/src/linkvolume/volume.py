"""Per-link observed counts and stratified AVMT weighting."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import pandas as pd

from .netmodel import FunctionalClass, RoadNetwork, Stratum
from .router import Route

log = logging.getLogger(__name__)

METERS_PER_MILE = 1609.344
BASES = ("count", "vmt")


class MissingStrataError(ValueError):
    def __init__(self, strata: list[Stratum]):
        self.strata = strata
        super().__init__("AVMT table lacks observed strata: " + ", ".join(s.label() for s in strata))


@dataclass
class LinkVolume:
    link_id: int
    observed: int
    weighted: float
    stratum: Stratum
    weight_applied: bool = True
    calibrated: float | None = None


def accumulate(routes: Iterable[Route]) -> Counter:
    """Count, per link, the valid routes that traverse it (once per route)."""
    observed: Counter = Counter()
    for route in routes:
        if route.valid:
            observed.update(set(route.links))
    return observed


def merge_counts(parts: Iterable[Mapping[int, int]]) -> Counter:
    total: Counter = Counter()
    for part in parts:
        total.update(part)
    return total


def stratum_totals(observed: Mapping[int, int], net: RoadNetwork, basis: str = "count") -> dict[Stratum, float]:
    if basis not in BASES:
        raise ValueError(f"basis must be one of {BASES}")
    strata = net.strata()
    totals: dict[Stratum, float] = {}
    for lid, count in sorted(observed.items()):
        if count <= 0:
            continue
        amount = count if basis == "count" else count * net.links[lid].length / METERS_PER_MILE
        totals[strata[lid]] = totals.get(strata[lid], 0.0) + amount
    return totals


def compute_weights(
    observed: Mapping[int, int],
    net: RoadNetwork,
    avmt: Mapping[Stratum, float],
    basis: str = "count",
) -> dict[Stratum, float]:
    """Stratum weight = AVMT / total observed volume in the stratum.

    ``basis="vmt"`` divides by observed vehicle-miles instead, so weighted
    volume times link miles reproduces the AVMT.
    """
    totals = stratum_totals(observed, net, basis)
    missing = sorted(s for s in totals if s not in avmt)
    if missing:
        raise MissingStrataError(missing)
    for stratum in sorted(set(avmt) - set(totals)):
        log.warning("stratum %s has no observations; no weight produced", stratum.label())
    return {s: avmt[s] / total for s, total in sorted(totals.items())}


def apply_weights(
    observed: Mapping[int, int],
    weights: Mapping[Stratum, float],
    net: RoadNetwork,
) -> list[LinkVolume]:
    strata = net.strata()
    out = []
    for lid in net.links:
        s = strata[lid]
        o = int(observed.get(lid, 0))
        w = weights.get(s)
        out.append(LinkVolume(lid, o, 0.0 if w is None else w * o, s, weight_applied=w is not None))
    return out


def stratum_identity(
    volumes: Iterable[LinkVolume],
    net: RoadNetwork,
    avmt: Mapping[Stratum, float],
    basis: str = "count",
) -> dict[Stratum, tuple[float, float, float]]:
    """Per weighted stratum: (reconstructed AVMT, AVMT, relative error)."""
    sums: dict[Stratum, float] = {}
    for lv in volumes:
        if not lv.weight_applied:
            continue
        amount = lv.weighted if basis == "count" else lv.weighted * net.links[lv.link_id].length / METERS_PER_MILE
        sums[lv.stratum] = sums.get(lv.stratum, 0.0) + amount
    out = {}
    for s, total in sorted(sums.items()):
        target = avmt[s]
        rel = abs(total - target) / target if target else abs(total)
        out[s] = (total, target, rel)
    return out


def read_avmt(path: str | Path) -> dict[Stratum, float]:
    df = pd.read_csv(path, dtype={"county": str}, float_precision="round_trip")
    missing = {"county", "urban", "functional_class", "avmt"} - set(df.columns)
    if missing:
        raise ValueError(f"{path}: missing AVMT columns {sorted(missing)}")
    table: dict[Stratum, float] = {}
    for rec in df.to_dict("records"):
        s = Stratum(str(rec["county"]).strip(), bool(int(rec["urban"])), FunctionalClass(str(rec["functional_class"]).strip()))
        if s in table:
            raise ValueError(f"{path}: duplicate AVMT stratum {s.label()}")
        value = float(rec["avmt"])
        if not value >= 0 or math.isinf(value):
            raise ValueError(f"{path}: invalid AVMT {value} for {s.label()}")
        table[s] = value
    return table


def write_avmt(avmt: Mapping[Stratum, float], path: str | Path) -> None:
    rows = [
        {"county": s.county, "urban": int(s.urban), "functional_class": s.functional_class.value, "avmt": repr(float(v))}
        for s, v in sorted(avmt.items())
    ]
    pd.DataFrame(rows, columns=["county", "urban", "functional_class", "avmt"]).to_csv(path, index=False)


def volumes_frame(volumes: Iterable[LinkVolume]) -> pd.DataFrame:
    rows = [
        {
            "link_id": lv.link_id,
            "observed": lv.observed,
            "weighted": lv.weighted,
            "weight_applied": int(lv.weight_applied),
            "calibrated": "" if lv.calibrated is None else lv.calibrated,
            "county": lv.stratum.county,
            "urban": int(lv.stratum.urban),
            "functional_class": lv.stratum.functional_class.value,
        }
        for lv in volumes
    ]
    return pd.DataFrame(
        rows,
        columns=["link_id", "observed", "weighted", "weight_applied", "calibrated", "county", "urban", "functional_class"],
    )


def read_volumes(path: str | Path) -> list[LinkVolume]:
    df = pd.read_csv(path, dtype={"county": str}, keep_default_na=False, float_precision="round_trip")
    out = []
    for rec in df.to_dict("records"):
        cal = rec.get("calibrated", "")
        out.append(
            LinkVolume(
                link_id=int(rec["link_id"]),
                observed=int(rec["observed"]),
                weighted=float(rec["weighted"]),
                stratum=Stratum(str(rec["county"]), bool(int(rec["urban"])), FunctionalClass(rec["functional_class"])),
                weight_applied=bool(int(rec["weight_applied"])),
                calibrated=None if cal == "" else float(cal),
            )
        )
    return out
