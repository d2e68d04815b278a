"""MPC extraction, simulated-to-measured MPC matching and power RMSE."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .tracer import Pdp


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class Mpc:
    delay: float  # s
    power: float  # dBm
    source: str = "simulated"
    link_id: str = ""


@dataclass(frozen=True)
class MatchParams:
    delay_scale: float = 10e-9  # s
    power_scale: float = 10.0  # dB
    gate_delay: float = 20e-9  # s
    gate_power: float = 25.0  # dB

    @classmethod
    def from_mapping(cls, data: Mapping) -> "MatchParams":
        data = dict(data)
        for key in ("delay_scale", "gate_delay"):
            if f"{key}_ns" in data:
                data[key] = float(data.pop(f"{key}_ns")) * 1e-9
        return cls(**data)

    def to_dict(self) -> dict:
        return {"delay_scale": self.delay_scale, "power_scale": self.power_scale,
                "gate_delay": self.gate_delay, "gate_power": self.gate_power}


@dataclass(frozen=True)
class MatchResult:
    pairs: list[tuple[Mpc, Mpc, float]]
    unmatched_sim: list[Mpc]
    unmatched_meas: list[Mpc]

    @property
    def total_cost(self) -> float:
        return float(sum(c for _, _, c in self.pairs))


@dataclass(frozen=True)
class RmseResult:
    rmse_linear: float  # mW
    rmse_db: float  # 10*log10(rmse_linear); -inf when exact
    rmse_db_domain: float  # RMSE of dB differences
    n: int
    status: str  # "ok" | "exact"

    def to_dict(self) -> dict:
        return {
            "rmse_linear_mw": self.rmse_linear,
            "rmse_db": None if math.isinf(self.rmse_db) else self.rmse_db,
            "rmse_db_domain": self.rmse_db_domain,
            "n_pairs": self.n,
            "status": self.status,
        }


def dbm_to_mw(p):
    return 10.0 ** (np.asarray(p, dtype=float) / 10.0)


def extract_mpcs(pdp: Pdp, dynamic_range: float = 25.0, source: str = "simulated", link_id: str = "") -> list[Mpc]:
    if not dynamic_range > 0:
        raise ValueError("dynamic_range must be positive")
    if len(pdp) == 0:
        return []
    p_dbm = pdp.powers_dbm
    floor = np.max(p_dbm) - dynamic_range
    keep = np.flatnonzero(p_dbm >= floor)
    keep = keep[np.argsort(pdp.delays[keep], kind="stable")]
    return [Mpc(float(pdp.delays[i]), float(p_dbm[i]), source, link_id) for i in keep]


def mpcs_to_pdp(mpcs: Sequence[Mpc]) -> Pdp:
    return Pdp(np.array([m.delay for m in mpcs], dtype=float), dbm_to_mw([m.power for m in mpcs]).reshape(-1))


def match_mpcs(sim: Sequence[Mpc], meas: Sequence[Mpc], params: MatchParams = MatchParams()) -> MatchResult:
    """Optimal one-to-one matching on the gated bipartite graph.

    Among assignments that use only gated edges, the one with the most pairs
    is chosen, and among those the one with minimum total cost
    ``|d_tau| / delay_scale + |d_P| / power_scale``.
    """
    sim, meas = list(sim), list(meas)
    if not sim or not meas:
        return MatchResult([], sim, meas)
    ts = np.array([m.delay for m in sim])
    tm = np.array([m.delay for m in meas])
    ps = np.array([m.power for m in sim])
    pm = np.array([m.power for m in meas])
    dt = np.abs(ts[:, None] - tm[None, :])
    dp = np.abs(ps[:, None] - pm[None, :])
    cost = dt / params.delay_scale + dp / params.power_scale
    feasible = (dt <= params.gate_delay) & (dp <= params.gate_power)
    if not feasible.any():
        return MatchResult([], sim, meas)
    # a penalty above the sum of all feasible costs makes cardinality dominate
    big = float(cost[feasible].sum()) + 1.0
    rows, cols = linear_sum_assignment(np.where(feasible, cost, big))
    ok = feasible[rows, cols]
    rows, cols = rows[ok], cols[ok]
    order = np.argsort(rows)
    rows, cols = rows[order], cols[order]
    pairs = [(sim[i], meas[j], float(cost[i, j])) for i, j in zip(rows, cols)]
    used_s, used_m = set(rows.tolist()), set(cols.tolist())
    return MatchResult(
        pairs,
        [m for i, m in enumerate(sim) if i not in used_s],
        [m for j, m in enumerate(meas) if j not in used_m],
    )


def rmse(pairs: Sequence) -> RmseResult:
    """Linear-power RMSE over matched pairs, with its dB conversion.

    ``pairs`` holds ``(sim, meas)`` Mpc tuples (a trailing cost is ignored)
    or plain ``(p_sim_dbm, p_meas_dbm)`` numbers.
    """
    if len(pairs) == 0:
        raise ValidationError("no matched pairs; RMSE is undefined")
    sim = np.array([p[0].power if isinstance(p[0], Mpc) else p[0] for p in pairs], dtype=float)
    meas = np.array([p[1].power if isinstance(p[1], Mpc) else p[1] for p in pairs], dtype=float)
    diff = dbm_to_mw(sim) - dbm_to_mw(meas)
    lin = float(np.sqrt(np.mean(diff**2)))
    db_dom = float(np.sqrt(np.mean((sim - meas) ** 2)))
    if lin == 0.0:
        return RmseResult(0.0, -math.inf, db_dom, len(pairs), "exact")
    return RmseResult(lin, 10.0 * math.log10(lin), db_dom, len(pairs), "ok")


def _group_stats(values: list[float]) -> dict:
    vals = np.array([v for v in values if v is not None and np.isfinite(v)], dtype=float)
    if not len(vals):
        return {"mean": None, "std": None, "median": None, "n_links": 0}
    return {"mean": float(vals.mean()), "std": float(vals.std()), "median": float(np.median(vals)), "n_links": len(vals)}


@dataclass
class MatchReport:
    pairs: list[tuple[Mpc, Mpc, float]]
    unmatched_sim: list[Mpc]
    unmatched_meas: list[Mpc]
    pooled: RmseResult | None
    per_link: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)

    @property
    def rmse_linear(self) -> float:
        return self.pooled.rmse_linear if self.pooled else math.nan

    @property
    def rmse_db(self) -> float:
        return self.pooled.rmse_db if self.pooled else math.nan

    def to_dict(self) -> dict:
        def mpc(m: Mpc) -> dict:
            return {"link_id": m.link_id, "delay_ns": m.delay * 1e9, "power_dbm": m.power}

        return {
            "pooled": self.pooled.to_dict() if self.pooled else {"status": "no_pairs"},
            "groups": self.groups,
            "per_link": self.per_link,
            "pairs": [{"sim": mpc(s), "meas": mpc(m), "cost": c} for s, m, c in self.pairs],
            "unmatched_sim": [mpc(m) for m in self.unmatched_sim],
            "unmatched_meas": [mpc(m) for m in self.unmatched_meas],
        }


def compare_runs(
    sim_pdps: Mapping[str, Pdp],
    meas_pdps: Mapping[str, Pdp],
    params: MatchParams = MatchParams(),
    dynamic_range: float = 25.0,
    scenarios: Mapping[str, str] | None = None,
) -> MatchReport:
    """Per-link extract and match, pooled RMSE and LOS/NLOS/overall breakdowns.

    Link scenarios come from ``scenarios`` or the PDP metadata ``scenario``.
    """
    sim_keys, meas_keys = set(sim_pdps), set(meas_pdps)
    if sim_keys != meas_keys:
        only_sim = sorted(sim_keys - meas_keys)
        only_meas = sorted(meas_keys - sim_keys)
        raise ValidationError(f"link sets differ: only simulated {only_sim}, only measured {only_meas}")
    scenarios = dict(scenarios or {})
    all_pairs, un_s, un_m = [], [], []
    per_link = {}
    for link in sorted(sim_keys):
        s = extract_mpcs(sim_pdps[link], dynamic_range, "simulated", link)
        m = extract_mpcs(meas_pdps[link], dynamic_range, "measured", link)
        res = match_mpcs(s, m, params)
        all_pairs += res.pairs
        un_s += res.unmatched_sim
        un_m += res.unmatched_meas
        scen = scenarios.get(link) or sim_pdps[link].metadata.get("scenario") or meas_pdps[link].metadata.get("scenario") or "unknown"
        entry = {"scenario": scen, "n_sim": len(s), "n_meas": len(m), "n_pairs": len(res.pairs)}
        if res.pairs:
            entry.update(rmse(res.pairs).to_dict())
        else:
            entry["status"] = "no_pairs"
        per_link[link] = entry

    pooled = rmse(all_pairs) if all_pairs else None
    groups = {}
    for name in ("LOS", "NLOS", "Overall"):
        links = [k for k, e in per_link.items() if name == "Overall" or e["scenario"].upper() == name]
        pairs = [p for p in all_pairs if p[0].link_id in links]
        groups[name] = {
            "links": links,
            "pooled": rmse(pairs).to_dict() if pairs else {"status": "no_pairs"},
            "rmse_db_domain": _group_stats([per_link[k].get("rmse_db_domain") for k in links]),
            "rmse_db": _group_stats([per_link[k].get("rmse_db") for k in links]),
        }
    return MatchReport(all_pairs, un_s, un_m, pooled, per_link, groups)


# --------------------------------------------------------------------------
# PDP CSV files: "# key=value" header lines, then link_id,delay_ns,power_dbm rows


def write_pdp_csv(path: str | Path, link_id: str, pdp: Pdp, freq: float, scenario: str = "unknown") -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# freq_hz={freq!r}\n# scenario={scenario}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["link_id", "delay_ns", "power_dbm"])
        for d, p in zip(pdp.delays, pdp.powers_dbm):
            w.writerow([link_id, repr(float(d) * 1e9), repr(float(p))])


def read_pdp_csv(path: str | Path) -> dict[str, Pdp]:
    meta: dict = {}
    rows = []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                for tok in line[1:].split(","):
                    if "=" in tok:
                        k, v = tok.split("=", 1)
                        meta[k.strip()] = v.strip()
            elif line.strip():
                rows.append(line)
    if "freq_hz" in meta:
        meta["freq_hz"] = float(meta["freq_hz"])
    out: dict[str, list] = {}
    for row in csv.DictReader(rows):
        out.setdefault(row["link_id"], []).append((float(row["delay_ns"]) * 1e-9, float(row["power_dbm"])))
    result = {}
    for link, entries in out.items():
        d = np.array([e[0] for e in entries])
        p = dbm_to_mw([e[1] for e in entries]).reshape(-1)
        order = np.argsort(d, kind="stable")
        result[link] = Pdp(d[order], p[order], dict(meta, link_id=link))
    return result


def read_pdp_dir(path: str | Path) -> dict[str, Pdp]:
    path = Path(path)
    files = [path] if path.is_file() else sorted(path.glob("*.csv"))
    out: dict[str, Pdp] = {}
    for f in files:
        for link, pdp in read_pdp_csv(f).items():
            if link in out:
                raise ValidationError(f"link {link!r} appears in more than one PDP file")
            out[link] = pdp
    return out
