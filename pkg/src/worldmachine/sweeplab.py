"""Variation sweeps over the indicator training variables, and the paired
impact statistics: mean-difference impact, Wilcoxon signed-rank testing with
divergent-pair exclusion, divergence probabilities, duration impact, and
task correlation.

A variation is a frozenset of active variable names. Undefined statistical
results (empty condition sets, no usable pairs) are returned as None, never
as silent NaN.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from .protocol import MEAN, NoiseSpec, ProtocolConfig, RecallSpec

BINARY_VARIABLES = ("SM_1", "SM_2", "AC_1", "MD_1", "NA_1", "NA_2", "LM_1")
GROUPS = {
    "SB": ("SB_1", "SB_2"),
    "RF": ("RF_1", "RF_2", "RF_3", "RF_4"),
    "RP": ("RP_1", "RP_2", "RP_3", "RP_4"),
}
ALL_VARIABLES = BINARY_VARIABLES + GROUPS["SB"] + GROUPS["RF"] + GROUPS["RP"]
_GROUP_OF = {v: g for g, members in GROUPS.items() for v in members}

_RECALL_PARAMS = {"1": RecallSpec(1, 1), "2": RecallSpec(1, 5), "3": RecallSpec(3, 1), "4": RecallSpec(3, 5)}


def validate_variables(variables) -> frozenset:
    """Canonicalize an indicator set; reject unknown names and group
    conflicts (at most one active variable per exclusive group)."""
    vs = frozenset(variables)
    unknown = sorted(v for v in vs if v not in ALL_VARIABLES)
    if unknown:
        raise ValueError(f"unknown variables {unknown}; valid: {sorted(ALL_VARIABLES)}")
    for group, members in GROUPS.items():
        active = [v for v in vs if v in members]
        if len(active) > 1:
            raise ValueError(f"conflicting indicators {sorted(active)}: only one {group} variable can be active")
    return vs


def enumerate_variations(space=ALL_VARIABLES) -> list:
    """Cartesian product over the variable space honoring group exclusions.
    The empty space yields the single base variation."""
    space = [v for v in ALL_VARIABLES if v in set(space)]
    axes = []
    for group, members in GROUPS.items():
        present = [v for v in members if v in space]
        if present:
            axes.append([None, *present])
    for v in space:
        if v in BINARY_VARIABLES:
            axes.append([None, v])
    variations = []
    for combo in product(*axes):
        variations.append(frozenset(v for v in combo if v))
    return variations


def variation_id(variables) -> str:
    return "+".join(sorted(variables)) if variables else "BASE"


def variables_to_protocol(variables, sensory_masking: bool = True):
    """Indicator set -> (ProtocolConfig, block_configuration), following the
    variable/hyperparameter relation table."""
    vs = validate_variables(variables)
    kw = dict(sensory_masking=sensory_masking)
    if "SB_1" in vs:
        kw.update(n_segment=2)
    if "SB_2" in vs:
        kw.update(n_segment=2, fast_forward=True)
    if "SM_1" in vs:
        kw.update(state_save_method=MEAN)
    if "SM_2" in vs:
        kw.update(check_input_masks=True)
    if "AC_1" in vs:
        kw.update(state_activation="none", state_regularizer="mse")
    if "NA_1" in vs:
        kw.update(noise_state=NoiseSpec())
    if "NA_2" in vs:
        kw.update(noise_measurement=NoiseSpec())
    if "LM_1" in vs:
        kw.update(local_chance=0.25)
    for v in vs:
        if v.startswith("RF_"):
            kw.update(recall_future=_RECALL_PARAMS[v[-1]])
        if v.startswith("RP_"):
            kw.update(recall_past=_RECALL_PARAMS[v[-1]])
    blocks = ("M", "S") if "MD_1" in vs else ("M", "M")
    return ProtocolConfig(**kw), blocks


# -- records -------------------------------------------------------------------


@dataclass
class VariationRecord:
    variation_id: str
    variables: frozenset
    task_metrics: dict = field(default_factory=dict)  # task -> composite MSE
    duration_seconds: float = 0.0
    diverged: bool = False

    def metric(self, key: str) -> float:
        if key == "duration":
            return self.duration_seconds
        return self.task_metrics.get(key, float("nan"))


def apply_divergence_rule(records, tasks=None) -> None:
    """Union the training divergence flag with the metric rule: a variation
    diverges when any task metric is NaN or above three standard deviations
    of that metric across variations (std over non-NaN values)."""
    from .evalsuite import detect_divergence

    if not records:
        return
    if tasks is None:
        tasks = sorted({t for r in records for t in r.task_metrics})
    table = np.array([[r.metric(t) for t in tasks] for r in records], dtype=np.float64)
    flags = detect_divergence(table)
    for r, f in zip(records, flags):
        r.diverged = bool(r.diverged or f)


# -- impact and pairing -----------------------------------------------------------


def impact(records, metric_key: str, variable: str):
    """E[M | A] - E[M | not A] over non-divergent records; None when either
    condition set is empty."""
    usable = [r for r in records if not r.diverged]
    with_a = [r.metric(metric_key) for r in usable if variable in r.variables]
    without = [r.metric(metric_key) for r in usable if variable not in r.variables]
    if not with_a or not without:
        return None
    return float(np.mean(with_a) - np.mean(without))


def find_pairs(records, variable: str) -> list:
    """(without, with) record pairs whose indicator sets differ exactly by
    the variable. Each pair is found once, from its without-side."""
    by_vars = {r.variables: r for r in records}
    pairs = []
    for r in records:
        if variable in r.variables:
            continue
        partner = by_vars.get(r.variables | {variable})
        if partner is not None:
            pairs.append((r, partner))
    return pairs


@dataclass
class WilcoxonResult:
    n_pairs: int
    statistic: float  # sum of positive-difference ranks
    p_value: float


def _exact_two_sided_p(scaled_ranks, w_scaled: int) -> float:
    """Exact null distribution of the rank sum by dynamic programming over
    sign assignments; ranks are pre-scaled to integers (ties double as .5)."""
    total = sum(scaled_ranks)
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in scaled_ranks:
        counts[r:] += counts[: total + 1 - r].copy()
    n_assignments = 2.0 ** len(scaled_ranks)
    p_le = counts[: w_scaled + 1].sum() / n_assignments
    p_ge = counts[w_scaled:].sum() / n_assignments
    return min(1.0, 2.0 * min(p_le, p_ge))


def wilcoxon_test(diffs) -> WilcoxonResult | None:
    """Two-sided Wilcoxon signed-rank test. Zero differences are dropped
    (the original convention); exact p-value for n <= 25, normal
    approximation with tie correction above. None when no usable pairs."""
    d = np.asarray([x for x in diffs if x != 0], dtype=np.float64)
    n = d.size
    if n == 0:
        return None
    order = np.argsort(np.abs(d), kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    sorted_abs = np.abs(d)[order]
    i = 0
    rank_pos = 1
    while i < n:
        j = i
        while j < n and sorted_abs[j] == sorted_abs[i]:
            j += 1
        avg = (rank_pos + rank_pos + (j - i) - 1) / 2.0
        ranks[order[i:j]] = avg
        rank_pos += j - i
        i = j
    w_plus = float(ranks[d > 0].sum())
    if n <= 25:
        scaled = [int(round(2 * r)) for r in ranks]
        p = _exact_two_sided_p(scaled, int(round(2 * w_plus)))
        return WilcoxonResult(n, w_plus, p)
    mean = n * (n + 1) / 4.0
    tie_term = 0.0
    _, tie_counts = np.unique(sorted_abs, return_counts=True)
    for t in tie_counts:
        tie_term += (t**3 - t) / 48.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    if var <= 0:
        return WilcoxonResult(n, w_plus, 1.0)
    z = (w_plus - mean) / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return WilcoxonResult(n, w_plus, min(1.0, p))


def wilcoxon_pairs(records, metric_key: str, variable: str) -> WilcoxonResult | None:
    """Signed-rank test over (with A) - (without A) paired differences;
    pairs containing a divergent member are dropped entirely."""
    diffs = []
    for without, with_a in find_pairs(records, variable):
        if without.diverged or with_a.diverged:
            continue
        diffs.append(with_a.metric(metric_key) - without.metric(metric_key))
    if not diffs:
        return None
    return wilcoxon_test(diffs)


def divergence_probability(records, variable: str, exclude=()) -> float | None:
    """Empirical P(diverge | variable active), optionally conditioning on
    none of the excluded variables being active."""
    exclude = set(exclude)
    pool = [
        r
        for r in records
        if variable in r.variables and not (exclude & r.variables)
    ]
    if not pool:
        return None
    return float(np.mean([r.diverged for r in pool]))


def duration_impact(records, variable: str):
    """Impact of the variable on total epoch duration, with Wilcoxon
    significance over the same pairs."""
    return impact(records, "duration", variable), wilcoxon_pairs(records, "duration", variable)


def correlation_matrix(records, tasks) -> np.ndarray:
    """Pearson correlation between per-task metrics across non-divergent
    variations; zero-variance tasks give NaN entries."""
    usable = [r for r in records if not r.diverged]
    if len(usable) < 3:
        raise ValueError("correlation needs at least 3 non-divergent records")
    data = np.array([[r.metric(t) for t in tasks] for r in usable], dtype=np.float64)
    out = np.full((len(tasks), len(tasks)), np.nan)
    std = data.std(axis=0)
    centered = data - data.mean(axis=0)
    for i in range(len(tasks)):
        for j in range(len(tasks)):
            if std[i] > 0 and std[j] > 0:
                out[i, j] = float((centered[:, i] * centered[:, j]).mean() / (std[i] * std[j]))
    return out


# -- stratified manifest ---------------------------------------------------------------


def _cube(variables):
    out = []
    for bits in product([0, 1], repeat=len(variables)):
        out.append(frozenset(v for v, b in zip(variables, bits) if b))
    return out


def stratified_manifest() -> list:
    """Desk-scale design: 86 variations in three blocks, built so every
    variable participates in at least 8 exact-context Wilcoxon pairs.

    (A 64-variation design cannot satisfy 8 pairs for all 17 variables: the
    four RF options alone need 8 shared contexts times 5 recall layers.)
    """
    nodes = set()
    for ctx in _cube(["SM_1", "SM_2"]):  # RF ladder, doubled by RP_1
        for rf in (None, "RF_1", "RF_2", "RF_3", "RF_4"):
            for rp in (None, "RP_1"):
                nodes.add(frozenset(ctx | {v for v in (rf, rp) if v}))
    for ctx in _cube(["AC_1", "MD_1"]):  # RP_2..4 ladder, doubled by SB_1
        for rp in (None, "RP_2", "RP_3", "RP_4"):
            for sb in (None, "SB_1"):
                nodes.add(frozenset(ctx | {v for v in (rp, sb) if v}))
    for ctx in _cube(["NA_1", "NA_2", "LM_1"]):  # SB_2 ladder
        for sb in (None, "SB_2"):
            nodes.add(frozenset(ctx | ({sb} if sb else set())))
    return sorted(nodes, key=lambda s: (len(s), variation_id(s)))


def count_pairs(variations, variable: str) -> int:
    nodeset = set(variations)
    count = 0
    for s in variations:
        if variable in s:
            continue
        group = _GROUP_OF.get(variable)
        if group and any(w in s for w in GROUPS[group]):
            continue
        if frozenset(s | {variable}) in nodeset:
            count += 1
    return count


# -- manifest files ------------------------------------------------------------------


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_manifest(path, variations, seeds=None) -> None:
    entries = []
    for i, vs in enumerate(variations):
        entry = {"id": variation_id(vs), "variables": sorted(vs)}
        if seeds is not None:
            entry["seed"] = int(seeds[i])
        entries.append(entry)
    Path(path).write_text(canonical_json({"version": 1, "variations": entries}) + "\n")


def read_manifest(path) -> list:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != 1:
        raise ValueError(f"unsupported manifest version {doc.get('version')!r}")
    out = []
    for entry in doc["variations"]:
        vs = validate_variables(entry["variables"])
        out.append({"id": entry.get("id", variation_id(vs)), "variables": vs, "seed": entry.get("seed")})
    return out
