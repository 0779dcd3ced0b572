"""Scoring a complexity measure against observed generalization over a zoo.

The conditional-mutual-information score works on model pairs.  For a pair
``(i, j)`` let ``V_mu = sign(phi_i - phi_j)`` and ``V_g = sign(g_i - g_j)``.
Pairs with a zero sign are discarded.  Each remaining pair is counted in both
orientations so the estimate does not depend on the order of the zoo.  For a
set ``S`` of hyperparameter axes, pairs are grouped by the unordered pair of
the two models' values on ``S``, and

    I(V_mu; V_g | S) / H(V_g | S)

is computed with plug-in probabilities and base-2 logarithms.  The score is
the minimum over all ``S`` of size ``k``.
"""
from __future__ import annotations

import itertools
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

FORMAT_VERSION = 1
MIN_GROUP_PAIRS = 2
SIGN_CONVENTION = ("phi is <= 0; a more negative phi predicts a larger gap "
                   "(gap = train_accuracy - test_accuracy)")


class EvaluationError(ValueError):
    pass


@dataclass
class ZooEntry:
    model_id: str
    hyperparameters: dict
    train_accuracy: float
    test_accuracy: float
    metric_value: float = 0.0

    def __post_init__(self):
        for name in ("train_accuracy", "test_accuracy"):
            v = float(getattr(self, name))
            if not 0.0 <= v <= 1.0:
                raise EvaluationError(f"{self.model_id}: {name} must be in [0, 1], got {v}")
            setattr(self, name, v)
        self.metric_value = float(self.metric_value)

    @property
    def gap(self) -> float:
        return generalization_gap(self)


@dataclass
class CmiScore:
    score: float
    k: int
    per_subset: dict
    n_pairs_used: int
    ties_discarded: int
    groups_dropped: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"score": self.score, "k": self.k, "per_subset": dict(self.per_subset),
                "n_pairs_used": self.n_pairs_used, "ties_discarded": self.ties_discarded,
                "groups_dropped": dict(self.groups_dropped)}


def generalization_gap(entry: ZooEntry) -> float:
    return entry.train_accuracy - entry.test_accuracy


def kendall_tau(metric, gap) -> float:
    """Kendall's tau-b; NaN when either sequence is constant."""
    metric = np.asarray(metric, dtype=np.float64)
    gap = np.asarray(gap, dtype=np.float64)
    if metric.shape != gap.shape or metric.ndim != 1:
        raise EvaluationError(f"length mismatch: {metric.shape} vs {gap.shape}")
    if metric.size < 2:
        raise EvaluationError("kendall_tau needs at least two values")
    return float(stats.kendalltau(metric, gap, variant="b").statistic)


def _axes(zoo) -> list[str]:
    axes = list(zoo[0].hyperparameters)
    for e in zoo:
        if set(e.hyperparameters) != set(axes):
            raise EvaluationError(
                f"{e.model_id}: hyperparameter axes {sorted(e.hyperparameters)} differ from {sorted(axes)}")
    return axes


def _plugin_terms(counts: dict) -> tuple[float, float, int]:
    """Mutual information and entropy of ``V_g`` for one 2x2 table, in bits."""
    n = sum(counts.values())
    pa = defaultdict(float)
    pb = defaultdict(float)
    for (a, b), c in counts.items():
        pa[a] += c / n
        pb[b] += c / n
    mi = 0.0
    for (a, b), c in counts.items():
        if c:
            pab = c / n
            mi += pab * math.log2(pab / (pa[a] * pb[b]))
    h = -sum(p * math.log2(p) for p in pb.values() if p > 0)
    return mi, h, n


def _sign(x: float) -> int:
    return (x > 0) - (x < 0)


def cmi_score(zoo, k: int = 2, axes=None) -> CmiScore:
    zoo = list(zoo)
    if len(zoo) < 2:
        raise EvaluationError("cmi_score needs at least two zoo entries")
    axes = list(axes) if axes is not None else _axes(zoo)
    if k < 0 or k >= max(len(axes), 1):
        raise EvaluationError(f"conditioning size k={k} must be below the number of axes ({len(axes)})")

    pairs = []
    ties = 0
    for i, j in itertools.combinations(range(len(zoo)), 2):
        vm = _sign(zoo[i].metric_value - zoo[j].metric_value)
        vg = _sign(zoo[i].gap - zoo[j].gap)
        if vm == 0 or vg == 0:
            ties += 1
            continue
        pairs.append((i, j, vm, vg))

    per_subset = {}
    dropped = {}
    for subset in itertools.combinations(axes, k):
        groups = defaultdict(list)
        for i, j, vm, vg in pairs:
            ti = tuple(zoo[i].hyperparameters[a] for a in subset)
            tj = tuple(zoo[j].hyperparameters[a] for a in subset)
            groups[tuple(sorted((ti, tj), key=repr))].append((vm, vg))
        total = 0
        terms = []
        n_dropped = 0
        for members in groups.values():
            if len(members) < MIN_GROUP_PAIRS:
                n_dropped += 1
                continue
            counts = defaultdict(int)
            for vm, vg in members:
                counts[(vm, vg)] += 1
                counts[(-vm, -vg)] += 1
            terms.append(_plugin_terms(counts))
            total += 2 * len(members)
        name = ",".join(subset)
        dropped[name] = n_dropped
        if not terms:
            continue
        mi = sum(n / total * m for m, _, n in terms)
        h = sum(n / total * e for _, e, n in terms)
        value = mi / h if h > 0 else 0.0
        per_subset[name] = min(max(value, 0.0), 1.0)
    if not per_subset:
        raise EvaluationError("every conditioning group has fewer than "
                              f"{MIN_GROUP_PAIRS} usable pairs; nothing to estimate")
    return CmiScore(min(per_subset.values()), k, per_subset, len(pairs), ties, dropped)


def _load_reports(reports) -> dict:
    if isinstance(reports, dict):
        return reports
    from .metric import MetricReport
    out = {}
    for p in sorted(Path(reports).glob("*.json")):
        d = json.loads(p.read_text())
        rep = MetricReport.from_dict(d)
        out[rep.model_id or p.stem] = rep
    return out


def _metric_value(report) -> float:
    if isinstance(report, (int, float)):
        return float(report)
    return float(report.phi_per_sample)


def evaluate_zoo(manifest, reports, k: int = 2) -> dict:
    """Join metric reports to a zoo manifest and score them.

    ``manifest`` is a :class:`~genaug.zoo.ZooManifest` or a path to one;
    ``reports`` maps model ids to :class:`~genaug.metric.MetricReport` (or
    plain metric values), or names a directory of report JSON files.
    """
    from .zoo import ZooManifest, load_manifest
    if not isinstance(manifest, ZooManifest):
        manifest = load_manifest(manifest, check_paths=False)
    reports = _load_reports(reports)
    seen = set()
    zoo = []
    for e in manifest.entries:
        if e.model_id in seen:
            raise EvaluationError(f"duplicate model_id {e.model_id!r} in manifest")
        seen.add(e.model_id)
        if e.model_id not in reports:
            raise EvaluationError(f"no metric report for model_id {e.model_id!r}")
        zoo.append(ZooEntry(e.model_id, dict(e.hparams), e.train_acc, e.test_acc,
                            _metric_value(reports[e.model_id])))
    if len(zoo) < 2:
        raise EvaluationError("a zoo needs at least two models")
    phi = [z.metric_value for z in zoo]
    gaps = [z.gap for z in zoo]
    tau = kendall_tau(phi, gaps)
    try:
        cmi = cmi_score(zoo, k, manifest.axes).to_dict()
    except EvaluationError as exc:
        cmi = {"score": None, "k": k, "per_subset": {}, "error": str(exc)}
    n_pairs = len(zoo) * (len(zoo) - 1) // 2
    ties = sum(1 for i, j in itertools.combinations(range(len(zoo)), 2)
               if phi[i] == phi[j] or gaps[i] == gaps[j])
    return {
        "format_version": FORMAT_VERSION,
        "cmi": cmi,
        "kendall_tau": None if math.isnan(tau) else tau,
        "n_models": len(zoo),
        "n_pairs": n_pairs,
        "n_pairs_used": n_pairs - ties,
        "ties_discarded": ties,
        "metric_field": "phi_per_sample",
        "sign_convention": SIGN_CONVENTION,
        "gap_table": [
            {"model_id": z.model_id, "hparams": z.hyperparameters,
             "train_acc": z.train_accuracy, "test_acc": z.test_accuracy,
             "gap": z.gap, "phi": z.metric_value}
            for z in zoo
        ],
    }
