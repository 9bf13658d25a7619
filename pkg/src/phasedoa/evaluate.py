"""Frame-level accuracy, averaged posteriors and the CNN vs SRP-PHAT experiment runner."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cnn
from .srp import SteeringTable, normalize_scores, srp_phat_scores_from_phase
from .synth import read_mask, read_shard

ACCURACY_COLUMNS = ["method", "room", "snr_db", "distance_m", "perturbed", "n_active", "n_correct",
                    "accuracy_pct", "accuracy_within_one_pct"]
POSTERIOR_COLUMNS = ["angle_deg", "mean_probability", "method", "true_angle_deg"]
METHODS = ("cnn", "srp-phat")


class UndefinedAccuracyError(ValueError):
    """No active frames to score."""


@dataclass
class EvalReport:
    method: str
    room: str
    snr_db: float
    distance_m: float
    perturbed: bool
    n_active: int
    n_correct: int
    n_within_one: int = 0

    def __post_init__(self):
        if not 0 <= self.n_correct <= self.n_active:
            raise ValueError("n_correct must lie in [0, n_active]")

    @property
    def accuracy_pct(self) -> float:
        return 100.0 * self.n_correct / self.n_active if self.n_active else float("nan")

    @property
    def accuracy_within_one_pct(self) -> float:
        return 100.0 * self.n_within_one / self.n_active if self.n_active else float("nan")

    def row(self) -> dict:
        return {"method": self.method, "room": self.room, "snr_db": repr(float(self.snr_db)),
                "distance_m": repr(float(self.distance_m)), "perturbed": int(self.perturbed),
                "n_active": self.n_active, "n_correct": self.n_correct,
                "accuracy_pct": repr(self.accuracy_pct),
                "accuracy_within_one_pct": repr(self.accuracy_within_one_pct)}


@dataclass
class PosteriorCurve:
    angles_deg: np.ndarray
    probabilities: np.ndarray
    true_angle_deg: float | None = None
    method: str = ""

    def __post_init__(self):
        if len(self.angles_deg) != len(self.probabilities):
            raise ValueError("angles and probabilities differ in length")

    @property
    def peak_angle(self) -> float:
        return float(self.angles_deg[int(np.argmax(self.probabilities))])


def _active(labels, active_mask):
    if active_mask is None:
        return np.ones(len(labels), dtype=bool)
    mask = np.asarray(active_mask, dtype=bool)
    if len(mask) != len(labels):
        raise ValueError(f"mask has {len(mask)} frames, expected {len(labels)}")
    return mask


def frame_accuracy(estimates, labels, active_mask=None) -> float:
    """Percentage of active frames whose estimated class equals the label."""
    est = np.asarray(estimates)
    lab = np.asarray(labels)
    if est.shape != lab.shape:
        raise ValueError(f"{len(est)} estimates for {len(lab)} labels")
    mask = _active(lab, active_mask)
    n = int(mask.sum())
    if n == 0:
        raise UndefinedAccuracyError("accuracy is undefined without active frames")
    return 100.0 * int(np.sum(est[mask] == lab[mask])) / n


def average_posterior(posteriors, active_mask=None, angles_deg=None, true_angle=None,
                      method: str = "") -> PosteriorCurve:
    """Mean of the per-frame posteriors over active frames, renormalised to sum to 1."""
    p = np.atleast_2d(np.asarray(posteriors, dtype=np.float64))
    mask = _active(p, active_mask)
    if not mask.any():
        raise UndefinedAccuracyError("no active frames to average")
    mean = p[mask].mean(axis=0)
    mean = mean / mean.sum()
    angles = np.arange(p.shape[1], dtype=float) if angles_deg is None else np.asarray(angles_deg, float)
    return PosteriorCurve(angles, mean, true_angle, method)


@dataclass
class Condition:
    """A test shard plus the metadata reported for it."""

    shard: str
    mask: str | None = None
    room: str = ""
    snr_db: float = float("nan")
    distance_m: float = float("nan")
    perturbed: bool = False


@dataclass
class ExperimentResult:
    reports: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)


def _score_condition(cond: Condition, methods, net, table, grid_angles):
    shard = read_shard(cond.shard)
    mask = read_mask(cond.mask, shard.frame_count) if cond.mask else np.ones(shard.frame_count, bool)
    labels = shard.labels.astype(np.int64)
    out = []
    curves = {}
    for method in methods:
        if method == "cnn":
            if net is None:
                raise ValueError("cnn evaluation needs a network")
            post = cnn.predict_proba(net, shard.phase_maps)
        elif method == "srp-phat":
            if table is None:
                raise ValueError("srp-phat evaluation needs a steering table")
            post = normalize_scores(srp_phat_scores_from_phase(shard.phase_maps, table))
        else:
            raise ValueError(f"unknown method {method!r}")
        est = cnn.decode_classes(post)
        n_active = int(mask.sum())
        n_correct = int(np.sum((est == labels) & mask))
        n_one = int(np.sum((np.abs(est - labels) <= 1) & mask))
        out.append(EvalReport(method, cond.room, cond.snr_db, cond.distance_m, cond.perturbed,
                              n_active, n_correct, n_one))
        for lab in np.unique(labels):
            sel = mask & (labels == lab)
            if sel.any():
                true_angle = float(grid_angles[lab]) if grid_angles is not None else float(lab)
                curves[(method, true_angle)] = average_posterior(post, sel, grid_angles, true_angle, method)
    return out, curves


def run_experiment(conditions, net: cnn.Network | None = None, table: SteeringTable | None = None,
                   methods=METHODS, csv_path=None, threads: int = 1) -> ExperimentResult:
    """
    Score every condition with every method.

    Rows come out in condition order, then method order, whatever the
    thread count. ``result.curves[i]`` maps ``(method, true_angle)`` to the
    averaged posterior of condition ``i``.
    """
    methods = tuple(methods)
    if net is not None and table is not None and net.n_classes != table.grid.class_count:
        raise cnn.ArchitectureMismatchError(
            f"network has {net.n_classes} classes, steering grid has {table.grid.class_count}")
    angles = table.grid.angles_deg if table is not None else None
    work = lambda c: _score_condition(c, methods, net, table, angles)  # noqa: E731
    if threads > 1 and len(conditions) > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, conditions))
    else:
        results = [work(c) for c in conditions]
    res = ExperimentResult()
    for i, (reports, curves) in enumerate(results):
        res.reports.extend(reports)
        res.curves[i] = curves
    if csv_path is not None:
        write_accuracy_csv(res.reports, csv_path)
    return res


def write_accuracy_csv(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ACCURACY_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())


def read_accuracy_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({
                "method": r["method"], "room": r["room"], "snr_db": float(r["snr_db"]),
                "distance_m": float(r["distance_m"]), "perturbed": bool(int(r["perturbed"])),
                "n_active": int(r["n_active"]), "n_correct": int(r["n_correct"]),
                "accuracy_pct": float(r["accuracy_pct"]),
                "accuracy_within_one_pct": float(r["accuracy_within_one_pct"]),
            })
    return rows


def write_posterior_csv(curves, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(POSTERIOR_COLUMNS)
        for c in curves:
            true = "" if c.true_angle_deg is None else repr(float(c.true_angle_deg))
            for a, p in zip(c.angles_deg, c.probabilities):
                w.writerow([repr(float(a)), repr(float(p)), c.method, true])


def read_posterior_csv(path) -> list[PosteriorCurve]:
    groups: dict = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            true = float(r["true_angle_deg"]) if r["true_angle_deg"] else None
            groups.setdefault((r["method"], true), []).append((float(r["angle_deg"]), float(r["mean_probability"])))
    return [PosteriorCurve(np.array([a for a, _ in v]), np.array([p for _, p in v]), true, m)
            for (m, true), v in groups.items()]


def load_conditions(manifest: dict, base_dir) -> list[Condition]:
    """Conditions from a test manifest written by the synthesis step."""
    base = Path(base_dir)
    out = []
    for s in manifest["shards"]:
        out.append(Condition(str(base / s["path"]), str(base / s["mask"]) if s.get("mask") else None,
                             s.get("room", manifest.get("room", "")), float(s.get("snr_db", "nan")),
                             float(s.get("distance_m", manifest.get("distance_m", "nan"))),
                             bool(s.get("perturbed", False))))
    return out
