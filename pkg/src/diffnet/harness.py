"""Evaluation, multi-seed summaries, ablation and story-perturbation grids, voting."""

from __future__ import annotations

import csv
import json
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .model import EncodedInstance, ModelConfig, as_constants, predict, score_all
from .text import FEATURE_NAMES, StoryInstance, transform_dataset
from .train import TrainConfig, fit, prepare


@dataclass
class InstanceResult:
    id: str
    p1: float
    p2: float
    predicted: int
    gold: int
    tie: bool = False


@dataclass
class EvalReport:
    accuracy: float
    n: int
    per_instance: list
    fingerprint: str = ""
    seed: int | None = None
    mean_cosine: float | None = None

    @property
    def correct(self) -> int:
        return sum(r.predicted == r.gold for r in self.per_instance)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_instance"] = [asdict(r) for r in self.per_instance]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        rows = [InstanceResult(**r) for r in d["per_instance"]]
        return cls(accuracy=d["accuracy"], n=d["n"], per_instance=rows, fingerprint=d.get("fingerprint", ""),
                   seed=d.get("seed"), mean_cosine=d.get("mean_cosine"))

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "p1", "p2", "predicted", "gold", "tie"])
            for r in self.per_instance:
                w.writerow([r.id, repr(r.p1), repr(r.p2), r.predicted, r.gold, int(r.tie)])


def _report(rows: list, fingerprint: str = "", seed=None, mean_cosine=None) -> EvalReport:
    correct = sum(r.predicted == r.gold for r in rows)
    return EvalReport(accuracy=correct / len(rows), n=len(rows), per_instance=rows, fingerprint=fingerprint,
                      seed=seed, mean_cosine=mean_cosine)


def evaluate(params: Mapping[str, np.ndarray], config: ModelConfig, dataset: Sequence[EncodedInstance],
             seed: int | None = None) -> EvalReport:
    """Score every instance with dropout off; ties at p = [0.5, 0.5] pick ending 1."""
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    consts = as_constants(params)
    rows = []
    cos = 0.0
    for inst, out in score_all(dataset, consts, config):
        p = out.p
        rows.append(InstanceResult(inst.id, float(p[0]), float(p[1]), predict(p), inst.label,
                                   tie=bool(p[0] == p[1])))
        cos += float(T.cosine(out.hybrid[0], out.hybrid[1]).value)
    return _report(rows, config.fingerprint(), seed, cos / len(dataset))


# ----------------------------------------------------------------- summaries


@dataclass
class MultiSeedSummary:
    best: float
    mean: float
    stdev: float
    k: int
    runs: list = field(default_factory=list)

    @property
    def single_run(self) -> bool:
        return self.k == 1

    def bracket(self, scale: float = 100.0) -> str:
        """``best (mean ± stdev)`` in percent."""
        flag = " [k=1]" if self.single_run else ""
        return f"{self.best * scale:.1f} ({self.mean * scale:.2f} ± {self.stdev * scale:.2f}){flag}"


def summarize(accuracies: Sequence[float]) -> MultiSeedSummary:
    """Max, mean and sample (n-1) standard deviation; a single run has stdev 0."""
    accs = [float(a) for a in accuracies]
    if not accs:
        raise ValueError("cannot summarize an empty list")
    stdev = statistics.stdev(accs) if len(accs) > 1 else 0.0
    return MultiSeedSummary(best=max(accs), mean=statistics.fmean(accs), stdev=stdev, k=len(accs), runs=accs)


def majority_vote(reports: Sequence[EvalReport]) -> EvalReport:
    """Per-instance mode of the members' predictions.

    Split votes go to the ending with the larger summed probability, then to
    ending 1.  Ensemble probabilities are the members' means.
    """
    if not reports:
        raise ValueError("need at least one report")
    ids = [r.id for r in reports[0].per_instance]
    for rep in reports[1:]:
        if [r.id for r in rep.per_instance] != ids:
            if sorted(r.id for r in rep.per_instance) != sorted(ids):
                raise ValueError("reports cover different instance ids")
    by_id = [{r.id: r for r in rep.per_instance} for rep in reports]
    rows = []
    for i, ident in enumerate(ids):
        members = [m[ident] for m in by_id]
        votes1 = sum(m.predicted == 1 for m in members)
        votes2 = len(members) - votes1
        mass1 = math.fsum(m.p1 for m in members)
        mass2 = math.fsum(m.p2 for m in members)
        if votes1 != votes2:
            pred = 1 if votes1 > votes2 else 2
        else:
            pred = 1 if mass1 >= mass2 else 2
        k = len(members)
        rows.append(InstanceResult(ident, mass1 / k, mass2 / k, pred, members[0].gold,
                                   tie=votes1 == votes2 and mass1 == mass2))
    fp = reports[0].fingerprint
    return _report(rows, fp if all(r.fingerprint == fp for r in reports) else "ensemble")


# -------------------------------------------------------------------- grids

ABLATIONS: dict[str, tuple[str, dict]] = {
    "full": ("Diff-Net", {}),
    "L1": ("L1: SELU -> Tanh", {"activation": "tanh"}),
    "L2": ("L2: w/o cosine loss", {"use_cosine_loss": False}),
    "L3": ("L3: w/o modified AoA", {"aoa_mode": "original"}),
    "L4": ("L4: w/o match module", {"use_match": False}),
    "L5": ("L5: w/o discriminative module", {"use_diff": False}),
    "L6": ("L6: AoA -> dot product", {"aoa_mode": "dot"}),
    "L7": ("L7: w/o all binary features", {"use_features": False}),
    "F1": ("- w/o E-E Match", {"features": ("es", "es-fuzzy")}),
    "F2": ("- w/o E-S Match", {"features": ("ee", "es-fuzzy")}),
    "F3": ("- w/o E-S Fuzzy Match", {"features": ("ee", "es")}),
}

ANALYSIS_MODES = ("entire", "drop-1", "drop-2", "drop-3", "drop-4", "ending-only", "reverse", "random-order")
MODE_LABELS = {
    "entire": "Entire Story", "drop-1": "- w/o 1st sent.", "drop-2": "- w/o 2nd sent.",
    "drop-3": "- w/o 3rd sent.", "drop-4": "- w/o 4th sent.", "ending-only": "Ending only",
    "reverse": "Reverse story", "random-order": "Random order",
}


def ablation_config(base: ModelConfig, ablation_id: str) -> ModelConfig:
    if ablation_id not in ABLATIONS:
        raise ValueError(f"unknown ablation id {ablation_id!r}; expected one of {list(ABLATIONS)}")
    return replace(base, **ABLATIONS[ablation_id][1])


@dataclass
class GridRow:
    key: str
    label: str
    summary: MultiSeedSummary
    delta: float | None = None

    def to_dict(self) -> dict:
        d = {"key": self.key, "label": self.label, "best": self.summary.best, "mean": self.summary.mean,
             "stdev": self.summary.stdev, "k": self.summary.k, "runs": self.summary.runs}
        if self.delta is not None:
            d["delta"] = self.delta
        return d


def _run_point(args) -> float:
    config, tcfg, train_set, eval_set = args
    res = fit(train_set, config, tcfg, eval_set)
    dev = prepare(eval_set, res.vocab, config)
    return evaluate(res.best_params, config, dev, tcfg.seed).accuracy


def _map(points, jobs: int):
    if jobs > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_point, points))
    return [_run_point(p) for p in points]


def run_ablation(base: ModelConfig, train_set: Sequence[StoryInstance], eval_set: Sequence[StoryInstance],
                 seeds: Sequence[int], tcfg: TrainConfig, ids: Sequence[str] | None = None,
                 jobs: int = 1) -> list[GridRow]:
    """Train and evaluate each ablation per seed; rows by descending mean."""
    ids = list(ids or ABLATIONS)
    configs = {i: ablation_config(base, i) for i in ids}
    points = [(configs[i], replace(tcfg, seed=s), train_set, eval_set) for i in ids for s in seeds]
    accs = _map(points, jobs)
    rows = []
    for j, i in enumerate(ids):
        summary = summarize(accs[j * len(seeds):(j + 1) * len(seeds)])
        rows.append(GridRow(i, ABLATIONS[i][0], summary))
    return sorted(rows, key=lambda r: -r.summary.mean)


def run_quantitative(config: ModelConfig, train_set: Sequence[StoryInstance], eval_set: Sequence[StoryInstance],
                     modes: Sequence[str], seeds: Sequence[int], tcfg: TrainConfig, jobs: int = 1) -> list[GridRow]:
    """Retrain and evaluate on perturbed stories; deltas are against ``entire``.

    The transform is applied to both the training and evaluation copies.
    """
    modes = list(modes)
    for m in modes:
        if m not in ANALYSIS_MODES:
            raise ValueError(f"unknown analysis mode {m!r}; expected one of {ANALYSIS_MODES}")
    run_modes = ["entire"] + [m for m in modes if m != "entire"]
    points = []
    for m in run_modes:
        mode = "identity" if m == "entire" else m
        tr = transform_dataset(train_set, mode, seed=1)
        ev = transform_dataset(eval_set, mode, seed=2)
        points += [(config, replace(tcfg, seed=s), tr, ev) for s in seeds]
    accs = _map(points, jobs)
    rows = []
    for j, m in enumerate(run_modes):
        rows.append(GridRow(m, MODE_LABELS[m], summarize(accs[j * len(seeds):(j + 1) * len(seeds)])))
    base = rows[0].summary.mean
    for row in rows:
        row.delta = row.summary.mean - base
    return [r for r in rows if r.key in modes]


def format_table(rows: Sequence[GridRow], title: str = "System", column: str = "Accuracy") -> str:
    """Aligned text table in the ``best (mean ± stdev)`` style."""
    cells = []
    for r in rows:
        cell = r.summary.bracket()
        if r.delta is not None:
            cell += f" [{r.delta * 100:+.1f}]"
        cells.append((r.label, cell))
    w1 = max([len(title)] + [len(a) for a, _ in cells])
    w2 = max([len(column)] + [len(b) for _, b in cells])
    lines = [f"{title:<{w1}}  {column}", "-" * (w1 + 2 + w2)]
    lines += [f"{a:<{w1}}  {b}" for a, b in cells]
    return "\n".join(lines)


def rows_to_json(rows: Sequence[GridRow]) -> str:
    return json.dumps([r.to_dict() for r in rows], indent=1)
