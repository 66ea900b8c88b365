"""Continual training over a stream, evaluation matrices, and AIA/FAA/F."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import numerics as nx
from .comm import CommConfig, CommModel
from .errors import CommError, ConfigError, NumericFault, UsageError
from .synth import Stream, Task, World
from .towers import Backbone, similarity_logits

log = logging.getLogger(__name__)

METHODS = ("comm", "ft")
EVAL_MODES = ("specific", "agnostic", "both")


@dataclass
class RunConfig:
    method: str = "comm"
    cross: bool = True
    self_reg: bool = True
    realign: bool = True
    lambda_self: float = 1.0
    epochs: int = 20
    batch_size: int = 16
    prompt_lr: float = 5e-3
    gate_lr: float = 1e-2
    realign_lr: float = 5e-3
    gate_samples: int = 128
    gate_steps: int = 100
    realign_samples: int = 32
    realign_steps: int = 100
    eval_mode: str = "both"
    specific_composition: str = "onehot"
    train_composition: str = "gate"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.eval_mode not in EVAL_MODES:
            raise ConfigError(f"eval_mode must be one of {EVAL_MODES}")
        if self.specific_composition not in ("onehot", "gate"):
            raise ConfigError("specific_composition must be 'onehot' or 'gate'")
        for name in ("prompt_lr", "gate_lr", "realign_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    @property
    def modes(self) -> list[str]:
        return ["specific", "agnostic"] if self.eval_mode == "both" else [self.eval_mode]

    def comm_config(self) -> CommConfig:
        return CommConfig(
            lambda_self=self.lambda_self, prompt_lr=self.prompt_lr, gate_lr=self.gate_lr,
            gate_samples=self.gate_samples, gate_steps=self.gate_steps, realign_lr=self.realign_lr,
            realign_samples=self.realign_samples, realign_steps=self.realign_steps,
            use_cross=self.cross, use_self=self.self_reg, use_realign=self.realign,
            train_composition=self.train_composition,
        )

    def label(self) -> str:
        if self.method == "ft":
            return "ft"
        off = [n for n, on in (("cross", self.cross), ("self", self.self_reg), ("realign", self.realign)) if not on]
        return "comm" + "".join(f"-no-{n}" for n in off)


# --------------------------------------------------------------------------
# sequential fine-tuning baseline


class FTModel:
    """One shared prompt pair and one shared low-rank head, trained task after task."""

    def __init__(self, backbone: Backbone, config: RunConfig, seed: int = 0):
        self.backbone = backbone.freeze()
        self.config = config
        self.cfg = backbone.cfg
        self.dtype = backbone.dtype
        d, r = self.cfg.d_model, self.cfg.head_rank
        rng = nx.RngStream(seed, "init/ft")
        self.P = nx.Parameter(torch.zeros(self.cfg.prompt_shape, dtype=self.dtype))
        self.Q = nx.Parameter(torch.zeros(self.cfg.prompt_shape, dtype=self.dtype))
        self.A = nx.Parameter(rng.tensor((d, r), d ** -0.5, self.dtype))
        self.B = nx.Parameter(torch.zeros(r, self.cfg.d_joint, dtype=self.dtype))
        self.classes: dict[str, list[int]] = {}
        self.tokens: dict[int, tuple[int, ...]] = {}
        self.current: dict[str, list[int]] = {}
        self.optimizer: nx.Adam | None = None

    @property
    def modalities(self):
        return list(self.classes)

    def head(self) -> torch.Tensor:
        return self.backbone.head_base + self.A.value @ self.B.value

    def begin_task(self, t, modalities, classes, tokens=None, rng=None):
        for m in modalities:
            self.classes.setdefault(m, [])
            if tokens:
                self.tokens.update({int(c): tuple(int(v) for v in tokens[c]) for c in classes[m]})
        self.current = {m: [int(c) for c in classes[m]] for m in modalities}
        self.optimizer = nx.Adam([self.P, self.Q, self.A, self.B], self.config.prompt_lr)

    def task_step(self, m, x, class_ids, index=None, context=None):
        ids = self.current[m]
        lookup = {c: i for i, c in enumerate(ids)}
        labels = torch.as_tensor([lookup[int(c)] for c in class_ids], dtype=torch.long)
        tok = torch.as_tensor([self.tokens[c] for c in ids], dtype=torch.long)
        feats = self.backbone.encode_modality(x.to(self.dtype), self.P.value)
        text = self.backbone.encode_text(tok, self.Q.value)
        loss = nx.cross_entropy(similarity_logits(feats @ self.head(), text, self.cfg.tau), labels)
        if not torch.isfinite(loss):
            raise NumericFault("non-finite training loss", {"modality": m, **(context or {})})
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return float(loss.detach())

    def end_task(self, t, m, x=None, class_ids=None):
        for c in self.current.get(m, []):
            if c not in self.classes[m]:
                self.classes[m].append(c)

    @torch.no_grad()
    def predict(self, x, mode, modality=None, specific_composition="onehot"):
        ids = self.classes[modality] if mode == "specific" else [c for m in self.classes for c in self.classes[m]]
        tok = torch.as_tensor([self.tokens[c] for c in ids], dtype=torch.long)
        feats = self.backbone.encode_modality(x.to(self.dtype), self.P.value)
        text = self.backbone.encode_text(tok, self.Q.value)
        logits = similarity_logits(feats @ self.head(), text, self.cfg.tau)
        return torch.as_tensor(ids)[logits.argmax(1)], ids

    def count_parameters(self) -> tuple[int, int]:
        n = sum(p.numel() for p in (self.P, self.Q, self.A, self.B))
        return n, n


# --------------------------------------------------------------------------
# accuracy matrix and metrics


@dataclass
class AccuracyMatrix:
    """``a[t][(j, m)]``: accuracy on the test set of modality ``m`` in task ``j`` after step ``t``."""

    units: list[tuple[int, str]] = field(default_factory=list)
    rows: list[dict[tuple[int, str], float]] = field(default_factory=list)

    def add_row(self, values: dict[tuple[int, str], float]):
        for u in values:
            if u not in self.units:
                self.units.append(u)
        self.rows.append(dict(values))

    @classmethod
    def from_rows(cls, rows: list[list[float]], modalities: list[str] | None = None) -> "AccuracyMatrix":
        """Lower-triangular list-of-lists, one unit per task."""
        mods = modalities or ["all"] * len(rows)
        mat = cls()
        for t, row in enumerate(rows, start=1):
            if len(row) != t:
                raise UsageError(f"row {t} has {len(row)} entries; expected {t}")
            mat.add_row({(j + 1, mods[j]): v for j, v in enumerate(row)})
        return mat

    @property
    def T(self) -> int:
        return len(self.rows)

    def get(self, t: int, unit) -> float:
        return self.rows[t - 1][unit]

    def to_records(self) -> list[dict]:
        return [{"t": t, "j": j, "modality": m, "accuracy": acc}
                for t, row in enumerate(self.rows, start=1) for (j, m), acc in row.items()]


def _formulas(mat: AccuracyMatrix, units, start: int) -> dict:
    T = mat.T
    a_t = []
    for t in range(start, T + 1):
        seen = [u for u in units if u[0] <= t]
        if seen:
            a_t.append(float(np.mean([mat.get(t, u) for u in seen])))
    forgetting = []
    for u in units:
        j = u[0]
        if j < T:
            peak = max(mat.get(l, u) for l in range(j, T))
            forgetting.append(peak - mat.get(T, u))
    return {
        "AIA": float(np.mean(a_t)),
        "FAA": a_t[-1],
        "F": float(np.mean(forgetting)) if forgetting else 0.0,
        "F_defined": bool(forgetting),
        "A_t": a_t,
    }


def compute_metrics(mat: AccuracyMatrix, modalities: list[str] | None = None) -> dict:
    """AIA, FAA, F over all evaluation units plus per-modality and overall means.

    Per-modality windows start at the modality's first task. Overall is the
    unweighted mean across modalities (F over modalities where it is defined).
    """
    if mat.T == 0:
        raise UsageError("empty accuracy matrix")
    for t, row in enumerate(mat.rows, start=1):
        expected = [u for u in mat.units if u[0] <= t]
        if sorted(row) != sorted(expected):
            raise UsageError(f"accuracy matrix row {t} is incomplete")
    report = {"all": _formulas(mat, mat.units, 1), "per_modality": {}}
    mods = modalities or sorted({m for _, m in mat.units})
    for m in mods:
        units = [u for u in mat.units if u[1] == m]
        if units:
            report["per_modality"][m] = _formulas(mat, units, min(j for j, _ in units))
    per = list(report["per_modality"].values())
    defined = [r["F"] for r in per if r["F_defined"]]
    report["overall"] = {
        "AIA": float(np.mean([r["AIA"] for r in per])),
        "FAA": float(np.mean([r["FAA"] for r in per])),
        "F": float(np.mean(defined)) if defined else 0.0,
        "F_defined": bool(defined),
    }
    return report


# --------------------------------------------------------------------------
# orchestration


@dataclass
class RunResult:
    config: RunConfig
    matrices: dict[str, AccuracyMatrix]
    metrics: dict[str, dict]
    params: list[dict]
    steps: list[dict]
    stream: Stream


def _batches(n: int, size: int, rng: nx.RngStream):
    order = torch.as_tensor(rng.permutation(n))
    return [order[i:i + size] for i in range(0, n, size)]


def run_time_step(model, world: World, task: Task, config: RunConfig, rng: nx.RngStream) -> dict:
    """Train one time step. Returns a small log with mean losses per modality."""
    t = task.t
    data = {m: world.samples(task.classes[m], "train") for m in task.modalities}
    tokens = {c: world.classes[c].tokens for m in task.modalities for c in task.classes[m]}
    step_log = {"t": t, "modalities": list(task.modalities), "loss": {}}
    is_comm = isinstance(model, CommModel)

    if is_comm:
        for m in task.modalities:
            model.observe_raw_features(m, data[m][0])
        if config.cross:
            model.train_gate(rng.child(f"gate/t{t}"))
            step_log["cross"] = model.cross_loss()
    model.begin_task(t, task.modalities, task.classes, tokens, rng.child(f"init/t{t}"))

    for m in task.modalities:
        x, y = data[m]
        if is_comm:
            model.prepare_task(m, x)
        losses = []
        for epoch in range(config.epochs):
            for idx in _batches(x.shape[0], config.batch_size, rng.child(f"batches/t{t}/{m}/e{epoch}")):
                ctx = {"t": t, "modality": m, "epoch": epoch}
                if is_comm:
                    out = model.task_step(m, x[idx], y[idx], index=idx, context=ctx)
                    losses.append(out.total)
                else:
                    losses.append(model.task_step(m, x[idx], y[idx], context=ctx))
        model.end_task(t, m, x, y)
        step_log["loss"][m] = float(np.mean(losses)) if losses else 0.0
        if is_comm and config.realign:
            res = model.realign_heads(m, task.classes[m], rng.child(f"realign/t{t}/{m}"))
            if res is not None:
                step_log.setdefault("realign", {})[m] = res
    return step_log


@torch.no_grad()
def evaluate(model, world: World, tasks_seen: list[Task], mode: str,
             specific_composition: str = "onehot") -> dict[tuple[int, str], float]:
    """One accuracy-matrix row: accuracy on every (task, modality) test set seen so far."""
    if not tasks_seen:
        raise UsageError("evaluate needs at least one finished task")
    row = {}
    for task in tasks_seen:
        for m in task.modalities:
            x, y = world.samples(task.classes[m], "test")
            pred, _ = model.predict(x, mode, m, specific_composition)
            row[(task.t, m)] = float((pred == y).float().mean())
    return row


def build_model(backbone: Backbone, config: RunConfig):
    if config.method == "ft":
        return FTModel(backbone, config, config.seed)
    return CommModel(backbone, config.comm_config(), config.seed)


def step_parameters(model, task: Task) -> tuple[int, int]:
    if isinstance(model, CommModel):
        return model.task_trainable_size() * len(task.modalities), model.count_parameters()[1]
    return model.count_parameters()


def run_stream(backbone: Backbone, world: World, stream: Stream, config: RunConfig,
               progress=None, model=None) -> RunResult:
    model = model or build_model(backbone, config)
    rng = nx.RngStream(config.seed, "train")
    matrices = {mode: AccuracyMatrix() for mode in config.modes}
    params, steps = [], []
    try:
        for i, task in enumerate(stream.tasks):
            step_log = run_time_step(model, world, task, config, rng)
            trainable, total = step_parameters(model, task)
            params.append({"t": task.t, "trainable": trainable, "total": total})
            for mode in config.modes:
                matrices[mode].add_row(evaluate(model, world, stream.tasks[: i + 1], mode,
                                                config.specific_composition))
            step_log["accuracy"] = {mode: float(np.mean(list(mat.rows[-1].values())))
                                    for mode, mat in matrices.items()}
            steps.append(step_log)
            if progress:
                progress(step_log)
    except CommError as exc:
        # completed rows stay consistent; hand them to the caller for flushing
        done = {mode: compute_metrics(mat, list(world.spec.modalities))
                for mode, mat in matrices.items() if mat.T}
        exc.partial = RunResult(config, matrices, done, params, steps, stream)
        raise
    metrics = {mode: compute_metrics(mat, list(world.spec.modalities)) for mode, mat in matrices.items()}
    result = RunResult(config, matrices, metrics, params, steps, stream)
    result.model = model
    return result


def write_results(result: RunResult, out_dir: Path | str) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "accuracy_matrix": out / "accuracy_matrix.csv",
        "metrics": out / "metrics.json",
        "params": out / "params.csv",
    }
    with open(paths["accuracy_matrix"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mode", "t", "j", "modality", "accuracy"])
        for mode, mat in result.matrices.items():
            for r in mat.to_records():
                w.writerow([mode, r["t"], r["j"], r["modality"], repr(r["accuracy"])])
    with open(paths["params"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "trainable", "total"])
        for p in result.params:
            w.writerow([p["t"], p["trainable"], p["total"]])
    payload = {
        "run": result.config.label(),
        "config": asdict(result.config),
        "scenario": result.stream.scenario,
        "reversed": result.stream.reversed,
        "metrics": result.metrics,
        "params": result.params,
        "steps": result.steps,
    }
    with open(paths["metrics"], "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return paths
