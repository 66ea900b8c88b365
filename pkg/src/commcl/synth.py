"""Synthetic multimodal world and task streams.

Each modality draws random per-class prototype token grids, adds Gaussian
noise, and then passes every token through a fixed modality signature (a random
orthogonal map plus a bias vector). Temporal modalities repeat the prototype
over three slices with independent per-slice jitter. Class names are unique
token sequences shared by the text tower.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import numerics as nx
from .errors import ConfigError
from .towers import PretrainClass

MODALITIES = ("image", "video", "depth", "audio")
SCENARIOS = ("random", "shift", "simultaneous")


@dataclass
class WorldSpec:
    seed: int = 0
    modalities: tuple = MODALITIES
    temporal: dict = field(default_factory=lambda: {"image": 1, "video": 3, "depth": 1, "audio": 3})
    spatial_len: int = 16
    d_model: int = 32
    cl_classes: int = 20
    pretrain_classes: int = 8
    train_per_class: int = 40
    test_per_class: int = 10
    pretrain_per_class: int = 64
    pretrain_heldout: int = 16
    subsets: int = 5
    prototype_scale: float = 1.0
    noise: float = 0.3
    jitter_ratio: float = 0.5
    bias_scale: float = 1.0
    vocab_size: int = 64
    text_len: int = 4

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        missing = [m for m in self.modalities if m not in self.temporal]
        if missing:
            raise ConfigError(f"no temporal length declared for {missing}")
        if self.cl_classes % self.subsets:
            raise ConfigError("cl_classes must split evenly into subsets")
        if self.pretrain_heldout >= self.pretrain_per_class:
            raise ConfigError("pretrain_heldout must be smaller than pretrain_per_class")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d


@dataclass
class ClassInfo:
    class_id: int
    modality: str
    tokens: np.ndarray
    pretrain: bool


class World:
    """Generated data. Samples are float32 tensors ``[n, T, S, d]``."""

    def __init__(self, spec: WorldSpec, classes, train, test, transforms):
        self.spec = spec
        self.classes: list[ClassInfo] = classes
        self._train: dict[int, torch.Tensor] = train
        self._test: dict[int, torch.Tensor] = test
        self.transforms = transforms

    def cl_classes(self, modality: str) -> list[int]:
        return [c.class_id for c in self.classes if c.modality == modality and not c.pretrain]

    def pretrain_classes(self, modality: str | None = None) -> list[int]:
        return [c.class_id for c in self.classes if c.pretrain and modality in (None, c.modality)]

    def tokens(self, class_ids) -> torch.Tensor:
        return torch.as_tensor(np.stack([self.classes[c].tokens for c in class_ids]), dtype=torch.long)

    def samples(self, class_ids, split: str = "train") -> tuple[torch.Tensor, torch.Tensor]:
        """Concatenated samples of ``class_ids`` and their class-id labels."""
        store = self._train if split == "train" else self._test
        xs = [store[c] for c in class_ids]
        ys = [torch.full((x.shape[0],), c, dtype=torch.long) for c, x in zip(class_ids, xs)]
        return torch.cat(xs), torch.cat(ys)

    def pretrain_corpus(self) -> list[PretrainClass]:
        held = self.spec.pretrain_heldout
        return [
            PretrainClass(c.modality, c.tokens, self._train[c.class_id][held:], self._train[c.class_id][:held])
            for c in self.classes if c.pretrain
        ]

    def tensors(self) -> dict[str, torch.Tensor]:
        """Every generated array, keyed for the tensor container."""
        out = {}
        for c in self.classes:
            out[f"class{c.class_id}/tokens"] = torch.as_tensor(c.tokens, dtype=torch.float32)
            out[f"class{c.class_id}/train"] = self._train[c.class_id]
            if c.class_id in self._test:
                out[f"class{c.class_id}/test"] = self._test[c.class_id]
        for m, (rot, bias) in self.transforms.items():
            out[f"signature/{m}/rotation"] = rot
            out[f"signature/{m}/bias"] = bias
        return out


def _unique_token_rows(rng: nx.RngStream, n: int, vocab: int, length: int) -> list[np.ndarray]:
    if n > vocab**length:
        raise ConfigError(f"{n} classes exceed token-table capacity {vocab}^{length}")
    seen, rows = set(), []
    while len(rows) < n:
        row = tuple(int(v) for v in rng.integers(0, vocab, size=length))
        if row not in seen:
            seen.add(row)
            rows.append(np.array(row, dtype=np.int64))
    return rows


def _orthogonal(rng: nx.RngStream, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal((d, d)))
    return q * np.sign(np.diag(r))


def build_world(spec: WorldSpec) -> World:
    root = nx.RngStream(spec.seed, "data/world")
    d, s = spec.d_model, spec.spatial_len
    n_per_mod = spec.cl_classes + spec.pretrain_classes
    token_rows = _unique_token_rows(root.child("tokens"), n_per_mod * len(spec.modalities),
                                    spec.vocab_size, spec.text_len)

    classes, train, test, transforms = [], {}, {}, {}
    for mi, m in enumerate(spec.modalities):
        mrng = root.child(m)
        rot = _orthogonal(mrng.child("rotation"), d)
        bias = mrng.child("bias").normal(d, spec.bias_scale)
        transforms[m] = (torch.as_tensor(rot, dtype=torch.float32), torch.as_tensor(bias, dtype=torch.float32))
        t_len = spec.temporal[m]
        for k in range(n_per_mod):
            cid = len(classes)
            pretrain = k >= spec.cl_classes
            classes.append(ClassInfo(cid, m, token_rows[cid], pretrain))
            crng = mrng.child(f"class{k}")
            proto = crng.child("prototype").normal((s, d), spec.prototype_scale)
            n_train = spec.pretrain_per_class if pretrain else spec.train_per_class
            n_test = 0 if pretrain else spec.test_per_class
            n = n_train + n_test
            srng = crng.child("samples")
            shared = srng.normal((n, 1, s, d), spec.noise)
            per_slice = srng.normal((n, t_len, s, d), spec.noise * spec.jitter_ratio) if t_len > 1 else 0.0
            x = proto[None, None] + shared + per_slice
            x = x @ rot + bias
            x = torch.as_tensor(x, dtype=torch.float32)
            train[cid] = x[:n_train].contiguous()
            if n_test:
                test[cid] = x[n_train:].contiguous()
    return World(spec, classes, train, test, transforms)


# --------------------------------------------------------------------------
# task streams


@dataclass
class Task:
    t: int
    modalities: list[str]
    classes: dict[str, list[int]]

    def to_dict(self) -> dict:
        return {"t": self.t, "modalities": list(self.modalities),
                "classes": {m: list(map(int, v)) for m, v in self.classes.items()}}


@dataclass
class Stream:
    scenario: str
    reversed: bool
    seed: int
    subsets: int
    tasks: list[Task]

    def to_json(self) -> str:
        return json.dumps({"scenario": self.scenario, "reversed": self.reversed, "seed": self.seed,
                           "subsets": self.subsets, "tasks": [t.to_dict() for t in self.tasks]},
                          sort_keys=True)

    def __len__(self):
        return len(self.tasks)


def class_subsets(world: World, seed: int) -> dict[str, list[list[int]]]:
    """Each modality's CL classes in a seeded order, cut into contiguous blocks."""
    rng = nx.RngStream(seed, "data/subsets")
    k = world.spec.subsets
    out = {}
    for m in world.spec.modalities:
        ids = world.cl_classes(m)
        order = [ids[i] for i in rng.child(m).permutation(len(ids))]
        size = len(ids) // k
        out[m] = [order[i * size:(i + 1) * size] for i in range(k)]
    return out


def make_stream(world: World, scenario: str, reversed: bool = False, seed: int = 0) -> Stream:
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    mods = list(world.spec.modalities)
    k = world.spec.subsets
    subsets = class_subsets(world, seed)

    if scenario == "simultaneous":
        plan = [[(m, i) for m in mods] for i in range(k)]
    else:
        if scenario == "shift":
            order = [m for m in mods for _ in range(k)]
        else:
            order = [m for m in mods for _ in range(k)]
            order = [order[i] for i in nx.RngStream(seed, "data/order").permutation(len(order))]
        seen: dict[str, int] = {}
        plan = []
        for m in order:
            plan.append([(m, seen.get(m, 0))])
            seen[m] = seen.get(m, 0) + 1
    if reversed:
        plan = plan[::-1]
    tasks = [
        Task(t + 1, [m for m, _ in step], {m: list(subsets[m][i]) for m, i in step})
        for t, step in enumerate(plan)
    ]
    return Stream(scenario, reversed, seed, k, tasks)
