"""Per-modality prompt accumulation, relevance gating, and head re-alignment.

Lifecycle for one modality ``m`` inside time step ``t``::

    observe_raw_features -> train_gate -> begin_task -> task_step* -> end_task -> realign_heads

During a task the live accumulated prompt is ``P̄^{t-1}_m + P^t_m`` (likewise
for ``Q`` and the head delta), so gradients reach only the fresh components.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import numerics as nx
from .errors import ConfigError, NumericFault, UsageError
from .towers import Backbone, similarity_logits

log = logging.getLogger(__name__)


@dataclass
class CommConfig:
    lambda_self: float = 1.0
    prompt_lr: float = 5e-3
    gate_lr: float = 1e-2
    gate_samples: int = 128
    gate_steps: int = 100
    realign_lr: float = 5e-3
    realign_samples: int = 32
    realign_steps: int = 100
    use_cross: bool = True
    use_self: bool = True
    use_realign: bool = True
    # "gate" follows the relevance weights while training; "onehot" uses the
    # training modality's own accumulated prompt.
    train_composition: str = "gate"

    def __post_init__(self):
        if self.train_composition not in ("gate", "onehot"):
            raise ConfigError("train_composition must be 'gate' or 'onehot'")
        for name in ("prompt_lr", "gate_lr", "realign_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


def accumulate(prev: torch.Tensor | None, new: torch.Tensor) -> torch.Tensor:
    """Element-wise sum; the first occurrence returns ``new`` itself."""
    if prev is None:
        return new.detach().clone()
    if prev.shape != new.shape:
        raise ConfigError(f"cannot accumulate {tuple(new.shape)} into {tuple(prev.shape)}")
    return (prev + new).detach()


@dataclass
class Snapshot:
    prompt_P: torch.Tensor
    prompt_Q: torch.Tensor
    head_delta: torch.Tensor


@dataclass
class ModalityState:
    modality: str
    prompt_P: torch.Tensor | None
    prompt_Q: torch.Tensor | None
    head_delta: torch.Tensor | None
    raw_stats: nx.GaussianModel
    class_stats: dict[int, nx.GaussianModel] = field(default_factory=dict)
    registry: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)
    snapshot: Snapshot | None = None
    tasks_completed: int = 0

    def class_ids(self) -> list[int]:
        return [c for c, _ in self.registry]

    def digest(self) -> str:
        """Hash of everything that defines this modality's behaviour."""
        h = hashlib.sha256(self.modality.encode())
        for t in (self.prompt_P, self.prompt_Q, self.head_delta):
            h.update(b"none" if t is None else t.detach().cpu().numpy().tobytes())
        for cid in sorted(self.class_stats):
            g = self.class_stats[cid]
            h.update(str(cid).encode())
            h.update(g.mean.tobytes())
            h.update(g.covariance.tobytes())
            h.update(str(g.count).encode())
        h.update(repr(self.registry).encode())
        return h.hexdigest()


class RelevanceGate:
    """One linear layer from prompt-free features to modality logits."""

    def __init__(self, modalities: list[str], d_in: int, dtype=torch.float32):
        self.modalities = list(modalities)
        k = len(self.modalities)
        self.weight = nx.Parameter(torch.zeros(d_in, k, dtype=dtype))
        self.bias = nx.Parameter(torch.zeros(k, dtype=dtype))
        self.samples: tuple[torch.Tensor, torch.Tensor] | None = None

    def logits(self, features: torch.Tensor) -> torch.Tensor:
        return nx.matmul(features, self.weight.value) + self.bias.value

    def weights(self, features: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return nx.softmax(self.logits(features))

    def numel(self) -> int:
        return self.weight.numel() + self.bias.numel()


@dataclass
class LossBreakdown:
    task: float
    self: float
    cross: float
    total: float


@dataclass
class TaskComponents:
    """The fresh trainable set (P^t, Q^t, alpha^t) of one modality for one task."""

    t: int
    classes: list[int]
    tokens: torch.Tensor
    P: nx.Parameter
    Q: nx.Parameter
    A: nx.Parameter
    B: nx.Parameter
    optimizer: nx.Adam
    # per-sample caches filled by CommModel.prepare_task
    weights: torch.Tensor | None = None
    snap_features: torch.Tensor | None = None
    snap_text: torch.Tensor | None = None

    def parameters(self) -> list[nx.Parameter]:
        return [self.P, self.Q, self.A, self.B]


class CommModel:
    def __init__(self, backbone: Backbone, config: CommConfig | None = None, seed: int = 0):
        self.backbone = backbone.freeze()
        self.config = config or CommConfig()
        self.cfg = backbone.cfg
        self.seed = seed
        self.dtype = backbone.dtype
        self.states: dict[str, ModalityState] = {}
        self.gate: RelevanceGate | None = None
        self.components: dict[str, TaskComponents] = {}
        self._begun: set[tuple[int, str]] = set()
        self._token_table: dict[int, tuple[int, ...]] = {}

    # ------------------------------------------------------------------ utils

    @property
    def modalities(self) -> list[str]:
        return list(self.states)

    def _zeros_prompt(self) -> torch.Tensor:
        return torch.zeros(self.cfg.prompt_shape, dtype=self.dtype)

    def _state(self, m: str) -> ModalityState:
        if m not in self.states:
            d = self.cfg.d_model
            self.states[m] = ModalityState(m, None, None, None, nx.GaussianModel.empty(d))
        return self.states[m]

    def accumulated_P(self, m: str, live: bool = True) -> torch.Tensor:
        """P̄_m, including the in-flight component when ``live``."""
        st = self.states[m]
        comp = self.components.get(m) if live else None
        if comp is None:
            return st.prompt_P if st.prompt_P is not None else self._zeros_prompt()
        if st.prompt_P is None:
            return comp.P.value
        return st.prompt_P + comp.P.value

    def accumulated_Q(self, m: str, live: bool = True) -> torch.Tensor:
        st = self.states[m]
        comp = self.components.get(m) if live else None
        if comp is None:
            return st.prompt_Q if st.prompt_Q is not None else self._zeros_prompt()
        if st.prompt_Q is None:
            return comp.Q.value
        return st.prompt_Q + comp.Q.value

    def head_matrix(self, m: str, live: bool = True) -> torch.Tensor:
        """Effective projection ``base + ᾱ_m`` (plus the live low-rank term)."""
        st = self.states[m]
        w = self.backbone.head_base
        if st.head_delta is not None:
            w = w + st.head_delta
        comp = self.components.get(m) if live else None
        if comp is not None:
            w = w + comp.A.value @ comp.B.value
        return w

    def raw_features(self, x: torch.Tensor) -> torch.Tensor:
        """Prompt-free modality features V(x)."""
        with torch.no_grad():
            return self.backbone.encode_modality(x.to(self.dtype))

    # ----------------------------------------------------------- statistics

    def observe_raw_features(self, m: str, x: torch.Tensor) -> nx.GaussianModel:
        st = self._state(m)
        st.raw_stats = nx.gaussian_merge(st.raw_stats, self.raw_features(x))
        return st.raw_stats

    # ------------------------------------------------------------------ gate

    def train_gate(self, rng: nx.RngStream, n_samples: int | None = None, steps: int | None = None):
        """Fit a fresh gate over every known modality on features replayed from raw_stats."""
        n_samples = n_samples or self.config.gate_samples
        steps = self.config.gate_steps if steps is None else steps
        usable = []
        for m, st in self.states.items():
            if st.raw_stats.count >= 2:
                usable.append(m)
            elif st.tasks_completed == 0:
                log.warning("gate: skipping modality %s with %d observation(s)", m, st.raw_stats.count)
            else:
                raise NumericFault("modality lost its feature statistics", {"modality": m})
        gate = RelevanceGate(usable, self.cfg.d_model, self.dtype)
        xs, ys = [], []
        for k, m in enumerate(usable):
            u = nx.gaussian_sample(self.states[m].raw_stats, n_samples, rng.child(m))
            xs.append(torch.as_tensor(u, dtype=self.dtype))
            ys.append(torch.full((n_samples,), k, dtype=torch.long))
        gate.samples = (torch.cat(xs), torch.cat(ys)) if xs else None
        if len(usable) > 1:
            x, y = gate.samples
            opt = nx.Adam([gate.weight, gate.bias], self.config.gate_lr)
            for _ in range(steps):
                opt.zero_grad()
                nx.cross_entropy(gate.logits(x), y).backward()
                opt.step()
            acc = float((gate.logits(x).argmax(1) == y).float().mean())
            if acc < 0.95:
                log.warning("gate training accuracy %.3f below 0.95", acc)
        self.gate = gate
        return gate

    def cross_loss(self, gate: RelevanceGate | None = None) -> float:
        """Summed negative log relevance of the gate's own replayed samples."""
        gate = gate or self.gate
        if gate is None or gate.samples is None:
            return 0.0
        x, y = gate.samples
        with torch.no_grad():
            logp = torch.log_softmax(gate.logits(x), dim=-1)
            return float(-logp.gather(1, y.unsqueeze(1)).sum())

    def relevance(self, x: torch.Tensor = None, features: torch.Tensor | None = None) -> torch.Tensor:
        """Gate softmax over the known modalities for each sample (``[N, k]``)."""
        if features is None:
            features = self.raw_features(x)
        mods = self.modalities
        if len(mods) == 1 and (self.gate is None or self.gate.modalities == mods):
            return torch.ones(features.shape[0], 1, dtype=self.dtype)
        if self.gate is None or self.gate.modalities != mods:
            raise UsageError("relevance gate is stale: modality set changed since it was trained")
        return self.gate.weights(features)

    def compose_from_weights(self, w: torch.Tensor, live: bool = True) -> torch.Tensor:
        """``P̂ = Σ_m' w_m' P̄_m'`` for each row of ``w``; returns ``[N, depth, len, d]``."""
        stack = torch.stack([self.accumulated_P(m, live) for m in self.modalities])
        return torch.einsum("nk,k...->n...", w.to(stack.dtype), stack)

    def compose_prompts(self, x: torch.Tensor, live: bool = True):
        w = self.relevance(x)
        return self.compose_from_weights(w, live), w

    def onehot(self, m: str, n: int) -> torch.Tensor:
        w = torch.zeros(n, len(self.modalities), dtype=self.dtype)
        w[:, self.modalities.index(m)] = 1.0
        return w

    # ------------------------------------------------------------ task cycle

    def begin_task(self, t: int, modalities: list[str], classes: dict[str, list[int]],
                   tokens: dict[int, np.ndarray] | None = None, rng: nx.RngStream | None = None):
        if t < 1 or not modalities:
            raise UsageError("begin_task needs t >= 1 and a nonempty modality set")
        rng = rng or nx.RngStream(self.seed, f"init/task{t}")
        d, r = self.cfg.d_model, self.cfg.head_rank
        for m in modalities:
            if (t, m) in self._begun:
                raise UsageError(f"begin_task called twice for t={t}, modality={m}")
            self._begun.add((t, m))
            st = self._state(m)
            if tokens:
                self._token_table.update({int(c): tuple(int(v) for v in tokens[c]) for c in classes[m]})
            st.snapshot = None if st.prompt_P is None else Snapshot(
                st.prompt_P.clone(), st.prompt_Q.clone(), st.head_delta.clone())
            P = nx.Parameter(self._zeros_prompt())
            Q = nx.Parameter(self._zeros_prompt())
            A = nx.Parameter(rng.child(m).tensor((d, r), d ** -0.5, self.dtype))
            B = nx.Parameter(torch.zeros(r, self.cfg.d_joint, dtype=self.dtype))
            cls = [int(c) for c in classes[m]]
            tok = torch.as_tensor([self._token_table[c] for c in cls], dtype=torch.long)
            self.components[m] = TaskComponents(t, cls, tok, P, Q, A, B,
                                                nx.Adam([P, Q, A, B], self.config.prompt_lr))

    def prepare_task(self, m: str, x: torch.Tensor):
        """Cache relevance weights and snapshot-branch outputs for a task's training set."""
        comp = self.components[m]
        x = x.to(self.dtype)
        if self.config.use_cross and self.config.train_composition == "gate":
            comp.weights = self.relevance(x)
        else:
            comp.weights = self.onehot(m, x.shape[0])
        st = self.states[m]
        if st.snapshot is not None:
            with torch.no_grad():
                comp.snap_features = self.backbone.encode_modality(x, st.snapshot.prompt_P)
                comp.snap_text = self.backbone.encode_text(comp.tokens, st.snapshot.prompt_Q)

    def self_reg_loss(self, m: str, x: torch.Tensor, labels: torch.Tensor,
                      index: torch.Tensor | None = None, parts: bool = False):
        """Mean over the batch of the three output-drift distances.

        ``labels`` index into the task's class list. Returns 0 when ``m`` has no
        previous time step. With ``parts`` the three batch-mean terms are returned.
        """
        comp = self.components[m]
        st = self.states[m]
        zero = torch.zeros((), dtype=self.dtype)
        if st.snapshot is None:
            return (zero, zero, zero) if parts else zero
        snap = st.snapshot
        cur_feat = self.backbone.encode_modality(x, self.accumulated_P(m))
        if index is not None and comp.snap_features is not None:
            old_feat = comp.snap_features[index]
        else:
            with torch.no_grad():
                old_feat = self.backbone.encode_modality(x, snap.prompt_P)
        text_cur = self.backbone.encode_text(comp.tokens, self.accumulated_Q(m))
        if comp.snap_text is not None:
            text_old = comp.snap_text
        else:
            with torch.no_grad():
                text_old = self.backbone.encode_text(comp.tokens, snap.prompt_Q)
        w_old = (self.backbone.head_base + snap.head_delta).detach()
        term_v = nx.l2_norm(cur_feat - old_feat).mean()
        term_l = nx.l2_norm(text_cur[labels] - text_old[labels]).mean()
        term_f = nx.l2_norm(cur_feat @ self.head_matrix(m) - cur_feat @ w_old).mean()
        if parts:
            return term_v, term_l, term_f
        return term_v + term_l + term_f

    def task_loss(self, m: str, x: torch.Tensor, labels: torch.Tensor,
                  index: torch.Tensor | None = None) -> torch.Tensor:
        comp = self.components[m]
        if index is not None and comp.weights is not None:
            w = comp.weights[index]
        elif self.config.use_cross and self.config.train_composition == "gate":
            w = self.relevance(x)
        else:
            w = self.onehot(m, x.shape[0])
        feats = self.backbone.encode_modality(x, self.compose_from_weights(w))
        v = feats @ self.head_matrix(m)
        text = self.backbone.encode_text(comp.tokens, self.accumulated_Q(m))
        return nx.cross_entropy(similarity_logits(v, text, self.cfg.tau), labels)

    def step_loss(self, m, x, labels, lambda_self, index=None):
        task = self.task_loss(m, x, labels, index)
        reg = self.self_reg_loss(m, x, labels, index) if lambda_self > 0 else torch.zeros((), dtype=self.dtype)
        return task, reg, task + lambda_self * reg

    def labels_for(self, m: str, class_ids: torch.Tensor) -> torch.Tensor:
        lookup = {c: i for i, c in enumerate(self.components[m].classes)}
        return torch.as_tensor([lookup[int(c)] for c in class_ids], dtype=torch.long)

    def task_step(self, m: str, x: torch.Tensor, class_ids: torch.Tensor,
                  lambda_self: float | None = None, index: torch.Tensor | None = None,
                  context: dict | None = None) -> LossBreakdown:
        """One Adam step on (P^t_m, Q^t_m, alpha^t_m)."""
        if m not in self.components:
            raise UsageError(f"task_step before begin_task for modality {m}")
        if lambda_self is None:
            lambda_self = self.config.lambda_self if self.config.use_self else 0.0
        comp = self.components[m]
        x = x.to(self.dtype)
        labels = self.labels_for(m, class_ids)
        task, reg, total = self.step_loss(m, x, labels, lambda_self, index)
        if not torch.isfinite(total):
            raise NumericFault("non-finite training loss", {"t": comp.t, "modality": m, **(context or {})})
        comp.optimizer.zero_grad()
        total.backward()
        comp.optimizer.step()
        return LossBreakdown(float(task.detach()), float(reg.detach()), self.cross_loss(), float(total.detach()))

    @torch.no_grad()
    def end_task(self, t: int, m: str, x: torch.Tensor, class_ids: torch.Tensor) -> ModalityState:
        """Fold the trained components into P̄, Q̄, ᾱ and record class statistics."""
        comp = self.components.get(m)
        if comp is None or comp.t != t:
            raise UsageError(f"end_task for t={t}, modality={m} without a matching begin_task")
        x = x.to(self.dtype)
        w = comp.weights if comp.weights is not None and comp.weights.shape[0] == x.shape[0] else (
            self.relevance(x) if self.config.use_cross and self.config.train_composition == "gate"
            else self.onehot(m, x.shape[0]))
        st = self.states[m]
        st.prompt_P = accumulate(st.prompt_P, comp.P.value)
        st.prompt_Q = accumulate(st.prompt_Q, comp.Q.value)
        st.head_delta = accumulate(st.head_delta, comp.A.value @ comp.B.value)
        del self.components[m]
        feats = self.backbone.encode_modality(x, self.compose_from_weights(w, live=False))
        ids = torch.as_tensor(class_ids)
        for c in comp.classes:
            sel = feats[ids == c]
            if sel.shape[0]:
                prior = st.class_stats.get(c, nx.GaussianModel.empty(self.cfg.d_model))
                st.class_stats[c] = nx.gaussian_merge(prior, sel)
            if c not in st.class_ids():
                st.registry.append((c, self._token_table[c]))
        st.snapshot = None
        st.tasks_completed += 1
        return st

    # ------------------------------------------------------------- realign

    def text_embeddings(self, m: str, class_ids: list[int] | None = None) -> torch.Tensor:
        st = self.states[m]
        ids = st.class_ids() if class_ids is None else class_ids
        tok = torch.as_tensor([self._token_table[c] for c in ids], dtype=torch.long)
        with torch.no_grad():
            return self.backbone.encode_text(tok, self.accumulated_Q(m, live=False))

    def replay_class_features(self, m: str, n_per_class: int, rng: nx.RngStream):
        st = self.states[m]
        xs, ys = [], []
        for k, c in enumerate(st.class_ids()):
            if c not in st.class_stats:
                raise NumericFault("class statistics missing", {"modality": m, "class": c})
            xs.append(torch.as_tensor(nx.gaussian_sample(st.class_stats[c], n_per_class, rng.child(str(c))),
                                      dtype=self.dtype))
            ys.append(torch.full((n_per_class,), k, dtype=torch.long))
        return torch.cat(xs), torch.cat(ys)

    def realign_heads(self, m: str, current_classes: list[int], rng: nx.RngStream,
                      samples_per_class: int | None = None, steps: int | None = None) -> dict | None:
        """Fit a fresh low-rank head correction on replayed features of all m's classes.

        No-op (returns None) when every registered class belongs to the current task.
        Returns accuracy on the replayed set before and after.
        """
        st = self.states[m]
        if m in self.components:
            raise UsageError("realign_heads called while a task is in progress")
        if set(st.class_ids()) <= set(int(c) for c in current_classes):
            return None
        samples_per_class = samples_per_class or self.config.realign_samples
        steps = self.config.realign_steps if steps is None else steps
        feats, labels = self.replay_class_features(m, samples_per_class, rng.child("replay"))
        text = self.text_embeddings(m)
        d, r = self.cfg.d_model, self.cfg.head_rank
        A = nx.Parameter(rng.child("A").tensor((d, r), d ** -0.5, self.dtype))
        B = nx.Parameter(torch.zeros(r, self.cfg.d_joint, dtype=self.dtype))
        base = self.head_matrix(m, live=False).detach()

        def accuracy():
            with torch.no_grad():
                logits = similarity_logits(feats @ (base + A.value @ B.value), text, self.cfg.tau)
                return float((logits.argmax(1) == labels).float().mean())

        before = accuracy()
        opt = nx.Adam([A, B], self.config.realign_lr)
        for _ in range(steps):
            opt.zero_grad()
            loss = nx.cross_entropy(similarity_logits(feats @ (base + A.value @ B.value), text, self.cfg.tau),
                                    labels)
            loss.backward()
            opt.step()
        after = accuracy()
        st.head_delta = accumulate(st.head_delta, (A.value @ B.value).detach())
        return {"before": before, "after": after}

    # ------------------------------------------------------------ inference

    @torch.no_grad()
    def predict(self, x: torch.Tensor, mode: str, modality: str | None = None,
                specific_composition: str = "onehot") -> tuple[torch.Tensor, list[int]]:
        """Predicted class ids for ``x``.

        ``specific``: prompts/head/candidates of the given modality.
        ``agnostic``: gate-composed prompt, head of the top-weighted modality,
        candidates drawn from every modality.
        """
        x = x.to(self.dtype)
        mods = self.modalities
        if mode == "specific":
            if specific_composition == "gate" and self.config.use_cross:
                w = self.relevance(x)
            else:
                w = self.onehot(modality, x.shape[0])
            feats = self.backbone.encode_modality(x, self.compose_from_weights(w, live=False))
            ids = self.states[modality].class_ids()
            logits = similarity_logits(feats @ self.head_matrix(modality, live=False),
                                       self.text_embeddings(modality), self.cfg.tau)
            return torch.as_tensor(ids)[logits.argmax(1)], ids
        if mode != "agnostic":
            raise ConfigError(f"unknown evaluation mode {mode!r}")
        raw = self.raw_features(x)
        if self.config.use_cross:
            w = self.relevance(features=raw)
        else:
            w = self.nearest_modality(raw)
        feats = self.backbone.encode_modality(x, self.compose_from_weights(w, live=False))
        pick = w.argmax(1)
        all_ids = [c for m in mods for c in self.states[m].class_ids()]
        texts = torch.cat([self.text_embeddings(m) for m in mods])
        preds = torch.empty(x.shape[0], dtype=torch.long)
        for k, m in enumerate(mods):
            sel = pick == k
            if bool(sel.any()):
                logits = similarity_logits(feats[sel] @ self.head_matrix(m, live=False), texts, self.cfg.tau)
                preds[sel] = torch.as_tensor(all_ids)[logits.argmax(1)]
        return preds, all_ids

    def nearest_modality(self, raw: torch.Tensor) -> torch.Tensor:
        """One-hot selection by nearest raw-feature mean (used when the gate is disabled)."""
        means = torch.stack([torch.as_tensor(self.states[m].raw_stats.mean, dtype=self.dtype)
                             for m in self.modalities])
        pick = torch.cdist(raw, means).argmin(1)
        return torch.nn.functional.one_hot(pick, len(self.modalities)).to(self.dtype)

    # ------------------------------------------------------------ accounting

    def count_parameters(self) -> tuple[int, int]:
        """(fresh trainable components, everything retained across steps)."""
        trainable = sum(p.numel() for comp in self.components.values() for p in comp.parameters())
        d = self.cfg.d_model
        prompt = int(np.prod(self.cfg.prompt_shape))
        per_mod = 2 * prompt + d * self.cfg.d_joint + d + d * d
        total = per_mod * len(self.states)
        if self.config.use_cross:
            total += (d + 1) * len(self.states)
        return trainable, total

    def task_trainable_size(self) -> int:
        d, r = self.cfg.d_model, self.cfg.head_rank
        return 2 * int(np.prod(self.cfg.prompt_shape)) + d * r + r * self.cfg.d_joint
