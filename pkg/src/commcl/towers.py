"""Frozen two-tower backbone with deep prompting and low-rank projection heads.

Prompt tokens enter each of the first ``prompt_depth`` blocks as extra
keys/values. They are attended through a separate softmax whose result is
*added* to the ordinary self-attention output, and their value projection has
no bias. An all-zero prompt therefore contributes exactly nothing (the block
reproduces prompt-free attention bit-for-bit) while the gradient with respect
to the prompt is still nonzero, so zero-initialized prompts can learn.
Prompt outputs are never carried to the next block: each prompted block gets
its own fresh prompt row, and blocks past ``prompt_depth`` see no prompts.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .errors import ConfigError, DataError, PretrainingFault


@dataclass
class EncoderConfig:
    num_layers: int = 4
    d_model: int = 32
    num_heads: int = 4
    prompt_depth: int = 2
    prompt_len: int = 4
    vocab_size: int = 64
    max_tokens: int = 16
    text_len: int = 4
    mlp_ratio: int = 2
    head_rank: int = 4
    tau: float = 0.07

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ConfigError("d_model must be divisible by num_heads")
        if not 1 <= self.prompt_depth <= self.num_layers:
            raise ConfigError("prompt_depth must lie in [1, num_layers]")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")

    @property
    def d_joint(self) -> int:
        return self.d_model

    @property
    def prompt_shape(self) -> tuple[int, int, int]:
        return (self.prompt_depth, self.prompt_len, self.d_model)

    def to_dict(self) -> dict:
        return asdict(self)


def _init(rng: nx.RngStream, shape, scale) -> nn.Parameter:
    return nn.Parameter(rng.tensor(shape, scale))


def _zeros(*shape) -> nn.Parameter:
    return nn.Parameter(torch.zeros(*shape))


def _ones(*shape) -> nn.Parameter:
    return nn.Parameter(torch.ones(*shape))


class Block(nn.Module):
    """Pre-LN transformer block with an optional additive prompt branch."""

    def __init__(self, cfg: EncoderConfig, rng: nx.RngStream):
        super().__init__()
        d, hidden = cfg.d_model, cfg.d_model * cfg.mlp_ratio
        s = 1.0 / math.sqrt(d)
        self.num_heads = cfg.num_heads
        self.ln1_g, self.ln1_b = _ones(d), _zeros(d)
        self.w_q, self.b_q = _init(rng.child("q"), (d, d), s), _zeros(d)
        self.w_k, self.b_k = _init(rng.child("k"), (d, d), s), _zeros(d)
        self.w_v, self.b_v = _init(rng.child("v"), (d, d), s), _zeros(d)
        self.w_o, self.b_o = _init(rng.child("o"), (d, d), s), _zeros(d)
        self.ln2_g, self.ln2_b = _ones(d), _zeros(d)
        self.w_1, self.b_1 = _init(rng.child("mlp1"), (d, hidden), s), _zeros(hidden)
        self.w_2, self.b_2 = _init(rng.child("mlp2"), (hidden, d), 1.0 / math.sqrt(hidden)), _zeros(d)

    def forward(self, x: torch.Tensor, prompt: torch.Tensor | None = None) -> torch.Tensor:
        h = nx.layer_norm(x, self.ln1_g, self.ln1_b)
        q = h @ self.w_q + self.b_q
        k = h @ self.w_k + self.b_k
        v = h @ self.w_v + self.b_v
        a = nx.attention(q, k, v, self.num_heads)
        if prompt is not None:
            pk = prompt @ self.w_k + self.b_k
            pv = prompt @ self.w_v
            a = a + nx.attention(q, pk, pv, self.num_heads)
        x = x + a @ self.w_o + self.b_o
        m = nx.gelu(nx.layer_norm(x, self.ln2_g, self.ln2_b) @ self.w_1 + self.b_1)
        return x + m @ self.w_2 + self.b_2


class _Tower(nn.Module):
    def __init__(self, cfg: EncoderConfig, rng: nx.RngStream, seq_len: int):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.pos = _init(rng.child("pos"), (seq_len, d), 0.1)
        self.readout = _init(rng.child("readout"), (d,), 0.1)
        self.blocks = nn.ModuleList(Block(cfg, rng.child(f"block{i}")) for i in range(cfg.num_layers))
        self.lnf_g, self.lnf_b = _ones(d), _zeros(d)

    def _check_prompts(self, prompts, batch):
        if prompts is None:
            return
        shape = tuple(prompts.shape[-3:])
        if shape != self.cfg.prompt_shape or prompts.dim() not in (3, 4):
            raise ConfigError(f"prompt stack {tuple(prompts.shape)} does not match {self.cfg.prompt_shape}")
        if prompts.dim() == 4 and prompts.shape[0] != batch:
            raise ConfigError("per-sample prompt stack batch does not match input batch")

    def _run(self, x: torch.Tensor, prompts, repeat: int = 1) -> torch.Tensor:
        """``x`` is ``[N, S, d]`` already embedded; returns final readout states ``[N, d]``."""
        n = x.shape[0]
        x = torch.cat([self.readout.expand(n, 1, -1), x], dim=1)
        for layer, block in enumerate(self.blocks):
            p = None
            if prompts is not None and layer < self.cfg.prompt_depth:
                p = prompts[..., layer, :, :]
                if p.dim() == 3 and repeat > 1:
                    p = p.repeat_interleave(repeat, dim=0)
            x = block(x, p)
        return nx.layer_norm(x[:, 0], self.lnf_g, self.lnf_b)


class ModalityEncoder(_Tower):
    """Shared encoder for all non-text modalities."""

    def __init__(self, cfg: EncoderConfig, rng: nx.RngStream):
        super().__init__(cfg, rng, cfg.max_tokens)
        d = cfg.d_model
        self.w_in = _init(rng.child("w_in"), (d, d), 1.0 / math.sqrt(d))
        self.b_in = _zeros(d)

    def forward(self, tokens: torch.Tensor, prompts: torch.Tensor | None = None) -> torch.Tensor:
        """``tokens`` is ``[N, T, S, d]``; prompts ``[depth, len, d]`` or ``[N, depth, len, d]``.

        Returns the temporally mean-pooled readout feature ``[N, d]``.
        """
        if tokens.dim() != 4 or tokens.shape[-1] != self.cfg.d_model or tokens.shape[2] > self.cfg.max_tokens:
            raise ConfigError(f"token geometry {tuple(tokens.shape)} does not fit the encoder")
        n, t, s, d = tokens.shape
        self._check_prompts(prompts, n)
        x = tokens.reshape(n * t, s, d) @ self.w_in + self.b_in + self.pos[:s]
        feats = self._run(x, prompts, repeat=t)
        return feats.reshape(n, t, d).mean(dim=1)


class TextEncoder(_Tower):
    def __init__(self, cfg: EncoderConfig, rng: nx.RngStream):
        super().__init__(cfg, rng, cfg.text_len)
        self.embed = _init(rng.child("embed"), (cfg.vocab_size, cfg.d_model), 1.0)
        self.w_out = _init(rng.child("w_out"), (cfg.d_model, cfg.d_joint), 1.0 / math.sqrt(cfg.d_model))

    def forward(self, token_ids: torch.Tensor, prompts: torch.Tensor | None = None) -> torch.Tensor:
        """``token_ids`` is ``[C, text_len]``; returns text embeddings ``[C, d_joint]``."""
        token_ids = torch.as_tensor(token_ids, dtype=torch.long)
        if token_ids.dim() != 2 or token_ids.shape[1] > self.cfg.text_len:
            raise ConfigError(f"class token array {tuple(token_ids.shape)} has the wrong geometry")
        if bool((token_ids < 0).any()) or bool((token_ids >= self.cfg.vocab_size).any()):
            raise DataError("class token id outside the vocabulary")
        if prompts is not None and prompts.dim() != 3:
            raise ConfigError("text prompts are shared across classes: expected [depth, len, d]")
        self._check_prompts(prompts, token_ids.shape[0])
        x = self.embed[token_ids] + self.pos[: token_ids.shape[1]]
        return self._run(x, prompts) @ self.w_out


class Backbone(nn.Module):
    """Modality tower, text tower, and the pretrained modality projection base."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = nx.RngStream(seed, "init/backbone")
        self.modality = ModalityEncoder(cfg, rng.child("modality"))
        self.text = TextEncoder(cfg, rng.child("text"))
        self.head_base = _init(rng.child("head"), (cfg.d_model, cfg.d_joint), 1.0 / math.sqrt(cfg.d_model))

    def encode_modality(self, tokens, prompts=None):
        return self.modality(tokens, prompts)

    def encode_text(self, token_ids, prompts=None):
        return self.text(token_ids, prompts)

    def freeze(self) -> "Backbone":
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def base_head(self) -> "ProjectionHead":
        """A fresh rank-0 head on the frozen pretrained base."""
        d = self.cfg.d_model
        return ProjectionHead(self.head_base.detach(), torch.zeros(d, 0, dtype=self.head_base.dtype),
                              torch.zeros(0, self.cfg.d_joint, dtype=self.head_base.dtype))

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in self.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    @property
    def dtype(self):
        return self.head_base.dtype


@dataclass
class ProjectionHead:
    base: torch.Tensor
    delta_A: torch.Tensor
    delta_B: torch.Tensor

    @property
    def rank(self) -> int:
        return self.delta_A.shape[1]

    def effective(self) -> torch.Tensor:
        if self.rank == 0:
            return self.base
        return self.base + self.delta_A @ self.delta_B


def project(features: torch.Tensor, head: ProjectionHead | torch.Tensor) -> torch.Tensor:
    """``v = features @ (base + A B)``; a bare matrix is used as the effective map."""
    w = head.effective() if isinstance(head, ProjectionHead) else head
    return nx.matmul(features, w)


def similarity_logits(v: torch.Tensor, text: torch.Tensor, tau: float) -> torch.Tensor:
    return nx.cosine_matrix(v, text) / tau


def class_probabilities(v: torch.Tensor, text: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    """Softmax over cosine similarities to the candidate text embeddings, scaled by ``1/tau``."""
    if tau <= 0:
        raise ConfigError("tau must be positive")
    squeeze = v.dim() == 1
    p = nx.softmax(similarity_logits(v.reshape(-1, v.shape[-1]), text, tau))
    return p[0] if squeeze else p


# --------------------------------------------------------------------------
# contrastive pretraining


@dataclass
class PretrainClass:
    modality: str
    tokens: np.ndarray        # [text_len] class token ids
    train: torch.Tensor       # [n, T, S, d]
    heldout: torch.Tensor     # [n, T, S, d]


@dataclass
class PretrainReport:
    steps: int
    final_loss: float
    retrieval: float
    weights_hash: str


def contrastive_loss(v: torch.Tensor, text: torch.Tensor, tau: float) -> torch.Tensor:
    """Symmetric cross-entropy over matched (row i, row i) pairs."""
    logits = similarity_logits(v, text, tau)
    target = torch.arange(logits.shape[0])
    return 0.5 * (nx.cross_entropy(logits, target) + nx.cross_entropy(logits.T, target))


def _encode_grouped(backbone: Backbone, classes, samples_of) -> torch.Tensor:
    """Encode one tensor per class, batching classes that share a modality."""
    feats = [None] * len(classes)
    groups: dict[str, list[int]] = {}
    for i, c in enumerate(classes):
        groups.setdefault(c.modality, []).append(i)
    for idx in groups.values():
        batch = torch.cat([samples_of(i) for i in idx])
        out = backbone.encode_modality(batch)
        sizes = [samples_of(i).shape[0] for i in idx]
        for i, chunk in zip(idx, torch.split(out, sizes)):
            feats[i] = chunk
    return feats


@torch.no_grad()
def retrieval_accuracy(backbone: Backbone, corpus: list[PretrainClass]) -> float:
    """Top-1 held-out retrieval among all pretraining class names."""
    tokens = torch.as_tensor(np.stack([c.tokens for c in corpus]))
    text = backbone.encode_text(tokens)
    feats = _encode_grouped(backbone, corpus, lambda i: corpus[i].heldout)
    correct = total = 0
    for i, f in enumerate(feats):
        pred = similarity_logits(project(f, backbone.head_base), text, backbone.cfg.tau).argmax(1)
        correct += int((pred == i).sum())
        total += f.shape[0]
    return correct / total


def pretrain_backbone(
    corpus: list[PretrainClass],
    cfg: EncoderConfig,
    seed: int = 0,
    steps: int = 400,
    learning_rate: float = 2e-3,
    per_class: int = 2,
    min_retrieval: float = 0.9,
    log=None,
) -> tuple[Backbone, PretrainReport]:
    """Train both towers and the shared modality projection contrastively, then freeze.

    Each step draws ``per_class`` training samples from every pretraining class;
    the modality->text direction scores each sample against every class name and
    the text->modality direction scores each class name against one sample per
    class, so no batch contains duplicate positives.
    """
    backbone = Backbone(cfg, seed)
    opt = nx.Adam([nx.Parameter.wrap(t) for t in backbone.parameters()], learning_rate)

    rng = nx.RngStream(seed, "pretrain")
    tokens = torch.as_tensor(np.stack([c.tokens for c in corpus]))
    n_cls = len(corpus)
    loss_val = float("nan")
    for step in range(1, steps + 1):
        picks = [rng.integers(0, c.train.shape[0], size=per_class) for c in corpus]
        feats = _encode_grouped(backbone, corpus, lambda i: corpus[i].train[picks[i]])
        v = project(torch.cat(feats), backbone.head_base)           # [n_cls*per_class, d]
        text = backbone.encode_text(tokens)
        logits = similarity_logits(v, text, cfg.tau)
        labels = torch.arange(n_cls).repeat_interleave(per_class)
        first = torch.arange(n_cls) * per_class
        loss = 0.5 * (nx.cross_entropy(logits, labels) + nx.cross_entropy(logits[first].T, torch.arange(n_cls)))
        opt.zero_grad()
        loss.backward()
        opt.step()
        loss_val = float(loss.detach())
        if log is not None and step % 100 == 0:
            log(f"pretrain step {step}: loss {loss_val:.4f}")

    backbone.freeze()
    acc = retrieval_accuracy(backbone, corpus)
    report = PretrainReport(steps, loss_val, acc, backbone.weights_hash())
    if acc < min_retrieval:
        raise PretrainingFault(f"held-out retrieval {acc:.3f} < {min_retrieval} after {steps} steps")
    return backbone, report

