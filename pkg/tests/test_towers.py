import math

import pytest
import torch

from commcl import numerics as nx
from commcl.errors import ConfigError, DataError, PretrainingFault
from commcl.towers import (Backbone, EncoderConfig, ProjectionHead, class_probabilities, pretrain_backbone,
                           project, similarity_logits)

from conftest import tiny_encoder


def _reference_block(blk, x, prompt=None):
    """Plain re-implementation of a prompted block in float64."""
    P = {k: v.detach().double() for k, v in blk.named_parameters()}
    x = x.double()

    def ln(t, g, b):
        mu = t.mean(-1, keepdim=True)
        var = ((t - mu) ** 2).mean(-1, keepdim=True)
        return (t - mu) / torch.sqrt(var + 1e-5) * g + b

    def heads(t):
        n, s, d = t.shape
        return t.reshape(n, s, blk.num_heads, d // blk.num_heads).permute(0, 2, 1, 3)

    def attend(q, k, v):
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        w = torch.exp(scores - scores.max(-1, keepdim=True).values)
        return (w / w.sum(-1, keepdim=True)) @ v

    n, s, d = x.shape
    h = ln(x, P["ln1_g"], P["ln1_b"])
    q = heads(h @ P["w_q"] + P["b_q"])
    out = attend(q, heads(h @ P["w_k"] + P["b_k"]), heads(h @ P["w_v"] + P["b_v"]))
    if prompt is not None:
        pr = prompt.double().expand(n, *prompt.shape[-2:])
        out = out + attend(q, heads(pr @ P["w_k"] + P["b_k"]), heads(pr @ P["w_v"]))
    a = out.permute(0, 2, 1, 3).reshape(n, s, d)
    x = x + a @ P["w_o"] + P["b_o"]
    z = ln(x, P["ln2_g"], P["ln2_b"]) @ P["w_1"] + P["b_1"]
    gelu = 0.5 * z * (1 + torch.tanh(math.sqrt(2 / math.pi) * (z + 0.044715 * z ** 3)))
    return x + gelu @ P["w_2"] + P["b_2"]


def test_block_matches_reference(tiny_backbone):
    blk = tiny_backbone.modality.blocks[0]
    g = torch.Generator().manual_seed(0)
    x = torch.randn(3, 5, 8, generator=g)
    prompt = torch.randn(2, 8, generator=g)
    torch.testing.assert_close(blk(x).double(), _reference_block(blk, x), atol=1e-5, rtol=1e-5)
    torch.testing.assert_close(blk(x, prompt).double(), _reference_block(blk, x, prompt), atol=1e-5, rtol=1e-5)


def test_zero_prompt_is_exactly_neutral(tiny_backbone):
    cfg = tiny_backbone.cfg
    x = torch.randn(4, 3, 4, cfg.d_model)
    zero = torch.zeros(cfg.prompt_shape)
    assert torch.equal(tiny_backbone.encode_modality(x, zero), tiny_backbone.encode_modality(x))
    tok = torch.tensor([[1, 2, 3], [0, 5, 9]])
    assert torch.equal(tiny_backbone.encode_text(tok, zero), tiny_backbone.encode_text(tok))


def test_zero_prompt_receives_gradient(tiny_backbone):
    cfg = tiny_backbone.cfg
    p = torch.zeros(cfg.prompt_shape, requires_grad=True)
    tiny_backbone.encode_modality(torch.randn(2, 1, 4, cfg.d_model), p).pow(2).sum().backward()
    assert p.grad.abs().sum() > 0


def test_prompts_only_reach_the_first_layers():
    cfg = tiny_encoder(num_layers=3, prompt_depth=2)
    bb = Backbone(cfg, seed=1).freeze()
    x = torch.randn(2, 1, 4, cfg.d_model)
    seen = []
    for blk in bb.modality.blocks:
        blk.register_forward_hook(lambda m, args, out: seen.append(len(args) > 1 and args[1] is not None))
    bb.encode_modality(x, torch.randn(cfg.prompt_shape))
    assert seen == [True, True, False]


def test_per_sample_prompts_match_shared(tiny_backbone):
    cfg = tiny_backbone.cfg
    x = torch.randn(3, 2, 4, cfg.d_model)
    p = torch.randn(cfg.prompt_shape)
    shared = tiny_backbone.encode_modality(x, p)
    stacked = tiny_backbone.encode_modality(x, p.expand(3, *cfg.prompt_shape))
    torch.testing.assert_close(shared, stacked)


def test_temporal_pooling_of_identical_slices(tiny_backbone):
    cfg = tiny_backbone.cfg
    frame = torch.randn(2, 1, 4, cfg.d_model)
    p = torch.randn(cfg.prompt_shape)
    still = tiny_backbone.encode_modality(frame, p)
    clip = tiny_backbone.encode_modality(frame.expand(2, 3, 4, cfg.d_model), p)
    torch.testing.assert_close(still, clip)


def test_temporal_pooling_is_mean_of_slices(tiny_backbone):
    cfg = tiny_backbone.cfg
    x = torch.randn(2, 3, 4, cfg.d_model)
    pooled = tiny_backbone.encode_modality(x)
    per_slice = torch.stack([tiny_backbone.encode_modality(x[:, i:i + 1]) for i in range(3)], 1)
    torch.testing.assert_close(pooled, per_slice.mean(1), atol=1e-6, rtol=1e-5)


def test_geometry_and_vocabulary_errors(tiny_backbone):
    cfg = tiny_backbone.cfg
    with pytest.raises(ConfigError):
        tiny_backbone.encode_modality(torch.randn(2, 4, cfg.d_model))
    with pytest.raises(ConfigError):
        tiny_backbone.encode_modality(torch.randn(1, 1, 4, cfg.d_model), torch.zeros(3, 3, 3))
    with pytest.raises(DataError):
        tiny_backbone.encode_text(torch.tensor([[1, 2, cfg.vocab_size]]))
    with pytest.raises(ConfigError):
        EncoderConfig(d_model=30, num_heads=4)
    with pytest.raises(ConfigError):
        EncoderConfig(num_layers=2, prompt_depth=3)


def test_similarity_probabilities(tiny_backbone):
    v = torch.randn(5, 8)
    text = torch.randn(3, 8)
    logits = similarity_logits(v, text, 0.07)
    torch.testing.assert_close(logits * 0.07, nx.cosine_matrix(v, text))
    probs = class_probabilities(v, text)
    torch.testing.assert_close(probs.sum(1), torch.ones(5))
    assert class_probabilities(v[0], text).shape == (3,)


def test_full_rank_head_recovers_least_squares_delta():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(32, 4, generator=g, dtype=torch.float64)
    base = torch.randn(4, 4, generator=g, dtype=torch.float64)
    y = x @ (base + torch.randn(4, 4, generator=g, dtype=torch.float64))
    # oracle: unconstrained additive delta by least squares
    delta = torch.linalg.lstsq(x, y - x @ base).solution
    A = nx.Parameter(torch.randn(4, 4, generator=g, dtype=torch.float64) * 0.5)
    B = nx.Parameter(torch.zeros(4, 4, dtype=torch.float64))
    opt = nx.Adam([A, B], 0.02)
    for i in range(4000):
        if i == 3000:
            for s in opt.states:
                s.learning_rate = 0.002
        opt.zero_grad()
        head = ProjectionHead(base, A.value, B.value)
        ((project(x, head) - y) ** 2).mean().backward()
        opt.step()
    torch.testing.assert_close(A.value.detach() @ B.value.detach(), delta, atol=1e-4, rtol=0)


def test_pretraining_is_deterministic(tiny_world):
    corpus = tiny_world.pretrain_corpus()
    a, ra = pretrain_backbone(corpus, tiny_encoder(), seed=0, steps=5, min_retrieval=0.0)
    b, rb = pretrain_backbone(corpus, tiny_encoder(), seed=0, steps=5, min_retrieval=0.0)
    assert ra.weights_hash == rb.weights_hash == a.weights_hash()
    assert not any(p.requires_grad for p in a.parameters())


def test_pretraining_below_floor_faults(tiny_world):
    with pytest.raises(PretrainingFault):
        pretrain_backbone(tiny_world.pretrain_corpus(), tiny_encoder(), steps=1, min_retrieval=1.01)


def test_pretraining_learns_retrieval(tiny_pretrained):
    _, report = tiny_pretrained
    assert report.retrieval >= 0.9
