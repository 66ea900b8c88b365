import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from commcl import numerics as nx
from commcl.errors import ConfigError, NumericFault, UsageError

from gradcases import all_cases


@pytest.mark.parametrize("name,f,inputs", all_cases(), ids=lambda v: v if isinstance(v, str) else "")
def test_grad_check_cases(name, f, inputs):
    assert nx.grad_check(f, inputs) < 1e-3


def test_grad_check_catches_wrong_backward():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x ** 2

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x  # should be 2x

    x = torch.tensor([0.5, -1.0, 2.0])
    assert nx.grad_check(lambda t: Bad.apply(t).sum(), x) > 0.1


def test_grad_check_step_bounds():
    with pytest.raises(ConfigError):
        nx.grad_check(lambda t: t.sum(), torch.ones(2), h=1e-6)
    with pytest.raises(ConfigError):
        nx.grad_check(lambda t: t.sum(), torch.ones(2), h=0.1)


def test_add_rejects_non_leading_broadcast():
    with pytest.raises(ConfigError):
        nx.add(torch.ones(3, 4), torch.ones(3, 1))


def test_matmul_shape_error():
    with pytest.raises(ConfigError):
        nx.matmul(torch.ones(2, 3), torch.ones(4, 2))


def test_cosine_zero_vector_faults():
    with pytest.raises(NumericFault):
        nx.cosine_matrix(torch.zeros(1, 3), torch.ones(2, 3))


def test_non_finite_output_faults():
    with pytest.raises(NumericFault):
        nx.softmax(torch.tensor([[float("nan"), 1.0]]))


def test_attention_mask_excludes_keys():
    q = torch.randn(1, 2, 4)
    k = torch.randn(1, 3, 4)
    v = torch.randn(1, 3, 4)
    masked = nx.attention(q, k, v, 2, torch.tensor([True, True, False]))
    dropped = nx.attention(q, k[:, :2], v[:, :2], 2)
    torch.testing.assert_close(masked, dropped)


def test_cross_entropy_uniform_logits():
    z = torch.zeros(5, 7)
    assert nx.cross_entropy(z, torch.arange(5)).item() == pytest.approx(math.log(7), abs=1e-6)


# --------------------------------------------------------------------------
# Adam


def test_adam_matches_torch_optimizer():
    g = torch.Generator().manual_seed(0)
    w0 = torch.randn(4, 3, generator=g)
    target = torch.randn(4, 3, generator=g)
    ours = nx.Parameter(w0.clone())
    ref = torch.nn.Parameter(w0.clone())
    opt = nx.Adam([ours], 0.05)
    ref_opt = torch.optim.Adam([ref], lr=0.05, betas=(0.9, 0.999), eps=1e-8)
    for _ in range(25):
        opt.zero_grad()
        ((ours.value - target) ** 3).abs().sum().backward()
        opt.step()
        ref_opt.zero_grad()
        ((ref - target) ** 3).abs().sum().backward()
        ref_opt.step()
    torch.testing.assert_close(ours.value.detach(), ref.detach(), rtol=1e-5, atol=1e-6)


def test_adam_first_step_moves_by_lr():
    p = nx.Parameter(torch.zeros(3))
    state = nx.AdamState.for_param(p, 0.1)
    p.value.grad = torch.tensor([2.0, -0.5, 0.0])
    nx.adam_update(p, state)
    # bias-corrected first step is lr * sign(g) for nonzero g
    torch.testing.assert_close(p.value.detach(), torch.tensor([-0.1, 0.1, 0.0]), atol=1e-6, rtol=0)


def test_adam_rejects_frozen_parameter():
    p = nx.Parameter(torch.zeros(2), trainable=False)
    with pytest.raises(UsageError):
        nx.adam_update(p, nx.AdamState(torch.zeros(2), torch.zeros(2), 0.1))


def test_adam_rejects_bad_learning_rate():
    with pytest.raises(ConfigError):
        nx.AdamState.for_param(nx.Parameter(torch.zeros(2)), 0.0)


# --------------------------------------------------------------------------
# random streams


def test_rng_stream_is_reproducible_and_label_sensitive():
    a = nx.RngStream(5, "x").normal(10)
    b = nx.RngStream(5, "x").normal(10)
    c = nx.RngStream(5, "y").normal(10)
    d = nx.RngStream(6, "x").normal(10)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)
    assert nx.RngStream(5, "x").child("k").label == "x/k"


# --------------------------------------------------------------------------
# Gaussian statistics


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 60), split=st.integers(1, 59), seed=st.integers(0, 10_000))
def test_gaussian_split_merge_matches_batch(n, split, seed):
    split = min(split, n - 1)
    x = np.random.default_rng(seed).normal(size=(n, 5)) * 3 + 1
    whole = nx.gaussian_merge(nx.GaussianModel.empty(5), x)
    parts = nx.gaussian_merge(nx.gaussian_merge(nx.GaussianModel.empty(5), x[:split]), x[split:])
    assert parts.count == whole.count == n
    np.testing.assert_allclose(parts.mean, whole.mean, rtol=0, atol=1e-12)
    np.testing.assert_allclose(parts.covariance, whole.covariance, rtol=0, atol=1e-5)
    np.testing.assert_allclose(whole.covariance, np.cov(x, rowvar=False, bias=True), atol=1e-10)


def test_gaussian_merge_errors():
    with pytest.raises(ConfigError):
        nx.gaussian_merge(nx.GaussianModel.empty(3), np.zeros((0, 3)))
    with pytest.raises(ConfigError):
        nx.gaussian_merge(nx.GaussianModel.empty(3), np.zeros((2, 4)))


def test_gaussian_sampling_moments():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(6, 6))
    cov = a @ a.T / 6 + 0.1 * np.eye(6)
    model = nx.GaussianModel(rng.normal(size=6), cov, 100)
    draws = nx.gaussian_sample(model, 10_000, nx.RngStream(0, "moments"))
    # standard errors: sqrt(var/n) for the mean, ~sqrt(2/n)*var for the covariance
    assert np.abs(draws.mean(0) - model.mean).max() < 4 * math.sqrt(np.diag(cov).max() / 10_000)
    np.testing.assert_allclose(np.cov(draws, rowvar=False), model.regularized(), atol=0.06 * np.abs(cov).max())


def test_gaussian_sampling_is_bit_reproducible():
    model = nx.GaussianModel(np.zeros(3), np.eye(3), 5)
    a = nx.gaussian_sample(model, 4, nx.RngStream(9, "s"))
    b = nx.gaussian_sample(model, 4, nx.RngStream(9, "s"))
    assert a.tobytes() == b.tobytes()


def test_single_sample_model_is_sampleable():
    model = nx.gaussian_merge(nx.GaussianModel.empty(4), np.arange(4.0)[None])
    assert np.all(model.covariance == 0)
    draws = nx.gaussian_sample(model, 3, nx.RngStream(0, "one"))
    np.testing.assert_allclose(draws, np.tile(np.arange(4.0), (3, 1)), atol=1e-4)


def test_empty_model_cannot_be_sampled():
    with pytest.raises(UsageError):
        nx.gaussian_sample(nx.GaussianModel.empty(2), 1, nx.RngStream(0, "e"))


def test_adam_scalar_convergence():
    x = nx.Parameter(torch.zeros(1))
    opt = nx.Adam([x], 0.1)
    for _ in range(100):
        opt.zero_grad()
        ((x.value - 3) ** 2).sum().backward()
        opt.step()
    assert abs(x.value.item() - 3) < 0.2


def test_adam_zero_gradient_is_a_no_op():
    p = nx.Parameter(torch.tensor([1.5, -2.0]))
    state = nx.AdamState.for_param(p, 0.1)
    p.zero_grad()
    nx.adam_update(p, state)
    assert torch.equal(p.value.detach(), torch.tensor([1.5, -2.0]))
    assert torch.equal(state.first_moment, torch.zeros(2)) and torch.equal(state.second_moment, torch.zeros(2))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.floats(-50, 50), min_size=3, max_size=3), min_size=1, max_size=8))
def test_softmax_is_a_distribution(rows):
    p = nx.softmax(torch.tensor(rows, dtype=torch.float64))
    assert torch.all(p > 0)
    torch.testing.assert_close(p.sum(-1), torch.ones(len(rows), dtype=torch.float64), atol=1e-6, rtol=0)


def test_merge_single_vector_and_equal_weights():
    v = np.array([1.0, -2.0, 0.5])
    one = nx.gaussian_merge(nx.GaussianModel.empty(3), v)
    assert np.array_equal(one.mean, v) and np.all(one.covariance == 0) and one.count == 1
    base = nx.GaussianModel(np.zeros(3), np.zeros((3, 3)), 5)
    merged = nx.gaussian_merge(base, np.full((5, 3), 2.0))
    np.testing.assert_allclose(merged.mean, np.ones(3), atol=1e-15)
    assert merged.count == 10


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000), sizes=st.tuples(st.integers(1, 20), st.integers(1, 20), st.integers(1, 20)))
def test_merge_is_associative(seed, sizes):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.normal(size=(n, 4)) for n in sizes)
    e = nx.GaussianModel.empty(4)
    left = nx.gaussian_merge(nx.gaussian_merge(nx.gaussian_merge(e, a), b), c)
    right = nx.gaussian_merge(nx.gaussian_merge(e, a), np.concatenate([b, c]))
    np.testing.assert_allclose(left.mean, right.mean, atol=1e-12)
    np.testing.assert_allclose(left.covariance, right.covariance, atol=1e-5)


def test_identity_covariance_sampling_tolerances():
    d = 8
    model = nx.GaussianModel(np.full(d, 0.5), np.eye(d), 50)
    draws = nx.gaussian_sample(model, 10_000, nx.RngStream(0, "identity"))
    assert np.linalg.norm(draws.mean(0) - model.mean) < 0.05 * math.sqrt(d)
    assert np.abs(np.cov(draws, rowvar=False) - np.eye(d)).max() < 0.1


def test_zero_covariance_samples_sit_on_the_mean():
    model = nx.GaussianModel(np.array([3.0, -1.0]), np.zeros((2, 2)), 4)
    draws = nx.gaussian_sample(model, 50, nx.RngStream(0, "flat"))
    np.testing.assert_allclose(draws, np.tile(model.mean, (50, 1)), atol=1e-5)


def test_unfactorizable_covariance_faults():
    bad = nx.GaussianModel(np.zeros(2), np.array([[1.0, 5.0], [5.0, 1.0]]), 3)
    with pytest.raises(NumericFault):
        nx.gaussian_sample(bad, 2, nx.RngStream(0, "bad"))
