import numpy as np
import pytest

from cxrlab.errors import DimMismatch, NoPairs
from cxrlab.projection import (
    ProjectionMLP,
    ProjectionTrainConfig,
    expand_prompt_templates,
    loss_trace_csv,
    project,
    train_projection,
)


# --- forward pass --------------------------------------------------------------

def test_forward_shapes():
    mlp = ProjectionMLP(dim=6, hidden=5, seed=0)
    single = mlp(np.ones(6))
    batch = mlp(np.ones((3, 6)))
    assert single.shape == (6,)
    assert batch.shape == (3, 6)
    # batched and single-row matmuls may differ by an ulp
    np.testing.assert_allclose(batch[0], single, rtol=1e-14, atol=1e-14)


def test_forward_dim_mismatch():
    mlp = ProjectionMLP(dim=6, hidden=5)
    with pytest.raises(DimMismatch):
        mlp(np.ones(7))
    with pytest.raises(DimMismatch):
        mlp(np.ones((2, 3, 6)))


def test_loss_target_shape_checked():
    mlp = ProjectionMLP(dim=4, hidden=4)
    with pytest.raises(DimMismatch):
        mlp.loss_and_grads(np.ones((2, 4)), np.ones((3, 4)))


# --- gradient check ---------------------------------------------------------------

def numeric_grad(fn, arr, eps=1e-6):
    """Central finite differences of a scalar function w.r.t. arr in place."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + eps
        hi = fn()
        arr[idx] = orig - eps
        lo = fn()
        arr[idx] = orig
        grad[idx] = (hi - lo) / (2.0 * eps)
        it.iternext()
    return grad


def rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    mlp = ProjectionMLP(dim=5, hidden=7, seed=1)
    x = rng.normal(size=(3, 5))
    target = rng.normal(size=(3, 5))
    _, grads = mlp.loss_and_grads(x, target)
    for name in ProjectionMLP.PARAM_NAMES:
        num = numeric_grad(
            lambda: mlp.loss_and_grads(x, target)[0], mlp.params[name])
        assert rel_err(grads[name], num) < 1e-6, name


def test_gradient_single_vector_input():
    rng = np.random.default_rng(1)
    mlp = ProjectionMLP(dim=4, hidden=6, seed=2)
    x = rng.normal(size=4)
    target = rng.normal(size=4)
    _, grads = mlp.loss_and_grads(x, target)
    for name in ProjectionMLP.PARAM_NAMES:
        num = numeric_grad(
            lambda: mlp.loss_and_grads(x, target)[0], mlp.params[name])
        assert rel_err(grads[name], num) < 1e-6, name


# --- training ------------------------------------------------------------------------

def _linear_pairs(n=64, dim=6, seed=3):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(n, dim))
    m = rng.normal(size=(dim, dim)) * 0.5
    return list(src), list(src @ m)


def test_training_learns_linear_map():
    src, tgt = _linear_pairs()
    cfg = ProjectionTrainConfig(steps=400, learning_rate=5e-3,
                                hidden=32, optimizer="adam", seed=0)
    mlp, info = train_projection(src, tgt, cfg)
    trace = info["loss_trace"]
    assert trace[-1] < 0.1 * trace[0]
    assert info["mode"] == "document" and info["n_rows"] == 64


def test_training_deterministic_bitwise():
    src, tgt = _linear_pairs(n=16)
    cfg = ProjectionTrainConfig(steps=50, hidden=8, seed=5)
    mlp_a, info_a = train_projection(src, tgt, cfg)
    mlp_b, info_b = train_projection(src, tgt, cfg)
    assert info_a["loss_trace"] == info_b["loss_trace"]
    for name in ProjectionMLP.PARAM_NAMES:
        np.testing.assert_array_equal(mlp_a.params[name], mlp_b.params[name])


def test_training_no_pairs():
    with pytest.raises(NoPairs):
        train_projection([], [], ProjectionTrainConfig())
    with pytest.raises(NoPairs):
        train_projection([np.ones(4)], [], ProjectionTrainConfig())


def test_training_dim_mismatch():
    with pytest.raises(DimMismatch):
        train_projection([np.ones(4)] * 4, [np.ones(5)] * 4,
                         ProjectionTrainConfig(steps=1))


def test_token_mode_alignment():
    rng = np.random.default_rng(6)
    # pair 0: 4 vs 3 tokens -> truncated to 3 (gap 1/4 <= 0.25)
    # pair 1: 8 vs 4 tokens -> dropped (gap 4/8 > 0.25)
    src = [rng.normal(size=(4, 3)), rng.normal(size=(8, 3))]
    tgt = [rng.normal(size=(3, 3)), rng.normal(size=(4, 3))]
    cfg = ProjectionTrainConfig(mode="token", steps=5, hidden=4,
                                batch_size=2)
    _, info = train_projection(src, tgt, cfg)
    assert info["n_rows"] == 3
    assert info["dropped_pairs"] == 1


def test_token_mode_all_dropped():
    src = [np.ones((10, 3))]
    tgt = [np.ones((2, 3))]
    with pytest.raises(NoPairs):
        train_projection(src, tgt,
                         ProjectionTrainConfig(mode="token", steps=1))


# --- persistence ------------------------------------------------------------------------

def test_save_load_roundtrip(tmp_path):
    mlp = ProjectionMLP(dim=5, hidden=7, seed=9)
    path = tmp_path / "proj.ckpt.json"
    mlp.save(path, mode="token", seed=9, step=42)
    back, header = ProjectionMLP.load(path)
    assert header["mode"] == "token" and header["step"] == 42
    assert back.dim == 5 and back.hidden == 7
    x = np.random.default_rng(10).normal(size=(3, 5))
    # checkpoints quantize to float32, so compare at that precision
    np.testing.assert_allclose(project(back, x), project(mlp, x),
                               rtol=1e-5, atol=1e-5)


def test_loss_trace_csv():
    text = loss_trace_csv([1.0, 0.25])
    assert text == "step,loss\n0,1\n1,0.25\n"


# --- prompt templates -------------------------------------------------------------------

def test_expand_object_templates():
    corpus = expand_prompt_templates(["lung xray"])
    assert corpus.prompts[0] == "a photo of a lung xray"
    assert len(corpus.prompts) == 4
    assert corpus.origin == "template-expanded"


def test_expand_style_templates():
    corpus = expand_prompt_templates(["sketch"], family="style")
    assert corpus.prompts[0] == "a photo in the style of a sketch"
    assert all("style" in p for p in corpus.prompts)


def test_expand_base_only():
    corpus = expand_prompt_templates(["a", "b"], variants=())
    assert corpus.prompts == ["a photo of a a", "a photo of a b"]


def test_expand_errors():
    with pytest.raises(NoPairs):
        expand_prompt_templates([])
    with pytest.raises(DimMismatch):
        expand_prompt_templates(["x"], family="meme")
