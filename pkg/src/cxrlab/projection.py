"""Embedding-space projection: a small MLP translating one text encoder's
embeddings into another's, with hand-written backpropagation.

Architecture (input -> output): Linear -> LayerNorm -> ReLU -> Linear.
Trained with mean squared error over paired source/target embeddings,
either one vector per document or one vector per token position.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatch, NonFiniteLoss, NoPairs
from .io_utils import load_checkpoint, save_checkpoint
from .ingestion import PromptCorpus
from .optim import make_optimizer

LN_EPS = 1e-5


class ProjectionMLP:
    """D -> H -> D translator; parameters live in a name -> array dict so
    the shared optimizers apply."""

    PARAM_NAMES = ("W1", "b1", "ln_gamma", "ln_beta", "W2", "b2")

    def __init__(self, dim=768, hidden=768, seed=0):
        self.dim = dim
        self.hidden = hidden
        rng = np.random.default_rng(seed)
        bound1 = 1.0 / np.sqrt(dim)
        bound2 = 1.0 / np.sqrt(hidden)
        self.params = {
            "W1": rng.uniform(-bound1, bound1, size=(dim, hidden)),
            "b1": np.zeros(hidden),
            "ln_gamma": np.ones(hidden),
            "ln_beta": np.zeros(hidden),
            "W2": rng.uniform(-bound2, bound2, size=(hidden, dim)),
            "b2": np.zeros(dim),
        }

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimMismatch(f"expected (*, {self.dim}) input, got {x.shape}")
        return x, squeeze

    def forward(self, x):
        """Returns (output, cache-for-backward). Row-wise over inputs."""
        x, squeeze = self._check_input(x)
        p = self.params
        u = x @ p["W1"] + p["b1"]
        mu = u.mean(axis=1, keepdims=True)
        var = u.var(axis=1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + LN_EPS)
        xhat = (u - mu) * inv_std
        ln = p["ln_gamma"] * xhat + p["ln_beta"]
        r = np.maximum(ln, 0.0)
        y = r @ p["W2"] + p["b2"]
        cache = (x, xhat, inv_std, ln, r, squeeze)
        return (y[0] if squeeze else y), cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, dy):
        """Gradients of a scalar loss given d(loss)/d(output)."""
        x, xhat, inv_std, ln, r, squeeze = cache
        p = self.params
        if squeeze:
            dy = np.asarray(dy)[None, :]
        grads = {}
        grads["W2"] = r.T @ dy
        grads["b2"] = dy.sum(axis=0)
        dr = dy @ p["W2"].T
        dln = dr * (ln > 0.0)
        grads["ln_gamma"] = (dln * xhat).sum(axis=0)
        grads["ln_beta"] = dln.sum(axis=0)
        dxhat = dln * p["ln_gamma"]
        h = xhat.shape[1]
        du = inv_std * (dxhat
                        - dxhat.mean(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        grads["W1"] = x.T @ du
        grads["b1"] = du.sum(axis=0)
        return grads

    def loss_and_grads(self, x, target):
        """MSE loss (mean over rows of squared error norms) + gradients."""
        y, cache = self.forward(x)
        y2 = y if y.ndim == 2 else y[None, :]
        t2 = np.asarray(target, dtype=np.float64)
        if t2.ndim == 1:
            t2 = t2[None, :]
        if t2.shape != y2.shape:
            raise DimMismatch(f"target shape {t2.shape} != output {y2.shape}")
        diff = y2 - t2
        loss = float(np.mean(np.sum(diff ** 2, axis=1)))
        dy = 2.0 * diff / diff.shape[0]
        if y.ndim == 1:
            dy = dy[0]
        return loss, self.backward(cache, dy)

    def save(self, path, mode="document", seed=0, step=0):
        header = {"kind": "projection_mlp", "dim": self.dim,
                  "hidden": self.hidden, "mode": mode, "seed": seed,
                  "step": step}
        save_checkpoint(path, header, self.params)

    @classmethod
    def load(cls, path):
        header, arrays = load_checkpoint(path)
        mlp = cls(dim=header["dim"], hidden=header["hidden"])
        mlp.params.update(arrays)
        return mlp, header


def project(mlp: ProjectionMLP, x):
    return mlp(x)


@dataclass
class ProjectionTrainConfig:
    mode: str = "document"             # document | token
    learning_rate: float = 1e-2
    steps: int = 500
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "sgd"             # sgd | adam
    hidden: int = 768
    max_length_ratio_gap: float = 0.25


def _align_token_pairs(source, target, max_gap):
    """Truncate each (Ts x D, Tt x D) pair to the shorter length; drop pairs
    whose lengths differ by more than the allowed ratio."""
    kept, dropped = [], 0
    for s, t in zip(source, target):
        s = np.asarray(s, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        longer, shorter = max(len(s), len(t)), min(len(s), len(t))
        if shorter == 0 or (longer - shorter) / longer > max_gap:
            dropped += 1
            continue
        kept.append((s[:shorter], t[:shorter]))
    return kept, dropped


def train_projection(source, target, cfg: ProjectionTrainConfig):
    """Fit the projection on paired embeddings.

    Returns (mlp, info) where info holds the loss trace and alignment
    counters. Deterministic for a fixed cfg.seed.
    """
    if len(source) != len(target) or len(source) == 0:
        raise NoPairs(f"{len(source)} source vs {len(target)} target records")

    dropped = 0
    if cfg.mode == "token":
        pairs, dropped = _align_token_pairs(source, target,
                                            cfg.max_length_ratio_gap)
        if not pairs:
            raise NoPairs("no aligned token pairs after length filtering")
        xs = np.concatenate([s for s, _ in pairs], axis=0)
        ys = np.concatenate([t for _, t in pairs], axis=0)
    else:
        xs = np.stack([np.asarray(s, dtype=np.float64) for s in source])
        ys = np.stack([np.asarray(t, dtype=np.float64) for t in target])

    dim = xs.shape[1]
    if ys.shape[1] != dim:
        raise DimMismatch(f"source dim {dim} != target dim {ys.shape[1]}")

    mlp = ProjectionMLP(dim=dim, hidden=cfg.hidden, seed=cfg.seed)
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    trace = []
    for step in range(cfg.steps):
        idx = rng.integers(0, xs.shape[0], size=cfg.batch_size)
        loss, grads = mlp.loss_and_grads(xs[idx], ys[idx])
        if not np.isfinite(loss):
            raise NonFiniteLoss(step, loss)
        trace.append(loss)
        opt.step(mlp.params, grads)
    info = {"loss_trace": trace, "n_rows": int(xs.shape[0]),
            "dropped_pairs": dropped, "mode": cfg.mode}
    return mlp, info


def loss_trace_csv(trace) -> str:
    lines = ["step,loss"]
    lines += [f"{i},{v:.10g}" for i, v in enumerate(trace)]
    return "\n".join(lines) + "\n"


OBJECT_TEMPLATES = (
    "a photo of a {}",
    "a photograph of a {}",
    "a cropped photo of a {}",
    "a close-up photo of a {}",
)
STYLE_TEMPLATES = (
    "a photo in the style of a {}",
    "a picture in the style of a {}",
    "a rendering in the style of a {}",
    "an image in the style of a {}",
)


def expand_prompt_templates(concepts, family="object", variants=None):
    """Deterministic prompt corpus from concept names.

    family 'object' -> "a photo of a ..." templates, 'style' -> "a photo in
    the style of a ..." templates. Pass variants=() to keep only the base
    template per concept.
    """
    if not concepts:
        raise NoPairs("no concepts given")
    if family == "object":
        base, extra = OBJECT_TEMPLATES[0], OBJECT_TEMPLATES[1:]
    elif family == "style":
        base, extra = STYLE_TEMPLATES[0], STYLE_TEMPLATES[1:]
    else:
        raise DimMismatch(f"unknown template family {family!r}")
    templates = (base,) + tuple(extra if variants is None else variants)
    prompts = [tpl.format(c) for c in concepts for tpl in templates]
    return PromptCorpus(prompts=prompts, origin="template-expanded")
