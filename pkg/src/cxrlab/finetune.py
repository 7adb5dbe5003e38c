"""The three adaptation strategies.

Textual inversion trains exactly one newly registered token-embedding
row; U-Net fine-tuning trains the denoiser only, optionally with a
DreamBooth-style prior-preservation term on samples pre-generated from
the frozen bundle. Everything else stays bitwise frozen, which the tests
check via parameter checksums.
"""

from dataclasses import dataclass, field

import numpy as np

from .diffusion import denoise_loss, sample
from .errors import (
    ConfigError,
    EmptyPriorSet,
    NonFiniteLoss,
    TokenNotInCaption,
)
from .io_utils import derive_seed
from .optim import make_optimizer

STRATEGIES = ("textual_inversion", "unet", "unet_with_prior")


@dataclass
class TokenRegistration:
    surface: str
    token_id: int
    init: np.ndarray


@dataclass
class FinetuneConfig:
    strategy: str = "unet"
    steps: int = 400
    learning_rate: float = 1e-2
    batch_size: int = 1
    seed: int = 0
    optimizer: str = "adam"
    prior_weight: float = 1.0
    prior_set: list = field(default_factory=list)   # list of (image, caption)


def register_token(bundle, surface, init_from=None,
                   init_scale=1.0) -> TokenRegistration:
    """Extend the embedding table by one row for a new surface form.

    init_from copies an existing token's embedding; otherwise the row is
    seeded random with std init_scale. A deliberately large init_scale
    perturbs the pooled conditioning enough that inversion training has
    visible signal to remove.
    """
    text = bundle.text
    if init_from is not None:
        src_id = text.tokenize(init_from)[0]
        init = text.embedding[src_id].copy()
    else:
        rng = np.random.default_rng(derive_seed(bundle.seed, "token", surface))
        init = rng.normal(0.0, init_scale, size=text.dim)
    token_id = text.register(surface, init)
    return TokenRegistration(surface=surface, token_id=token_id, init=init)


def _encode_training_latent(bundle, image):
    # mean latent keeps trainer runs deterministic; sampling is opt-in via
    # bundle.vae.encode_sample where an experiment needs it
    return bundle.vae.encode_mean(image)


def _training_step_inputs(bundle, pairs, rng):
    idx = int(rng.integers(0, len(pairs)))
    image, caption = pairs[idx]
    latent = _encode_training_latent(bundle, image)
    t = int(rng.integers(0, bundle.schedule.T))
    eps = rng.standard_normal(latent.shape)
    return latent, caption, t, eps


def _batch_loss_and_grads(bundle, pairs, rng, mask, batch_size):
    """Mini-batch mean of per-draw losses/gradients, accumulated in draw
    order so runs are bit-reproducible."""
    total = 0.0
    acc = None
    for _ in range(batch_size):
        latent, caption, t, eps = _training_step_inputs(bundle, pairs, rng)
        loss, grads = denoise_loss(bundle, latent, caption, t, eps, mask=mask)
        total += loss
        if acc is None:
            acc = grads
        else:
            for name in acc:
                acc[name] = acc[name] + grads[name]
    scale = 1.0 / batch_size
    return total * scale, {name: g * scale for name, g in acc.items()}


def train_textual_inversion(bundle, data, reg: TokenRegistration,
                            cfg: FinetuneConfig):
    """Optimize only the new token's embedding row. Returns a loss trace."""
    if cfg.strategy != "textual_inversion":
        raise ConfigError(f"wrong strategy {cfg.strategy!r} for this trainer")
    pairs = data.pairs() if hasattr(data, "pairs") else list(data)
    surface = reg.surface.lower()
    for _, caption in pairs:
        if surface not in caption.lower().split():
            raise TokenNotInCaption(
                f"caption {caption!r} does not contain {reg.surface!r}")

    row_mask = np.zeros(bundle.text.embedding.shape[0], dtype=bool)
    row_mask[reg.token_id] = True
    mask = {"text.embedding": row_mask[:, None]}

    params = {"text.embedding": bundle.text.embedding}
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    trace = []
    for step in range(cfg.steps):
        loss, grads = _batch_loss_and_grads(bundle, pairs, rng, mask,
                                            cfg.batch_size)
        if not np.isfinite(loss):
            raise NonFiniteLoss(step, loss)
        trace.append(loss)
        opt.step(params, {"text.embedding": grads["text.embedding"]})
    return trace


def train_unet(bundle, data, cfg: FinetuneConfig):
    """Optimize the denoiser only; optional prior-preservation term.

    With strategy unet_with_prior, each step adds prior_weight times the
    loss on one pre-generated (latent, caption) prior pair; total loss is
    instance + lambda * prior and both gradients flow to the denoiser.
    """
    if cfg.strategy not in ("unet", "unet_with_prior"):
        raise ConfigError(f"wrong strategy {cfg.strategy!r} for this trainer")
    with_prior = cfg.strategy == "unet_with_prior"
    if with_prior and not cfg.prior_set:
        raise EmptyPriorSet("unet_with_prior requires a non-empty prior_set")
    pairs = data.pairs() if hasattr(data, "pairs") else list(data)

    denoiser_names = [f"denoiser.{n}" for n in bundle.denoiser.params]
    mask = {name: True for name in denoiser_names}

    params = {name: bundle.denoiser.params[name.split(".", 1)[1]]
              for name in denoiser_names}
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    trace = []
    for step in range(cfg.steps):
        loss, grads = _batch_loss_and_grads(bundle, pairs, rng, mask,
                                            cfg.batch_size)
        total = loss
        step_grads = {n: grads[n] for n in denoiser_names}
        if with_prior:
            pidx = int(rng.integers(0, len(cfg.prior_set)))
            p_image, p_caption = cfg.prior_set[pidx]
            p_latent = _encode_training_latent(bundle, p_image)
            p_t = int(rng.integers(0, bundle.schedule.T))
            p_eps = rng.standard_normal(np.asarray(p_latent).shape)
            p_loss, p_grads = denoise_loss(bundle, p_latent, p_caption,
                                           p_t, p_eps, mask=mask)
            total = loss + cfg.prior_weight * p_loss
            for n in denoiser_names:
                step_grads[n] = step_grads[n] + cfg.prior_weight * p_grads[n]
        if not np.isfinite(total):
            raise NonFiniteLoss(step, total)
        trace.append(total)
        opt.step(params, step_grads)
    return trace


def generate_prior_set(bundle, class_caption, n, seed, steps=None,
                       mode="deterministic", x0_clip=None):
    """Pre-generate prior-preservation pairs from the frozen bundle.

    Returns a list of (image, caption); the trainer encodes the images
    back to latents when computing the prior loss. x0_clip bounds the
    sampler's running clean-latent estimate, which keeps prior latents
    on the scale of real training latents even when the source bundle
    is untrained.
    """
    if n < 1:
        raise EmptyPriorSet(f"prior set size must be >= 1, got {n}")
    steps = steps or min(20, bundle.schedule.T)
    out = []
    for i in range(n):
        res = sample(bundle, class_caption, steps=steps, mode=mode,
                     seed=derive_seed(seed, "prior", i),
                     sample_id=f"prior-{i}", x0_clip=x0_clip)
        out.append((res.image, class_caption))
    return out


def loss_halved(trace, fraction=0.1) -> bool:
    """Training-curve oracle: mean loss over the last `fraction` of steps
    is below half the mean over the first `fraction`."""
    n = max(1, int(len(trace) * fraction))
    head = float(np.mean(trace[:n]))
    tail = float(np.mean(trace[-n:]))
    return tail < 0.5 * head
