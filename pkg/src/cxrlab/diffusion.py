"""Latent diffusion substrate with deterministic toy components.

A linear-beta noise schedule, the forward (noising) process, the
epsilon-prediction training loss with hand-written gradients, ancestral
and deterministic (eta = 0) samplers, and the three pluggable component
contracts -- VAE, text encoder, denoiser -- each with a seeded toy
reference implementation small enough for exhaustive testing.

All toy parameters are float64 numpy arrays reachable through
DiffusionBundle.parameters(), a flat name -> array registry used by the
fine-tuning freeze masks and by checkpointing.
"""

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .encoder_bench import EncoderOutput
from .errors import (
    DuplicateToken,
    InconsistentDims,
    InvalidRange,
    TOutOfRange,
)
from .ingestion import ImageSample
from .io_utils import load_checkpoint, save_checkpoint

TIME_EMBED_DIM = 16


@dataclass
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray


def make_schedule(T, beta_start=0.001, beta_end=0.2) -> NoiseSchedule:
    """Linear beta schedule with cumulative-product alpha_bars."""
    if T < 1:
        raise InvalidRange(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidRange(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def forward_diffuse(x0, t, eps, schedule: NoiseSchedule):
    """sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if not 0 <= t < schedule.T:
        raise TOutOfRange(f"t={t} outside [0, {schedule.T})")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    abar = schedule.alpha_bars[t]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def timestep_embedding(t, dim=TIME_EMBED_DIM):
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


def _stable_token_hash(token: str) -> int:
    return int.from_bytes(hashlib.md5(token.encode("utf-8")).digest()[:8],
                          "little")


class ToyTextEncoder:
    """Seeded hash-bucket token embeddings plus a fixed positional mix.

    token_states = embedding[ids] + positional[:T]; pooled = row mean.
    Registered surfaces (textual inversion) get fresh ids past the hash
    buckets and extend the embedding table by one row each.
    """

    def __init__(self, dim=768, vocab_size=256, max_len=32, seed=0,
                 embed_scale=0.5, encoder_id="toy-text"):
        self.dim = dim
        self.base_vocab = vocab_size
        self.max_len = max_len
        self.encoder_id = encoder_id
        rng = np.random.default_rng(seed)
        self.embedding = rng.normal(0.0, embed_scale, size=(vocab_size, dim))
        self.positional = rng.normal(0.0, 0.02, size=(max_len, dim))
        self.registered = {}              # surface -> token id

    @property
    def vocab_size(self):
        return self.embedding.shape[0]

    def tokenize(self, text: str):
        ids = []
        for token in text.lower().split():
            if token in self.registered:
                ids.append(self.registered[token])
            else:
                ids.append(_stable_token_hash(token) % self.base_vocab)
        return ids[:self.max_len] if ids else [0]

    def register(self, surface: str, init: np.ndarray) -> int:
        key = surface.lower()
        if key in self.registered:
            raise DuplicateToken(f"token {surface!r} already registered")
        init = np.asarray(init, dtype=np.float64)
        if init.shape != (self.dim,):
            raise InconsistentDims(
                f"init embedding must be a {self.dim}-vector")
        token_id = self.embedding.shape[0]
        self.embedding = np.concatenate([self.embedding, init[None, :]])
        self.registered[key] = token_id
        return token_id

    def encode_text(self, text: str) -> EncoderOutput:
        ids = self.tokenize(text)
        states = self.embedding[ids] + self.positional[:len(ids)]
        return EncoderOutput(token_states=states,
                             pooled=states.mean(axis=0),
                             encoder_id=self.encoder_id)

    def embedding_grad_from_pooled(self, text: str, d_pooled: np.ndarray):
        """Gradient of the pooled vector w.r.t. the embedding table: each
        token's row receives d_pooled / T per occurrence."""
        ids = self.tokenize(text)
        grad = np.zeros_like(self.embedding)
        share = d_pooled / len(ids)
        for tid in ids:
            grad[tid] += share
        return grad


class ToyVAE:
    """Orthogonal linear patch transform acting as the latent codec.

    encode maps a (S, S) image to a (C, h, w) latent Gaussian mean with a
    constant log-variance; decode inverts the transform and clips to
    [0, 1]. prefit() rotates the leading basis directions onto the
    principal components of a training set, after which those images
    round-trip nearly exactly.
    """

    def __init__(self, image_size=64, latent_shape=(4, 8, 8), seed=0,
                 scaling=1.0, log_var=-8.0):
        self.image_size = image_size
        self.latent_shape = tuple(latent_shape)
        self.latent_size = int(np.prod(latent_shape))
        self.scaling = scaling
        self.log_var = log_var
        pixels = image_size * image_size
        if self.latent_size > pixels:
            raise InconsistentDims("latent larger than the image")
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((pixels, self.latent_size)))
        self.basis = q.T                       # (K, P), orthonormal rows
        self.mean_image = np.full(pixels, 0.5)

    def prefit(self, images):
        flats = np.stack([np.asarray(getattr(img, "pixels", img)).ravel()
                          for img in images])
        self.mean_image = flats.mean(axis=0)
        centered = flats - self.mean_image
        _, s, vt = np.linalg.svd(centered, full_matrices=False)
        keep = vt[s > 1e-12]
        r = min(len(keep), self.latent_size)
        pixels = self.mean_image.size
        rng = np.random.default_rng(0)
        cols = np.concatenate(
            [keep[:r].T, rng.standard_normal((pixels, self.latent_size - r))],
            axis=1)
        q, _ = np.linalg.qr(cols)
        self.basis = q.T

    def encode(self, image):
        """Latent Gaussian (mean, log-variance), both latent-shaped."""
        flat = np.asarray(getattr(image, "pixels", image),
                          dtype=np.float64).ravel()
        if flat.size != self.mean_image.size:
            raise InconsistentDims(
                f"expected {self.image_size}x{self.image_size} image")
        coeffs = self.basis @ (flat - self.mean_image)
        mean = coeffs.reshape(self.latent_shape) * self.scaling
        return mean, np.full(self.latent_shape, self.log_var)

    def encode_mean(self, image):
        return self.encode(image)[0]

    def encode_sample(self, image, rng):
        mean, log_var = self.encode(image)
        return mean + np.exp(0.5 * log_var) * rng.standard_normal(mean.shape)

    def decode(self, latent):
        coeffs = np.asarray(latent, dtype=np.float64).ravel() / self.scaling
        flat = self.mean_image + self.basis.T @ coeffs
        img = flat.reshape(self.image_size, self.image_size)
        return np.clip(img, 0.0, 1.0)


class ToyDenoiser:
    """Two-layer tanh MLP over (flattened latent, timestep embedding,
    pooled conditioning), with a linear conditioning skip so the text
    pathway is causally strong. Gradients are hand-written."""

    PARAM_SHAPES = ("W1", "U1", "V1", "b1", "W2", "b2", "A", "S")

    def __init__(self, latent_size=256, cond_dim=768, hidden=128, seed=0):
        self.latent_size = latent_size
        self.cond_dim = cond_dim
        self.hidden = hidden
        rng = np.random.default_rng(seed)
        self.params = {
            "W1": rng.normal(0, 1.0 / math.sqrt(latent_size),
                             size=(hidden, latent_size)),
            "U1": rng.normal(0, 1.0 / math.sqrt(TIME_EMBED_DIM),
                             size=(hidden, TIME_EMBED_DIM)),
            "V1": rng.normal(0, 1.0 / math.sqrt(cond_dim),
                             size=(hidden, cond_dim)),
            "b1": np.zeros(hidden),
            "W2": rng.normal(0, 0.1 / math.sqrt(hidden),
                             size=(latent_size, hidden)),
            "b2": np.zeros(latent_size),
            "A": rng.normal(0, 0.1 / math.sqrt(cond_dim),
                            size=(latent_size, cond_dim)),
            "S": np.zeros(latent_size),
        }

    @staticmethod
    def _pooled(conditioning):
        if isinstance(conditioning, EncoderOutput):
            return conditioning.pooled if conditioning.pooled is not None \
                else conditioning.token_states.mean(axis=0)
        cond = np.asarray(conditioning, dtype=np.float64)
        return cond.mean(axis=0) if cond.ndim == 2 else cond

    def _forward(self, z, emb, c):
        p = self.params
        pre = p["W1"] @ z + p["U1"] @ emb + p["V1"] @ c + p["b1"]
        h = np.tanh(pre)
        out = p["W2"] @ h + p["b2"] + p["A"] @ c + p["S"] * z
        return out, (z, emb, c, h)

    def predict_noise(self, latent, t, conditioning):
        latent = np.asarray(latent, dtype=np.float64)
        z = latent.ravel()
        if z.size != self.latent_size:
            raise InconsistentDims(
                f"latent size {z.size} != {self.latent_size}")
        c = self._pooled(conditioning)
        if c.shape != (self.cond_dim,):
            raise InconsistentDims(
                f"conditioning dim {c.shape} != ({self.cond_dim},)")
        out, _ = self._forward(z, timestep_embedding(t), c)
        return out.reshape(latent.shape)

    def forward_with_cache(self, latent, t, conditioning):
        z = np.asarray(latent, dtype=np.float64).ravel()
        c = self._pooled(conditioning)
        return self._forward(z, timestep_embedding(t), c)

    def backward(self, cache, d_out):
        """Parameter gradients and d(loss)/d(conditioning vector)."""
        z, emb, c, h = cache
        p = self.params
        grads = {}
        grads["W2"] = np.outer(d_out, h)
        grads["b2"] = d_out.copy()
        grads["A"] = np.outer(d_out, c)
        grads["S"] = d_out * z
        dh = p["W2"].T @ d_out
        dpre = dh * (1.0 - h * h)
        grads["W1"] = np.outer(dpre, z)
        grads["U1"] = np.outer(dpre, emb)
        grads["V1"] = np.outer(dpre, c)
        grads["b1"] = dpre
        d_cond = p["V1"].T @ dpre + p["A"].T @ d_out
        return grads, d_cond


class OracleDenoiser:
    """Reports the exact noise implied by a known clean latent; used by the
    sampler-inversion tests and by freeze-discipline fixtures."""

    def __init__(self, x0, schedule, latent_size=None):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.schedule = schedule
        self.latent_size = latent_size or self.x0.size
        self.cond_dim = None
        self.params = {}

    def predict_noise(self, latent, t, conditioning):
        latent = np.asarray(latent, dtype=np.float64)
        abar = self.schedule.alpha_bars[t]
        return (latent - math.sqrt(abar) * self.x0.reshape(latent.shape)) \
            / math.sqrt(1.0 - abar)


@dataclass
class DiffusionBundle:
    vae: object
    text: object
    denoiser: object
    schedule: NoiseSchedule
    seed: int = 0

    def parameters(self):
        """Live name -> array views over every parameter in the bundle."""
        params = {}
        for name, arr in getattr(self.denoiser, "params", {}).items():
            params[f"denoiser.{name}"] = arr
        if hasattr(self.text, "embedding"):
            params["text.embedding"] = self.text.embedding
            params["text.positional"] = self.text.positional
        if hasattr(self.vae, "basis"):
            params["vae.basis"] = self.vae.basis
            params["vae.mean_image"] = self.vae.mean_image
        return params

    def param_checksums(self):
        return {name: hashlib.sha256(np.ascontiguousarray(a).tobytes())
                .hexdigest() for name, a in self.parameters().items()}


def assemble_bundle(vae, text, denoiser, schedule, seed=0) -> DiffusionBundle:
    latent_size = getattr(vae, "latent_size", None)
    if latent_size is not None and latent_size != denoiser.latent_size:
        raise InconsistentDims(
            f"vae latent size {latent_size} != denoiser {denoiser.latent_size}")
    cond = getattr(denoiser, "cond_dim", None)
    text_dim = getattr(text, "dim", None)
    if cond is not None and text_dim is not None and cond != text_dim:
        raise InconsistentDims(
            f"text dim {text_dim} != denoiser conditioning dim {cond}")
    return DiffusionBundle(vae=vae, text=text, denoiser=denoiser,
                           schedule=schedule, seed=seed)


@dataclass
class ToyBundleConfig:
    image_size: int = 64
    latent_shape: tuple = (4, 8, 8)
    cond_dim: int = 768
    vocab_size: int = 256
    hidden: int = 128
    T: int = 100
    beta_start: float = 0.001
    beta_end: float = 0.2
    seed: int = 0


def build_toy_bundle(cfg: ToyBundleConfig = None, prefit_images=None,
                     **overrides) -> DiffusionBundle:
    cfg = cfg or ToyBundleConfig(**overrides)
    latent_size = int(np.prod(cfg.latent_shape))
    vae = ToyVAE(image_size=cfg.image_size, latent_shape=cfg.latent_shape,
                 seed=cfg.seed)
    if prefit_images:
        vae.prefit(prefit_images)
    text = ToyTextEncoder(dim=cfg.cond_dim, vocab_size=cfg.vocab_size,
                          seed=cfg.seed + 1)
    denoiser = ToyDenoiser(latent_size=latent_size, cond_dim=cfg.cond_dim,
                           hidden=cfg.hidden, seed=cfg.seed + 2)
    schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    bundle = assemble_bundle(vae, text, denoiser, schedule, seed=cfg.seed)
    bundle.config = cfg
    return bundle


def denoise_loss(bundle, x0, caption, t, eps, mask=None):
    """Epsilon-prediction MSE and its gradients.

    Returns (loss, grads) with grads keyed by the bundle parameter names;
    mask (name -> bool or bool array, True = trainable) zeroes gradients
    of frozen parameters. Absent names are trainable when mask is None,
    frozen otherwise.
    """
    if not 0 <= t < bundle.schedule.T:
        raise TOutOfRange(f"t={t} outside [0, {bundle.schedule.T})")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    x_t = forward_diffuse(x0, t, eps, bundle.schedule)
    enc = bundle.text.encode_text(caption)
    pred, cache = bundle.denoiser.forward_with_cache(x_t, t, enc)
    diff = pred - eps.ravel()
    n = diff.size
    loss = float(diff @ diff / n)
    d_out = 2.0 * diff / n
    dgrads, d_cond = bundle.denoiser.backward(cache, d_out)
    grads = {f"denoiser.{name}": g for name, g in dgrads.items()}
    if hasattr(bundle.text, "embedding_grad_from_pooled"):
        grads["text.embedding"] = bundle.text.embedding_grad_from_pooled(
            caption, d_cond)
    if mask is not None:
        for name in list(grads):
            sel = mask.get(name, False)
            if sel is True:
                continue
            if sel is False:
                grads[name] = np.zeros_like(grads[name])
            else:
                grads[name] = grads[name] * np.asarray(sel, dtype=np.float64)
    return loss, grads


def sampler_timesteps(schedule, steps):
    if steps < 1 or steps > schedule.T:
        raise TOutOfRange(f"steps={steps} outside [1, {schedule.T}]")
    ts = np.unique(np.round(np.linspace(0, schedule.T - 1, steps)).astype(int))
    return ts[::-1]


@dataclass
class SampleResult:
    image: ImageSample
    latent: np.ndarray
    caption: str
    seed: int
    steps: int
    mode: str

    def sidecar(self):
        return {"id": self.image.id, "caption": self.caption,
                "seed": self.seed, "steps": self.steps, "mode": self.mode}


def sample(bundle, caption, steps, mode="deterministic", seed=0,
           sample_id=None, x0_clip=None) -> SampleResult:
    """Reverse process from a seeded Gaussian latent.

    'deterministic' is the eta = 0 update (noise-free after the initial
    draw); 'ancestral' adds the posterior-variance noise each step.
    x0_clip, when set, clamps the per-step clean-latent estimate to
    [-x0_clip, x0_clip]; trained toy models need this to keep early-step
    estimate errors from being amplified by 1/sqrt(alpha_bar).
    """
    if mode not in ("deterministic", "ancestral"):
        raise InvalidRange(f"unknown sampler mode {mode!r}")
    ts = sampler_timesteps(bundle.schedule, steps)
    rng = np.random.default_rng(seed)
    latent_size = bundle.denoiser.latent_size
    z = rng.standard_normal(latent_size)
    enc = bundle.text.encode_text(caption)
    abars = bundle.schedule.alpha_bars
    for i, t in enumerate(ts):
        eps_hat = np.asarray(
            bundle.denoiser.predict_noise(z, int(t), enc)).ravel()
        a_t = abars[t]
        a_prev = abars[ts[i + 1]] if i + 1 < len(ts) else 1.0
        x0_hat = (z - math.sqrt(1.0 - a_t) * eps_hat) / math.sqrt(a_t)
        if x0_clip is not None:
            x0_hat = np.clip(x0_hat, -x0_clip, x0_clip)
            eps_hat = (z - math.sqrt(a_t) * x0_hat) / math.sqrt(1.0 - a_t)
        if mode == "deterministic":
            z = math.sqrt(a_prev) * x0_hat + math.sqrt(1.0 - a_prev) * eps_hat
        else:
            if i + 1 < len(ts):
                var = (1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev)
                var = max(var, 0.0)
                dir_coeff = math.sqrt(max(1.0 - a_prev - var, 0.0))
                z = (math.sqrt(a_prev) * x0_hat + dir_coeff * eps_hat
                     + math.sqrt(var) * rng.standard_normal(latent_size))
            else:
                z = x0_hat
    pixels = bundle.vae.decode(z)
    image = ImageSample(id=sample_id or f"sample-{seed}",
                        pixels=pixels, source_range=255.0)
    return SampleResult(image=image, latent=z.copy(), caption=caption,
                        seed=seed, steps=steps, mode=mode)


# --- checkpointing ----------------------------------------------------------

def save_bundle(bundle, path_json, provenance=None):
    cfg = getattr(bundle, "config", None)
    header = {
        "kind": "toy_bundle",
        "seed": bundle.seed,
        "schedule": {
            "T": bundle.schedule.T,
            "betas": bundle.schedule.betas.tolist(),
        },
        "config": {
            "image_size": bundle.vae.image_size,
            "latent_shape": list(bundle.vae.latent_shape),
            "cond_dim": bundle.text.dim,
            "vocab_size": bundle.text.base_vocab,
            "hidden": bundle.denoiser.hidden,
            "T": bundle.schedule.T,
            "beta_start": float(bundle.schedule.betas[0]),
            "beta_end": float(bundle.schedule.betas[-1]),
            "seed": cfg.seed if cfg else bundle.seed,
        },
        "registered_tokens": dict(bundle.text.registered),
    }
    if provenance:
        header["provenance"] = provenance
    save_checkpoint(path_json, header, bundle.parameters())


def load_bundle(path_json) -> DiffusionBundle:
    header, arrays = load_checkpoint(path_json)
    cfg = ToyBundleConfig(**header["config"])
    registered = header.get("registered_tokens", {})
    bundle = build_toy_bundle(cfg)
    # restore registrations so the embedding table has the saved row count
    for surface, token_id in sorted(registered.items(), key=lambda kv: kv[1]):
        got = bundle.text.register(surface, np.zeros(bundle.text.dim))
        if got != token_id:
            raise InconsistentDims(
                f"token id mismatch on load: {got} != {token_id}")
    params = bundle.parameters()
    for name, arr in arrays.items():
        if name == "text.embedding":
            bundle.text.embedding = arr
        elif params[name].shape != arr.shape:
            raise InconsistentDims(f"shape mismatch for {name}")
        else:
            params[name][...] = arr
    bundle.schedule = NoiseSchedule(
        T=header["schedule"]["T"],
        betas=np.array(header["schedule"]["betas"]),
        alphas=1.0 - np.array(header["schedule"]["betas"]),
        alpha_bars=np.cumprod(1.0 - np.array(header["schedule"]["betas"])),
    )
    return bundle
