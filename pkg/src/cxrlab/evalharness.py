"""Generate-then-classify evaluation.

Builds conditioned sample suites from a bundle, scores them with a
pluggable abnormality classifier, and emits the classification-report
table and the strategy-by-prompt FID grid. Also hosts the desk-scale
synthetic dataset (smooth chest-like backgrounds, positives carrying a
bright blob) and the blob classifier fixture used throughout the tests.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import ToyBundleConfig, build_toy_bundle, sample, save_bundle
from .errors import SingleClassOnly
from .ingestion import FinetuneSet, ImageSample
from .io_utils import atomic_write_json, derive_seed
from .metrics import (
    FeatureSet,
    classification_report,
    extract_features,
    fid,
)

NEGATIVE_CAPTION = "a photo of a lung xray"
POSITIVE_CAPTION = "a photo of a lung xray with visible pleural effusion"

BLOB_CENTER = (44, 20)       # row, col on the 64x64 grid
BLOB_RADIUS = 9
BLOB_GAIN = 0.55


@dataclass
class GenerationSpec:
    prompts: list                      # [(caption, expected_label)]
    per_prompt_count: int = 50
    seed: int = 0
    steps: int = 20
    mode: str = "deterministic"
    x0_clip: float = None              # bound on the clean-latent estimate

    def __post_init__(self):
        if self.per_prompt_count < 1:
            raise ValueError("per_prompt_count must be >= 1")


@dataclass
class GeneratedSample:
    image: ImageSample
    caption: str
    expected_label: int
    seed: int

    def sidecar(self):
        return {"id": self.image.id, "caption": self.caption,
                "expected_label": self.expected_label, "seed": self.seed}


def generate_suite(bundle, spec: GenerationSpec):
    """per_prompt_count samples per prompt; per-sample seeds are derived
    from (spec.seed, prompt index, sample index) so suites extend without
    reshuffling earlier samples."""
    out = []
    for pi, (caption, expected) in enumerate(spec.prompts):
        for si in range(spec.per_prompt_count):
            seed = derive_seed(spec.seed, pi, si)
            res = sample(bundle, caption, steps=spec.steps, mode=spec.mode,
                         seed=seed, sample_id=f"gen-p{pi}-s{si}",
                         x0_clip=spec.x0_clip)
            out.append(GeneratedSample(image=res.image, caption=caption,
                                       expected_label=int(expected),
                                       seed=seed))
    return out


def evaluate_generated(samples, classifier, method="toy"):
    """Classification report of classifier scores against expected labels,
    plus the table-shaped row."""
    truth = np.array([s.expected_label for s in samples])
    if len(set(truth.tolist())) < 2:
        raise SingleClassOnly("need both positive and negative samples")
    scores = np.array([classifier.score(s.image) for s in samples])
    report = classification_report(scores, truth)
    row = {
        "method": method,
        "prevalence": float(truth.mean()),
        "auc": None if math.isnan(report.auc) else report.auc,
        "accuracy": report.accuracy,
        "f1": report.f1,
        "precision": report.precision,
        "recall": report.recall,
    }
    return report, row


def classification_table_csv(rows) -> str:
    lines = ["Method,Prevalence,AUC,Accuracy,F1Score,Precision,Recall"]
    for r in rows:
        auc = "" if r["auc"] is None else f"{r['auc']:.3f}"
        lines.append(
            f"{r['method']},{r['prevalence']:.3f},{auc},{r['accuracy']:.3f},"
            f"{r['f1']:.3f},{r['precision']:.3f},{r['recall']:.3f}")
    return "\n".join(lines) + "\n"


def fid_grid(bundles, prompts, reference_sets, extractor,
             per_prompt_count=50, seed=0, steps=20):
    """FID of each (bundle, prompt) sample set against that prompt's
    reference features. Returns ({bundle: {prompt: fid}}, csv text)."""
    grid = {}
    for bname, bundle in bundles:
        grid[bname] = {}
        for pi, prompt in enumerate(prompts):
            spec = GenerationSpec(prompts=[(prompt, 0)],
                                  per_prompt_count=per_prompt_count,
                                  seed=derive_seed(seed, bname, pi),
                                  steps=steps)
            samples = generate_suite(bundle, spec)
            feats = extract_features([s.image for s in samples], extractor)
            grid[bname][prompt] = fid(feats, reference_sets[prompt])
    lines = ["Training Strategy," + ",".join(f'"{p}"' for p in prompts)]
    for bname, _ in bundles:
        cells = ",".join(f"{grid[bname][p]:.4f}" for p in prompts)
        lines.append(f"{bname},{cells}")
    return grid, "\n".join(lines) + "\n"


# --- toy contracts ----------------------------------------------------------

class ToyFeatureExtractor:
    """Seeded random linear map over 4x4-pooled pixels + tanh; the default
    feature contract for desk-scale FID."""

    def __init__(self, image_size=64, n_features=32, seed=0):
        self.image_size = image_size
        self.n_features = n_features
        pooled = (image_size // 4) ** 2
        rng = np.random.default_rng(seed)
        self.weights = rng.normal(0, 1.0 / np.sqrt(pooled),
                                  size=(pooled, n_features))
        self.extractor_id = f"toy-linear-{n_features}-seed{seed}"

    def extract(self, image):
        px = np.asarray(getattr(image, "pixels", image), dtype=np.float64)
        s = px.shape[0] // 4
        pooled = px.reshape(s, 4, s, 4).mean(axis=(1, 3)).ravel()
        return np.tanh(pooled @ self.weights)


class BlobClassifier:
    """Scores the mean brightness contrast between the blob region and the
    rest of the image through a logistic squashing. fit() centers the
    decision boundary between the two training groups."""

    def __init__(self, image_size=64, center=BLOB_CENTER, radius=BLOB_RADIUS,
                 finding_id="pleural_effusion"):
        self.finding_id = finding_id
        rows, cols = np.ogrid[:image_size, :image_size]
        self.mask = ((rows - center[0]) ** 2 + (cols - center[1]) ** 2
                     <= radius ** 2)
        self.bias = 0.0
        self.gain = 20.0

    def contrast(self, image):
        px = np.asarray(getattr(image, "pixels", image), dtype=np.float64)
        return float(px[self.mask].mean() - px[~self.mask].mean())

    def fit(self, positives, negatives):
        cp = np.mean([self.contrast(p) for p in positives])
        cn = np.mean([self.contrast(n) for n in negatives])
        self.bias = (cp + cn) / 2.0
        spread = max(abs(cp - cn) / 2.0, 1e-6)
        self.gain = 2.0 / spread
        return self

    def score(self, image) -> float:
        z = self.gain * (self.contrast(image) - self.bias)
        return float(1.0 / (1.0 + math.exp(-z)))


# --- synthetic desk-scale dataset -------------------------------------------

def _smooth_noise(rng, size, cutoff=6):
    """Low-frequency random field in [0,1] via truncated Fourier modes."""
    spectrum = np.zeros((size, size), dtype=complex)
    block = rng.standard_normal((cutoff, cutoff)) \
        + 1j * rng.standard_normal((cutoff, cutoff))
    spectrum[:cutoff, :cutoff] = block
    field = np.fft.ifft2(spectrum).real
    field -= field.min()
    peak = field.max()
    return field / peak if peak > 0 else field


def make_synthetic_image(rng, size=64, with_blob=False) -> np.ndarray:
    """Chest-like toy image: dark smooth background, two brighter lung
    fields, optional bright abnormality blob."""
    base = 0.15 + 0.25 * _smooth_noise(rng, size)
    rows, cols = np.ogrid[:size, :size]
    for cx in (size * 0.3, size * 0.7):
        lung = np.exp(-(((cols - cx) / (size * 0.16)) ** 2
                        + ((rows - size * 0.45) / (size * 0.3)) ** 2))
        base += 0.35 * lung
    if with_blob:
        blob = np.exp(-(((rows - BLOB_CENTER[0]) / BLOB_RADIUS) ** 2
                        + ((cols - BLOB_CENTER[1]) / BLOB_RADIUS) ** 2))
        base += BLOB_GAIN * blob
    return np.clip(base, 0.0, 1.0)


def make_synthetic_finetune_set(seed=0, size=64, n_negative=5,
                                n_positive=5) -> FinetuneSet:
    rng = np.random.default_rng(seed)
    negatives = [
        ImageSample(id=f"neg-{i}", pixels=make_synthetic_image(rng, size))
        for i in range(n_negative)]
    positives = [
        ImageSample(id=f"pos-{i}",
                    pixels=make_synthetic_image(rng, size, with_blob=True))
        for i in range(n_positive)]
    return FinetuneSet(negatives=negatives, positives=positives,
                       negative_caption=NEGATIVE_CAPTION,
                       positive_caption=POSITIVE_CAPTION)


def fit_toy_classifier(data: FinetuneSet, image_size=64) -> BlobClassifier:
    return BlobClassifier(image_size=image_size).fit(data.positives,
                                                     data.negatives)


# --- end-to-end blob study ---------------------------------------------------

BLOB_STUDY_DEFAULTS = {
    "latent_shape": (2, 4, 4),
    "cond_dim": 64,
    "prior_size": 20,
    "prior_steps": 20,
    "prior_x0_clip": 0.5,
    "prior_weight": 0.1,
    "train_steps": 2000,
    "learning_rate": 3e-3,
    "batch_size": 4,
    "eval_steps": 10,
    "eval_x0_clip": 3.0,
    "per_prompt_count": 50,
}


def run_blob_study(seed=0, out_dir=None, **overrides):
    """Full generate-then-classify study on the synthetic blob dataset.

    Builds a small bundle, fine-tunes the denoiser with a prior term
    anchored on samples from the untrained bundle, generates a balanced
    suite from the two study captions, and scores it with the blob
    classifier fit on the training set. Returns a result dict; when
    out_dir is given, also writes bundle.ckpt.json and metrics.json so
    repeat runs can be compared byte for byte.
    """
    # imported here: finetune already imports this module's sibling deps
    from .finetune import (FinetuneConfig, generate_prior_set, loss_halved,
                           train_unet)

    knobs = dict(BLOB_STUDY_DEFAULTS)
    unknown = set(overrides) - set(knobs)
    if unknown:
        raise ValueError(f"unknown study knobs: {sorted(unknown)}")
    knobs.update(overrides)

    data = make_synthetic_finetune_set(seed=seed)
    classifier = fit_toy_classifier(data)
    cfg = ToyBundleConfig(cond_dim=knobs["cond_dim"],
                          latent_shape=tuple(knobs["latent_shape"]),
                          seed=seed)
    bundle = build_toy_bundle(cfg,
                              prefit_images=data.negatives + data.positives)
    prior_set = generate_prior_set(bundle, NEGATIVE_CAPTION,
                                   knobs["prior_size"],
                                   seed=derive_seed(seed, "prior-set"),
                                   steps=knobs["prior_steps"],
                                   x0_clip=knobs["prior_x0_clip"])
    ft = FinetuneConfig(strategy="unet_with_prior",
                        steps=knobs["train_steps"],
                        learning_rate=knobs["learning_rate"],
                        batch_size=knobs["batch_size"],
                        seed=seed,
                        prior_weight=knobs["prior_weight"],
                        prior_set=prior_set)
    trace = train_unet(bundle, data, ft)

    spec = GenerationSpec(prompts=[(NEGATIVE_CAPTION, 0),
                                   (POSITIVE_CAPTION, 1)],
                          per_prompt_count=knobs["per_prompt_count"],
                          seed=seed, steps=knobs["eval_steps"],
                          x0_clip=knobs["eval_x0_clip"])
    samples = generate_suite(bundle, spec)
    report, row = evaluate_generated(samples, classifier,
                                     method="unet_with_prior")
    result = {
        "seed": seed,
        "auc": report.auc,
        "accuracy": report.accuracy,
        "f1": report.f1,
        "loss_first": float(np.mean(trace[:max(1, len(trace) // 10)])),
        "loss_last": float(np.mean(trace[-max(1, len(trace) // 10):])),
        "loss_halved": loss_halved(trace),
        "table_row": row,
        "n_samples": len(samples),
    }
    if out_dir is not None:
        import os
        os.makedirs(out_dir, exist_ok=True)
        save_bundle(bundle, os.path.join(out_dir, "bundle.ckpt.json"))
        atomic_write_json(os.path.join(out_dir, "metrics.json"), result)
    result["bundle"] = bundle
    result["trace"] = trace
    result["samples"] = samples
    return result
