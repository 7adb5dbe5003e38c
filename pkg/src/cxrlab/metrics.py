"""Scalar quality and classification metrics.

RMSE / PSNR / SSIM on image pairs, Fréchet distance between feature sets,
cosine similarity, a rank-statistic classification report, and the paired
reconstruction-evaluation pipeline that aggregates all of them.

Conventions (fixed, tested algebraically):
  * RMSE is reported in source_range units; PSNR peak equals source_range
    on denormalized values, i.e. L = 1 on the normalized [0,1] grid.
  * SSIM uses an 11x11 Gaussian window (sigma 1.5), C1=(0.01L)^2,
    C2=(0.03L)^2 with L = 1 on normalized pixels.
  * AUC is the Mann-Whitney rank statistic with 0.5 credit for ties;
    confusion counts use a fixed 0.5 score threshold.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateCovariance,
    DimensionMismatch,
    ImageTooSmall,
    LengthMismatch,
    ShapeMismatch,
    ZeroVector,
)

PSNR_INF = math.inf

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 1.0) ** 2
SSIM_C2 = (0.03 * 1.0) ** 2

FID_JITTER = 1e-6
FID_BATCH_SIZE = 32


@dataclass
class PairMetrics:
    rmse: float
    psnr: float
    ssim: float

    def to_dict(self):
        return {
            "rmse": self.rmse,
            "psnr": "inf" if math.isinf(self.psnr) else self.psnr,
            "ssim": self.ssim,
        }


@dataclass
class FeatureSet:
    features: np.ndarray         # (N, F)
    extractor_id: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DimensionMismatch("features must be an N x F matrix")
        if not np.isfinite(self.features).all():
            raise DimensionMismatch("features contain non-finite entries")


@dataclass
class ClassificationReport:
    auc: float                   # NaN sentinel when only one class present
    accuracy: float
    f1: float
    precision: float
    recall: float
    confusion: dict              # {tp, fp, fn, tn}

    def to_dict(self):
        d = {
            "auc": None if math.isnan(self.auc) else self.auc,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "precision": self.precision,
            "recall": self.recall,
        }
        d.update(self.confusion)
        return d


def _as_grids(a, b):
    """Accept ImageSample-likes or plain arrays; return matched pixel grids
    plus the source range."""
    pa = np.asarray(getattr(a, "pixels", a), dtype=np.float64)
    pb = np.asarray(getattr(b, "pixels", b), dtype=np.float64)
    if pa.shape != pb.shape:
        raise ShapeMismatch(f"image shapes differ: {pa.shape} vs {pb.shape}")
    ra = float(getattr(a, "source_range", 1.0))
    rb = float(getattr(b, "source_range", 1.0))
    if ra != rb:
        raise ShapeMismatch(f"source ranges differ: {ra} vs {rb}")
    return pa, pb, ra


def rmse(a, b) -> float:
    """Root-mean-square error in source_range units."""
    pa, pb, rng = _as_grids(a, b)
    return float(np.sqrt(np.mean((pa - pb) ** 2)) * rng)


def psnr(a, b) -> float:
    """20*log10(source_range / rmse); +inf when images are identical."""
    pa, pb, rng = _as_grids(a, b)
    err = float(np.sqrt(np.mean((pa - pb) ** 2)))
    if err == 0.0:
        return PSNR_INF
    return float(20.0 * math.log10(1.0 / err))


def _gaussian_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _filter_valid(img, kernel):
    """Separable 'valid' correlation with a 1-D kernel along both axes."""
    n = kernel.size
    windows = np.lib.stride_tricks.sliding_window_view(img, n, axis=1)
    tmp = np.einsum("ijk,k->ij", windows, kernel)
    windows = np.lib.stride_tricks.sliding_window_view(tmp, n, axis=0)
    return np.einsum("ijk,k->ij", windows, kernel)


def ssim(a, b) -> float:
    """Mean of the local SSIM map over all full 11x11 Gaussian windows."""
    pa, pb, _ = _as_grids(a, b)
    if min(pa.shape) < SSIM_WINDOW:
        raise ImageTooSmall(
            f"min side {min(pa.shape)} smaller than window {SSIM_WINDOW}")
    k = _gaussian_kernel()
    mu_a = _filter_valid(pa, k)
    mu_b = _filter_valid(pb, k)
    mu_aa = _filter_valid(pa * pa, k)
    mu_bb = _filter_valid(pb * pb, k)
    mu_ab = _filter_valid(pa * pb, k)
    var_a = mu_aa - mu_a ** 2
    var_b = mu_bb - mu_b ** 2
    cov = mu_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise DimensionMismatch(f"vector dims differ: {u.size} vs {v.size}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroVector("cosine similarity undefined for zero vectors")
    return float(np.dot(u, v) / (nu * nv))


def _sqrtm_psd(mat):
    """Symmetric PSD matrix square root via eigendecomposition."""
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(p: FeatureSet, q: FeatureSet) -> float:
    """Fréchet distance between Gaussian fits of two feature sets.

    ||mu_p - mu_q||^2 + Tr(Sp + Sq - 2 (Sp Sq)^{1/2}), with the cross term
    computed as Tr of the PSD square root of Sp^{1/2} Sq Sp^{1/2}.
    """
    fp, fq = p.features, q.features
    if fp.shape[1] != fq.shape[1]:
        raise DimensionMismatch(
            f"feature dims differ: {fp.shape[1]} vs {fq.shape[1]}")
    if fp.shape[0] < 2 or fq.shape[0] < 2:
        raise DimensionMismatch("FID needs at least 2 samples per set")
    mu_p, mu_q = fp.mean(axis=0), fq.mean(axis=0)
    sp = np.cov(fp, rowvar=False)
    sq = np.cov(fq, rowvar=False)
    sp = np.atleast_2d(sp)
    sq = np.atleast_2d(sq)

    def cross_trace(sp, sq):
        root_p = _sqrtm_psd(sp)
        inner = root_p @ sq @ root_p
        inner = (inner + inner.T) / 2.0
        vals = np.linalg.eigvalsh(inner)
        return float(np.sqrt(np.clip(vals, 0.0, None)).sum())

    try:
        tr_cross = cross_trace(sp, sq)
        ok = np.isfinite(tr_cross)
    except np.linalg.LinAlgError:
        ok = False
    if not ok:
        eye = np.eye(sp.shape[0]) * FID_JITTER
        try:
            tr_cross = cross_trace(sp + eye, sq + eye)
        except np.linalg.LinAlgError as exc:
            raise DegenerateCovariance(str(exc)) from exc
        if not np.isfinite(tr_cross):
            raise DegenerateCovariance("non-finite trace after jitter retry")
    gap = mu_p - mu_q
    value = float(gap @ gap + np.trace(sp) + np.trace(sq) - 2.0 * tr_cross)
    return max(value, 0.0)


def auc_mann_whitney(scores, truth) -> float:
    """Rank-statistic AUC with 0.5 credit for tied scores; NaN when one
    class is absent."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    n_pos = int((truth == 1).sum())
    n_neg = int((truth == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return math.nan
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0   # average rank, 1-based
        i = j + 1
    rank_sum_pos = ranks[truth == 1].sum()
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def classification_report(scores, truth, threshold=0.5) -> ClassificationReport:
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    if scores.shape != truth.shape:
        raise LengthMismatch(
            f"scores/truth lengths differ: {scores.shape} vs {truth.shape}")
    if scores.size == 0:
        raise LengthMismatch("empty inputs")
    pred = scores >= threshold
    pos = truth == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    tn = int(np.sum(~pred & ~pos))
    return report_from_confusion(tp, fp, fn, tn,
                                 auc=auc_mann_whitney(scores, truth))


def report_from_confusion(tp, fp, fn, tn, auc=math.nan) -> ClassificationReport:
    total = tp + fp + fn + tn
    accuracy = (tp + tn) / total if total else 0.0
    precision = tp / (tp + fp) if (tp + fp) else 0.0
    recall = tp / (tp + fn) if (tp + fn) else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if (precision + recall) > 0 else 0.0)
    return ClassificationReport(
        auc=auc, accuracy=accuracy, f1=f1, precision=precision, recall=recall,
        confusion={"tp": tp, "fp": fp, "fn": fn, "tn": tn})


def _aggregate(values):
    arr = np.asarray(values, dtype=np.float64)
    finite = arr[np.isfinite(arr)]
    if finite.size == 0:
        return {"mean": None, "sd": None, "median": None,
                "min": None, "max": None}
    return {
        "mean": float(finite.mean()),
        "sd": float(finite.std(ddof=1)) if finite.size > 1 else 0.0,
        "median": float(np.median(finite)),
        "min": float(finite.min()),
        "max": float(finite.max()),
    }


def extract_features(images, embedder, batch_size=FID_BATCH_SIZE) -> FeatureSet:
    """Run the feature-extractor contract over images in fixed-size batches."""
    rows = []
    for start in range(0, len(images), batch_size):
        batch = images[start:start + batch_size]
        rows.extend(embedder.extract(img) for img in batch)
    return FeatureSet(features=np.stack(rows), extractor_id=embedder.extractor_id)


def reconstruction_report(originals, reconstructions, embedder,
                          classifier=None, class_names=None):
    """Paired reconstruction evaluation.

    Returns a JSON-serializable dict: per-pair metrics, aggregate stats,
    one FID over batch-extracted features, per-pair embedding cosines, and
    (when a classifier and labels are present) per-class original-vs-
    reconstruction classification rows.
    """
    orig_ids = [s.id for s in originals]
    recon_ids = [s.id for s in reconstructions]
    missing = sorted(set(orig_ids) ^ set(recon_ids))
    if missing:
        raise ShapeMismatch(f"id sets differ; unmatched ids: {missing}")
    recon_by_id = {s.id: s for s in reconstructions}
    pairs = [(o, recon_by_id[o.id]) for o in sorted(originals, key=lambda s: s.id)]

    per_pair = []
    for o, r in pairs:
        per_pair.append({
            "id": o.id,
            **PairMetrics(rmse(o, r), psnr(o, r), ssim(o, r)).to_dict(),
        })
    rmses = [p["rmse"] for p in per_pair]
    psnrs = [p["psnr"] if p["psnr"] != "inf" else math.inf for p in per_pair]
    ssims = [p["ssim"] for p in per_pair]

    feats_o = extract_features([o for o, _ in pairs], embedder)
    feats_r = extract_features([r for _, r in pairs], embedder)
    cosines = [cosine_similarity(fo, fr)
               for fo, fr in zip(feats_o.features, feats_r.features)]

    report = {
        "schema_version": 1,
        "n_pairs": len(pairs),
        "per_pair": per_pair,
        "aggregate": {
            "rmse": _aggregate(rmses),
            "psnr": _aggregate(psnrs),
            "ssim": _aggregate(ssims),
            "cosine": _aggregate(cosines),
        },
        "fid": fid(feats_o, feats_r) if len(pairs) >= 2 else None,
        "fid_batch_size": FID_BATCH_SIZE,
        "extractor_id": embedder.extractor_id,
        "cosine_per_pair": [
            {"id": o.id, "cosine": c} for (o, _), c in zip(pairs, cosines)],
    }

    if classifier is not None:
        report["per_class"] = _per_class_rows(pairs, classifier, class_names)
    return report


def _per_class_rows(pairs, classifier, class_names):
    """Table rows (Finding, Prevalence, AUC/Accuracy/F1 orig vs recon)."""
    labeled = [(o, r) for o, r in pairs if o.labels is not None]
    if not labeled:
        return []
    names = class_names or [f"class_{i}" for i in range(len(labeled[0][0].labels))]
    rows = []
    for ci, name in enumerate(names):
        truth = np.array([int(o.labels[ci]) for o, _ in labeled])
        if truth.sum() == 0 or truth.sum() == len(truth):
            continue
        scores_o = np.array([classifier.score(o) for o, _ in labeled])
        scores_r = np.array([classifier.score(r) for _, r in labeled])
        rep_o = classification_report(scores_o, truth)
        rep_r = classification_report(scores_r, truth)
        rows.append({
            "finding": name,
            "prevalence": float(truth.mean()),
            "auc_orig": rep_o.auc, "auc_recon": rep_r.auc,
            "accuracy_orig": rep_o.accuracy, "accuracy_recon": rep_r.accuracy,
            "f1_orig": rep_o.f1, "f1_recon": rep_r.f1,
        })
    return rows


def per_class_csv(rows) -> str:
    header = ("Finding,Prevalence,AUC orig,AUC recon,Accuracy orig,"
              "Accuracy recon,F1 orig,F1 recon")
    lines = [header]
    for r in rows:
        lines.append(
            f"{r['finding']},{r['prevalence']:.3f},{r['auc_orig']:.3f},"
            f"{r['auc_recon']:.3f},{r['accuracy_orig']:.3f},"
            f"{r['accuracy_recon']:.3f},{r['f1_orig']:.3f},{r['f1_recon']:.3f}")
    return "\n".join(lines) + "\n"
