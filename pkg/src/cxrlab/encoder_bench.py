"""Text-encoder retrieval benchmark.

Embedding extraction strategies, raw dot-product similarity matrices,
CheXpert@k (global, per-class, macro), a bag-of-words IoU baseline, and a
2-D cluster projection. Encoders themselves are external: the bench
consumes pre-computed per-report hidden states from a JSON-lines tensor
format (see read_encoder_outputs / write_encoder_outputs).
"""

import json
import os
import re
import string
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, KTooLarge, StrategyUnavailable, TooFewPoints
from .io_utils import atomic_write_bytes, atomic_write_text

STRATEGIES = ("cls_hidden_state", "mean_hidden_states", "pooler_output",
              "model_specific")


@dataclass
class EncoderOutput:
    token_states: np.ndarray          # (T, D)
    pooled: np.ndarray | None = None
    model_specific: np.ndarray | None = None
    encoder_id: str = "unknown"
    report_id: str | None = None

    def __post_init__(self):
        self.token_states = np.asarray(self.token_states, dtype=np.float64)
        if self.token_states.ndim != 2 or self.token_states.shape[0] < 1:
            raise FormatError("token_states must be a T x D matrix with T >= 1")
        for name in ("pooled", "model_specific"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.float64)
                if v.shape != (self.token_states.shape[1],):
                    raise FormatError(f"{name} must be a D-vector")
                setattr(self, name, v)


@dataclass
class BenchmarkResult:
    per_class_scores: dict            # class name -> score in [0,1]
    macro: float
    global_score: float
    k: int
    encoder_id: str
    strategy: str

    def to_dict(self):
        return {
            "per_class": self.per_class_scores,
            "macro": self.macro,
            "global": self.global_score,
            "k": self.k,
            "encoder_id": self.encoder_id,
            "strategy": self.strategy,
        }


def extract_embedding(out: EncoderOutput, strategy: str) -> np.ndarray:
    if strategy == "cls_hidden_state":
        return out.token_states[0].copy()
    if strategy == "mean_hidden_states":
        return out.token_states.mean(axis=0)
    if strategy == "pooler_output":
        if out.pooled is None:
            raise StrategyUnavailable(
                f"{out.encoder_id}: no pooled output available")
        return out.pooled.copy()
    if strategy == "model_specific":
        if out.model_specific is None:
            raise StrategyUnavailable(
                f"{out.encoder_id}: no model-specific embedding available")
        return out.model_specific.copy()
    raise StrategyUnavailable(f"unknown strategy {strategy!r}")


def _check_k(n, k):
    if n < 2:
        raise KTooLarge(f"need at least 2 reports, got {n}")
    if not 1 <= k <= n - 1:
        raise KTooLarge(f"k={k} outside [1, {n - 1}]")


def _top_k_neighbors(similarities, k):
    """Indices of the k most similar reports per row, self excluded,
    ties broken by lower index."""
    n = similarities.shape[0]
    neighbors = np.empty((n, k), dtype=np.int64)
    idx = np.arange(n)
    for i in range(n):
        mask = idx != i
        cand = idx[mask]
        # lexsort: primary key descending similarity, secondary ascending index
        order = np.lexsort((cand, -similarities[i, mask]))
        neighbors[i] = cand[order[:k]]
    return neighbors


def _labels_array(labels):
    """Labels may be strings (primary class) or label vectors; either way
    equality must be exact and hashable."""
    out = []
    for lab in labels:
        if isinstance(lab, (list, np.ndarray)):
            out.append(tuple(np.asarray(lab).tolist()))
        else:
            out.append(lab)
    return out


def chexpert_at_k(embeddings, labels, k):
    """Global CheXpert@k plus the per-report score vector.

    Similarity is the raw dot product E E^T; for each report the k most
    similar other reports are retrieved and scored by label agreement.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2:
        raise FormatError("embeddings must be an N x D matrix")
    n = emb.shape[0]
    if len(labels) != n:
        raise FormatError(f"{n} embeddings but {len(labels)} labels")
    _check_k(n, k)
    labs = _labels_array(labels)
    sims = emb @ emb.T
    neighbors = _top_k_neighbors(sims, k)
    per_report = np.array([
        sum(labs[j] == labs[i] for j in neighbors[i]) / k for i in range(n)
    ])
    return float(per_report.mean()), per_report


def chexpert_per_class(embeddings, labels, k, encoder_id="unknown",
                       strategy="unknown") -> BenchmarkResult:
    """Per-class mean of per-report scores (neighbors drawn from the full
    set) plus the unweighted macro average."""
    global_score, per_report = chexpert_at_k(embeddings, labels, k)
    labs = _labels_array(labels)
    per_class = {}
    for lab in sorted(set(labs), key=str):
        members = [i for i, l in enumerate(labs) if l == lab]
        per_class[str(lab)] = float(np.mean(per_report[members]))
    macro = float(np.mean(list(per_class.values())))
    return BenchmarkResult(
        per_class_scores=per_class, macro=macro, global_score=global_score,
        k=k, encoder_id=encoder_id, strategy=strategy)


_TOKEN_SPLIT = re.compile(r"[\s" + re.escape(string.punctuation) + r"]+")


def bow_tokens(text: str) -> set:
    return {t for t in _TOKEN_SPLIT.split(text.lower()) if t}


def bow_iou_similarity(a: str, b: str) -> float:
    """Bag-of-words intersection over union; both-empty convention: 1.0."""
    ta, tb = bow_tokens(a), bow_tokens(b)
    if not ta and not tb:
        return 1.0
    return len(ta & tb) / len(ta | tb)


def embed_2d(embeddings, method="tsne", seed=0, perplexity=None):
    """Project N x D embeddings to N x 2 for cluster figures.

    method 'tsne' is neighbor-preserving (scikit-learn, seeded); 'pca' is
    the variance-maximizing linear fallback. Returns (coords, metadata).
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    n = emb.shape[0]
    if n < 3:
        raise TooFewPoints(f"need at least 3 points, got {n}")
    if method == "pca":
        centered = emb - emb.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        coords = centered @ vt[:2].T
        return coords, {"method": "pca", "seed": seed}
    if method == "tsne":
        from sklearn.manifold import TSNE

        if perplexity is None:
            perplexity = min(30.0, max(2.0, (n - 1) / 3.0))
        tsne = TSNE(n_components=2, perplexity=perplexity, init="pca",
                    random_state=seed, method="exact" if n < 50 else "barnes_hut")
        coords = tsne.fit_transform(emb).astype(np.float64)
        return coords, {"method": "tsne", "seed": seed, "perplexity": perplexity}
    raise FormatError(f"unknown projection method {method!r}")


# --- external tensor format -------------------------------------------------
#
# <name>.jsonl : one record per line
#   {"id", "encoder_id", "T", "D", "token_states": off, "pooled": off|null,
#    "model_specific": off|null}
# <name>.bin   : little-endian float32 payload; offsets count floats.

def write_encoder_outputs(outputs, path_jsonl):
    path_jsonl = os.fspath(path_jsonl)
    bin_path = os.path.splitext(path_jsonl)[0] + ".bin"
    lines = []
    chunks = []
    offset = 0

    def push(arr):
        nonlocal offset
        a = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(a.tobytes())
        off = offset
        offset += a.size
        return off

    for i, out in enumerate(outputs):
        t, d = out.token_states.shape
        rec = {
            "id": out.report_id or f"record_{i}",
            "encoder_id": out.encoder_id,
            "T": t,
            "D": d,
            "token_states": push(out.token_states),
            "pooled": None if out.pooled is None else push(out.pooled),
            "model_specific": (None if out.model_specific is None
                               else push(out.model_specific)),
        }
        lines.append(json.dumps(rec))
    atomic_write_bytes(bin_path, b"".join(chunks))
    atomic_write_text(path_jsonl, "\n".join(lines) + "\n")


def read_encoder_outputs(path_jsonl):
    path_jsonl = os.fspath(path_jsonl)
    bin_path = os.path.splitext(path_jsonl)[0] + ".bin"
    flat = np.fromfile(bin_path, dtype="<f4")
    outputs = []
    with open(path_jsonl, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                t, d = int(rec["T"]), int(rec["D"])

                def grab(off, n):
                    if off is None:
                        return None
                    if off + n > flat.size:
                        raise FormatError("offset past end of payload")
                    return flat[off:off + n].astype(np.float64)

                states = grab(rec["token_states"], t * d).reshape(t, d)
                outputs.append(EncoderOutput(
                    token_states=states,
                    pooled=grab(rec.get("pooled"), d),
                    model_specific=grab(rec.get("model_specific"), d),
                    encoder_id=rec["encoder_id"],
                    report_id=rec["id"],
                ))
            except (KeyError, ValueError, TypeError) as exc:
                raise FormatError(f"{path_jsonl}:{lineno}: {exc}") from exc
    return outputs


def result_table_csv(results) -> str:
    """Rows = encoders, columns = strategies, percent-style scores."""
    encoders = sorted({r.encoder_id for r in results})
    strategies = [s for s in STRATEGIES
                  if any(r.strategy == s for r in results)]
    by_key = {(r.encoder_id, r.strategy): r for r in results}
    lines = ["Model," + ",".join(strategies)]
    for enc in encoders:
        cells = []
        for s in strategies:
            r = by_key.get((enc, s))
            cells.append(f"{100.0 * r.macro:.1f}" if r else "None")
        lines.append(f"{enc}," + ",".join(cells))
    return "\n".join(lines) + "\n"


def per_class_table_csv(results, class_names=None) -> str:
    """Rows = classes, columns = encoders, percent-style scores."""
    encoders = sorted({r.encoder_id for r in results})
    by_enc = {r.encoder_id: r for r in results}
    classes = class_names or sorted(
        {c for r in results for c in r.per_class_scores})
    lines = ["Abnormality," + ",".join(encoders)]
    for c in classes:
        cells = []
        for enc in encoders:
            score = by_enc[enc].per_class_scores.get(c)
            cells.append("" if score is None else f"{100.0 * score:.1f}")
        lines.append(f"{c}," + ",".join(cells))
    macro_cells = [f"{100.0 * by_enc[enc].macro:.1f}" for enc in encoders]
    lines.append("Macro," + ",".join(macro_cells))
    return "\n".join(lines) + "\n"
