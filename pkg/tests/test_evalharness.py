import numpy as np
import pytest

from cxrlab.diffusion import ToyBundleConfig, build_toy_bundle
from cxrlab.errors import SingleClassOnly
from cxrlab.evalharness import (
    BLOB_CENTER,
    BLOB_RADIUS,
    NEGATIVE_CAPTION,
    POSITIVE_CAPTION,
    BlobClassifier,
    GenerationSpec,
    ToyFeatureExtractor,
    classification_table_csv,
    evaluate_generated,
    fid_grid,
    fit_toy_classifier,
    generate_suite,
    make_synthetic_finetune_set,
    make_synthetic_image,
    run_blob_study,
)
from cxrlab.ingestion import ImageSample
from cxrlab.metrics import extract_features


# --- synthetic data -----------------------------------------------------------

def test_synthetic_blob_brightens_blob_region():
    rng = np.random.default_rng(0)
    neg = make_synthetic_image(np.random.default_rng(0))
    pos = make_synthetic_image(np.random.default_rng(0), with_blob=True)
    rows, cols = np.ogrid[:64, :64]
    mask = ((rows - BLOB_CENTER[0]) ** 2 + (cols - BLOB_CENTER[1]) ** 2
            <= BLOB_RADIUS ** 2)
    assert np.all(pos[mask] >= neg[mask])
    assert pos[mask].mean() - neg[mask].mean() > 0.2
    assert 0.0 <= pos.min() and pos.max() <= 1.0


def test_synthetic_finetune_set_layout(blob_set):
    assert [s.id for s in blob_set.negatives] == [f"neg-{i}" for i in range(5)]
    assert [s.id for s in blob_set.positives] == [f"pos-{i}" for i in range(5)]
    assert blob_set.negative_caption == NEGATIVE_CAPTION
    assert blob_set.positive_caption == POSITIVE_CAPTION
    pairs = blob_set.pairs()
    assert len(pairs) == 10 and pairs[0][1] == NEGATIVE_CAPTION
    assert pairs[-1][1] == POSITIVE_CAPTION


def test_synthetic_set_deterministic():
    a = make_synthetic_finetune_set(seed=3)
    b = make_synthetic_finetune_set(seed=3)
    np.testing.assert_array_equal(a.positives[2].pixels, b.positives[2].pixels)


# --- blob classifier --------------------------------------------------------------

def test_blob_classifier_separates_training_set(blob_set):
    clf = fit_toy_classifier(blob_set)
    pos_scores = [clf.score(img) for img in blob_set.positives]
    neg_scores = [clf.score(img) for img in blob_set.negatives]
    assert min(pos_scores) > 0.5 > max(neg_scores)


def test_blob_classifier_monotone_in_contrast():
    clf = BlobClassifier()
    flat = np.full((64, 64), 0.3)
    lit = flat.copy()
    lit[clf.mask] += 0.4
    assert clf.score(lit) > clf.score(flat)
    assert clf.contrast(flat) == pytest.approx(0.0)


# --- feature extractor --------------------------------------------------------------

def test_toy_feature_extractor_shape_and_determinism():
    ext_a = ToyFeatureExtractor(seed=1)
    ext_b = ToyFeatureExtractor(seed=1)
    img = make_synthetic_image(np.random.default_rng(2))
    np.testing.assert_array_equal(ext_a.extract(img), ext_b.extract(img))
    assert ext_a.extract(img).shape == (32,)
    assert np.all(np.abs(ext_a.extract(img)) <= 1.0)
    assert ext_a.extractor_id == "toy-linear-32-seed1"


# --- suite generation -----------------------------------------------------------------

def _tiny_bundle():
    cfg = ToyBundleConfig(image_size=16, latent_shape=(1, 2, 2), cond_dim=12,
                          vocab_size=16, hidden=6, T=20)
    return build_toy_bundle(cfg)


def test_generate_suite_extension_keeps_prefix():
    bundle = _tiny_bundle()
    prompts = [(NEGATIVE_CAPTION, 0), (POSITIVE_CAPTION, 1)]
    small = generate_suite(bundle, GenerationSpec(prompts=prompts,
                                                  per_prompt_count=2,
                                                  steps=4, seed=9))
    large = generate_suite(bundle, GenerationSpec(prompts=prompts,
                                                  per_prompt_count=3,
                                                  steps=4, seed=9))
    by_id = {s.image.id: s for s in large}
    for s in small:
        np.testing.assert_array_equal(by_id[s.image.id].image.pixels,
                                      s.image.pixels)
    assert len(large) == 6
    assert {s.expected_label for s in large} == {0, 1}


def test_generation_spec_validates_count():
    with pytest.raises(ValueError):
        GenerationSpec(prompts=[("x", 0)], per_prompt_count=0)


# --- scoring -------------------------------------------------------------------------------

class _OracleClassifier:
    """Scores the expected label planted in the sample id suffix."""

    def __init__(self, labels_by_id, flip=False):
        self.labels = labels_by_id
        self.flip = flip

    def score(self, image):
        lab = self.labels[image.id]
        return 1.0 - lab if self.flip else float(lab)


def _suite_with_labels():
    bundle = _tiny_bundle()
    prompts = [(NEGATIVE_CAPTION, 0), (POSITIVE_CAPTION, 1)]
    samples = generate_suite(bundle, GenerationSpec(prompts=prompts,
                                                    per_prompt_count=3,
                                                    steps=4))
    labels = {s.image.id: s.expected_label for s in samples}
    return samples, labels


def test_evaluate_generated_oracle_and_antioracle():
    samples, labels = _suite_with_labels()
    report, row = evaluate_generated(samples,
                                     _OracleClassifier(labels), method="m")
    assert report.auc == 1.0 and report.accuracy == 1.0
    assert row["method"] == "m" and row["prevalence"] == 0.5
    anti, _ = evaluate_generated(samples,
                                 _OracleClassifier(labels, flip=True))
    assert anti.auc == 0.0


def test_evaluate_generated_single_class():
    bundle = _tiny_bundle()
    samples = generate_suite(bundle, GenerationSpec(
        prompts=[(NEGATIVE_CAPTION, 0)], per_prompt_count=2, steps=4))
    with pytest.raises(SingleClassOnly):
        evaluate_generated(samples, _OracleClassifier({}))


def test_classification_table_csv():
    rows = [{"method": "ti", "prevalence": 0.5, "auc": 0.9876,
             "accuracy": 0.95, "f1": 0.9474, "precision": 1.0,
             "recall": 0.9},
            {"method": "unet", "prevalence": 0.5, "auc": None,
             "accuracy": 0.5, "f1": 0.0, "precision": 0.0, "recall": 0.0}]
    text = classification_table_csv(rows)
    lines = text.strip().split("\n")
    assert lines[0] == "Method,Prevalence,AUC,Accuracy,F1Score,Precision,Recall"
    assert lines[1] == "ti,0.500,0.988,0.950,0.947,1.000,0.900"
    assert lines[2] == "unet,0.500,,0.500,0.000,0.000,0.000"


# --- FID grid --------------------------------------------------------------------------------

def test_fid_grid_small():
    bundle = _tiny_bundle()
    ext = ToyFeatureExtractor(image_size=16, n_features=8, seed=0)
    prompts = [NEGATIVE_CAPTION]
    suite = generate_suite(bundle, GenerationSpec(
        prompts=[(NEGATIVE_CAPTION, 0)], per_prompt_count=6, steps=4,
        seed=123))
    refs = {NEGATIVE_CAPTION:
            extract_features([s.image for s in suite], ext)}
    grid, csv_text = fid_grid([("toy", bundle)], prompts, refs, ext,
                              per_prompt_count=6, steps=4)
    assert set(grid) == {"toy"}
    assert grid["toy"][NEGATIVE_CAPTION] >= 0.0
    lines = csv_text.strip().split("\n")
    assert lines[0] == f'Training Strategy,"{NEGATIVE_CAPTION}"'
    assert lines[1].startswith("toy,")


# --- end-to-end study knobs -------------------------------------------------------------------

def test_run_blob_study_rejects_unknown_knob():
    with pytest.raises(ValueError, match="turbo"):
        run_blob_study(seed=0, turbo=True)
