"""Command-line entry point.

Every pipeline is a subcommand driven by a JSON config file. All
randomness flows from the single config seed, artifacts are written
atomically into the output directory, logs go to standard error as JSON
lines, and the last stdout line is a one-line JSON summary. Exit codes:
0 success, 2 config errors, 3 data errors, 4 numerical errors.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import encoder_bench, evalharness
from .diffusion import (
    ToyBundleConfig,
    build_toy_bundle,
    load_bundle,
    save_bundle,
)
from .errors import ConfigError, CxrlabError, DataError, NumericalError
from .evalharness import (
    BlobClassifier,
    GenerationSpec,
    ToyFeatureExtractor,
    classification_table_csv,
    evaluate_generated,
    fid_grid,
    generate_suite,
)
from .finetune import (
    FinetuneConfig,
    generate_prior_set,
    loss_halved,
    register_token,
    train_textual_inversion,
    train_unet,
)
from .ingestion import load_image, load_image_dir, save_image
from .io_utils import atomic_write_json, atomic_write_text
from .metrics import extract_features, reconstruction_report
from .projection import ProjectionTrainConfig, loss_trace_csv, train_projection

SCHEMA_VERSION = 1

# per-command config keys; anything else is rejected before any write
COMMON_KEYS = {"schema_version", "command", "seed", "output_dir"}
COMMAND_KEYS = {
    "recon-eval": {"originals", "reconstructions", "feature_count"},
    "text-bench": {"fixture", "k", "encoder_id", "strategy"},
    "train-projection": {"pairs", "mode", "steps", "learning_rate",
                         "batch_size", "hidden", "optimizer"},
    "train-ti": {"bundle", "pairs", "token", "steps", "learning_rate",
                 "batch_size", "optimizer"},
    "train-unet": {"bundle", "pairs", "strategy", "prior", "steps",
                   "learning_rate", "batch_size", "optimizer"},
    "generate": {"bundle", "prompts", "count", "steps", "mode", "x0_clip"},
    "classify-eval": {"samples", "fit_positives", "fit_negatives", "method"},
    "fid-grid": {"bundles", "prompts", "references", "count", "steps",
                 "feature_count"},
}


def _log(event, **fields):
    print(json.dumps({"event": event, **fields}, sort_keys=True),
          file=sys.stderr)


def _load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _validate(cfg, command):
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version must be {SCHEMA_VERSION}, "
            f"got {cfg.get('schema_version')!r}")
    declared = cfg.get("command", command)
    if declared != command:
        raise ConfigError(
            f"config command {declared!r} does not match subcommand "
            f"{command!r}")
    allowed = COMMON_KEYS | COMMAND_KEYS[command]
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")


def _require(cfg, *keys):
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise ConfigError(f"missing required config keys: {missing}")


def _out_dir(cfg, args):
    out = (args.out or os.environ.get("CXRLAB_OUT")
           or cfg.get("output_dir"))
    if not out:
        raise ConfigError("no output directory (config output_dir, "
                          "--out, or CXRLAB_OUT)")
    os.makedirs(out, exist_ok=True)
    return out


def _seed(cfg, args):
    return args.seed if args.seed is not None else int(cfg.get("seed", 0))


def _bundle_from_config(spec, seed):
    if isinstance(spec, str):
        return load_bundle(spec)
    if isinstance(spec, dict) and "path" in spec:
        return load_bundle(spec["path"])
    if isinstance(spec, dict) and "new" in spec:
        knobs = dict(spec["new"])
        prefit_dir = knobs.pop("prefit", None)
        if "latent_shape" in knobs:
            knobs["latent_shape"] = tuple(knobs["latent_shape"])
        knobs.setdefault("seed", seed)
        prefit = load_image_dir(prefit_dir) if prefit_dir else None
        return build_toy_bundle(ToyBundleConfig(**knobs),
                                prefit_images=prefit)
    raise ConfigError("bundle must be a checkpoint path, {'path': ...}, "
                      "or {'new': {...}}")


def _load_pairs(path):
    """JSONL of {image: path, caption: str} -> [(ImageSample, caption)]."""
    pairs = []
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                img_path = obj["image"]
                if not os.path.isabs(img_path):
                    img_path = os.path.join(base, img_path)
                pairs.append((load_image(img_path), obj["caption"]))
    except OSError as exc:
        raise DataError(f"cannot read pairs file: {exc}") from exc
    except (KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"bad pairs record at line {line_no}: {exc}") from exc
    if not pairs:
        raise DataError(f"no training pairs in {path}")
    return pairs


# --- subcommands -------------------------------------------------------------

def _cmd_recon_eval(cfg, args):
    _require(cfg, "originals", "reconstructions")
    out = _out_dir(cfg, args)
    originals = load_image_dir(cfg["originals"])
    recons = load_image_dir(cfg["reconstructions"])
    embedder = ToyFeatureExtractor(image_size=originals[0].height,
                                   n_features=int(cfg.get("feature_count", 32)),
                                   seed=_seed(cfg, args))
    report = reconstruction_report(originals, recons, embedder)
    atomic_write_json(os.path.join(out, "recon_report.json"), report)
    _log("recon-eval", n_pairs=report["n_pairs"])
    return {
        "command": "recon-eval",
        "n_pairs": report["n_pairs"],
        "rmse_mean": report["aggregate"]["rmse"]["mean"],
        "ssim_mean": report["aggregate"]["ssim"]["mean"],
        "fid": report["fid"],
        "artifacts": [os.path.join(out, "recon_report.json")],
    }


def _cmd_text_bench(cfg, args):
    _require(cfg, "fixture", "k")
    out = _out_dir(cfg, args)
    try:
        with open(cfg["fixture"], encoding="utf-8") as fh:
            fixture = json.load(fh)
        embeddings = np.asarray(fixture["embeddings"], dtype=np.float64)
        labels = fixture["labels"]
    except OSError as exc:
        raise DataError(f"cannot read fixture: {exc}") from exc
    except (KeyError, json.JSONDecodeError, ValueError) as exc:
        raise DataError(f"bad fixture payload: {exc}") from exc
    result = encoder_bench.chexpert_per_class(
        embeddings, labels, int(cfg["k"]),
        encoder_id=cfg.get("encoder_id", "fixture"),
        strategy=cfg.get("strategy", "pooled"))
    atomic_write_json(os.path.join(out, "bench.json"), result.to_dict())
    atomic_write_text(os.path.join(out, "bench.csv"),
                      encoder_bench.result_table_csv([result]))
    _log("text-bench", k=result.k, n=len(labels))
    return {
        "command": "text-bench",
        "k": result.k,
        "global": result.global_score,
        "macro": result.macro,
        "artifacts": [os.path.join(out, "bench.json"),
                      os.path.join(out, "bench.csv")],
    }


def _cmd_train_projection(cfg, args):
    _require(cfg, "pairs")
    out = _out_dir(cfg, args)
    try:
        with open(cfg["pairs"], encoding="utf-8") as fh:
            payload = json.load(fh)
        source = payload["source"]
        target = payload["target"]
    except OSError as exc:
        raise DataError(f"cannot read pairs file: {exc}") from exc
    except (KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"bad pairs payload: {exc}") from exc
    tcfg = ProjectionTrainConfig(
        mode=cfg.get("mode", "document"),
        learning_rate=float(cfg.get("learning_rate", 1e-2)),
        steps=int(cfg.get("steps", 500)),
        batch_size=int(cfg.get("batch_size", 16)),
        seed=_seed(cfg, args),
        optimizer=cfg.get("optimizer", "sgd"),
        hidden=int(cfg.get("hidden", 768)))
    mlp, info = train_projection(source, target, tcfg)
    ckpt = os.path.join(out, "projection.ckpt.json")
    mlp.save(ckpt, mode=tcfg.mode, seed=tcfg.seed, step=tcfg.steps)
    atomic_write_text(os.path.join(out, "loss.csv"),
                      loss_trace_csv(info["loss_trace"]))
    _log("train-projection", steps=tcfg.steps, n_rows=info["n_rows"],
         dropped=info["dropped_pairs"])
    return {
        "command": "train-projection",
        "final_loss": info["loss_trace"][-1],
        "n_rows": info["n_rows"],
        "dropped_pairs": info["dropped_pairs"],
        "artifacts": [ckpt, os.path.join(out, "loss.csv")],
    }


def _train_summary(command, trace, artifacts):
    return {
        "command": command,
        "steps": len(trace),
        "first_loss": trace[0],
        "final_loss": trace[-1],
        "loss_halved": loss_halved(trace),
        "artifacts": artifacts,
    }


def _cmd_train_ti(cfg, args):
    _require(cfg, "bundle", "pairs", "token")
    out = _out_dir(cfg, args)
    seed = _seed(cfg, args)
    bundle = _bundle_from_config(cfg["bundle"], seed)
    pairs = _load_pairs(cfg["pairs"])
    token = cfg["token"]
    if not isinstance(token, dict) or "surface" not in token:
        raise ConfigError("token must be an object with a 'surface' key")
    reg = register_token(bundle, token["surface"],
                         init_from=token.get("init_from"),
                         init_scale=float(token.get("init_scale", 1.0)))
    ft = FinetuneConfig(strategy="textual_inversion",
                        steps=int(cfg.get("steps", 300)),
                        learning_rate=float(cfg.get("learning_rate", 1e-2)),
                        batch_size=int(cfg.get("batch_size", 1)),
                        seed=seed,
                        optimizer=cfg.get("optimizer", "adam"))
    trace = train_textual_inversion(bundle, pairs, reg, ft)
    ckpt = os.path.join(out, "bundle.ckpt.json")
    save_bundle(bundle, ckpt)
    atomic_write_text(os.path.join(out, "loss.csv"), loss_trace_csv(trace))
    _log("train-ti", token=reg.surface, token_id=reg.token_id,
         steps=len(trace))
    summary = _train_summary("train-ti", trace,
                             [ckpt, os.path.join(out, "loss.csv")])
    summary["token_id"] = reg.token_id
    return summary


def _cmd_train_unet(cfg, args):
    _require(cfg, "bundle", "pairs")
    out = _out_dir(cfg, args)
    seed = _seed(cfg, args)
    bundle = _bundle_from_config(cfg["bundle"], seed)
    pairs = _load_pairs(cfg["pairs"])
    strategy = cfg.get("strategy", "unet")
    prior_cfg = cfg.get("prior", {})
    prior_set = []
    prior_weight = float(prior_cfg.get("weight", 1.0))
    if strategy == "unet_with_prior":
        if "caption" not in prior_cfg:
            raise ConfigError("unet_with_prior needs prior.caption")
        # 2x the instance set unless the config says otherwise
        n = int(prior_cfg.get("size", 2 * len(pairs)))
        prior_set = generate_prior_set(
            bundle, prior_cfg["caption"], n, seed=seed,
            steps=prior_cfg.get("steps"),
            x0_clip=prior_cfg.get("x0_clip"))
        _log("prior-set", size=n, caption=prior_cfg["caption"])
    ft = FinetuneConfig(strategy=strategy,
                        steps=int(cfg.get("steps", 400)),
                        learning_rate=float(cfg.get("learning_rate", 1e-2)),
                        batch_size=int(cfg.get("batch_size", 1)),
                        seed=seed,
                        optimizer=cfg.get("optimizer", "adam"),
                        prior_weight=prior_weight,
                        prior_set=prior_set)
    trace = train_unet(bundle, pairs, ft)
    ckpt = os.path.join(out, "bundle.ckpt.json")
    save_bundle(bundle, ckpt)
    atomic_write_text(os.path.join(out, "loss.csv"), loss_trace_csv(trace))
    _log("train-unet", strategy=strategy, steps=len(trace))
    return _train_summary("train-unet", trace,
                          [ckpt, os.path.join(out, "loss.csv")])


def _cmd_generate(cfg, args):
    _require(cfg, "bundle", "prompts")
    out = _out_dir(cfg, args)
    seed = _seed(cfg, args)
    bundle = _bundle_from_config(cfg["bundle"], seed)
    prompts = [(p["caption"], int(p.get("label", 0)))
               for p in cfg["prompts"]]
    spec = GenerationSpec(prompts=prompts,
                          per_prompt_count=int(cfg.get("count", 50)),
                          seed=seed,
                          steps=int(cfg.get("steps", 20)),
                          mode=cfg.get("mode", "deterministic"),
                          x0_clip=cfg.get("x0_clip"))
    samples = generate_suite(bundle, spec)
    sidecars = []
    for s in samples:
        save_image(s.image, os.path.join(out, f"{s.image.id}.png"))
        sidecars.append(s.sidecar())
    atomic_write_text(
        os.path.join(out, "sidecars.jsonl"),
        "".join(json.dumps(sc, sort_keys=True) + "\n" for sc in sidecars))
    _log("generate", n=len(samples), prompts=len(prompts))
    return {
        "command": "generate",
        "n_samples": len(samples),
        "artifacts": [out],
    }


def _cmd_classify_eval(cfg, args):
    _require(cfg, "samples")
    out = _out_dir(cfg, args)
    sample_dir = cfg["samples"]
    sidecar_path = os.path.join(sample_dir, "sidecars.jsonl")
    try:
        with open(sidecar_path, encoding="utf-8") as fh:
            sidecars = [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise DataError(f"cannot read sidecars: {exc}") from exc
    samples = []
    for sc in sidecars:
        img = load_image(os.path.join(sample_dir, f"{sc['id']}.png"))
        samples.append(evalharness.GeneratedSample(
            image=img, caption=sc["caption"],
            expected_label=int(sc["expected_label"]), seed=sc["seed"]))
    classifier = BlobClassifier(image_size=samples[0].image.height)
    if "fit_positives" in cfg and "fit_negatives" in cfg:
        classifier.fit(load_image_dir(cfg["fit_positives"]),
                       load_image_dir(cfg["fit_negatives"]))
    report, row = evaluate_generated(samples, classifier,
                                     method=cfg.get("method", "toy"))
    atomic_write_json(os.path.join(out, "metrics.json"),
                      {"schema_version": SCHEMA_VERSION, **report.to_dict()})
    atomic_write_text(os.path.join(out, "table.csv"),
                      classification_table_csv([row]))
    _log("classify-eval", n=len(samples))
    return {
        "command": "classify-eval",
        "n_samples": len(samples),
        "auc": None if np.isnan(report.auc) else report.auc,
        "accuracy": report.accuracy,
        "f1": report.f1,
        "artifacts": [os.path.join(out, "metrics.json"),
                      os.path.join(out, "table.csv")],
    }


def _cmd_fid_grid(cfg, args):
    _require(cfg, "bundles", "prompts", "references")
    out = _out_dir(cfg, args)
    seed = _seed(cfg, args)
    bundles = [(b["name"], _bundle_from_config(b, seed))
               for b in cfg["bundles"]]
    prompts = list(cfg["prompts"])
    image_size = bundles[0][1].vae.image_size
    extractor = ToyFeatureExtractor(
        image_size=image_size,
        n_features=int(cfg.get("feature_count", 32)), seed=seed)
    references = {}
    for prompt in prompts:
        if prompt not in cfg["references"]:
            raise ConfigError(f"no reference directory for prompt {prompt!r}")
        references[prompt] = extract_features(
            load_image_dir(cfg["references"][prompt]), extractor)
    grid, csv_text = fid_grid(bundles, prompts, references, extractor,
                              per_prompt_count=int(cfg.get("count", 50)),
                              seed=seed, steps=int(cfg.get("steps", 20)))
    atomic_write_json(os.path.join(out, "fid_grid.json"), grid)
    atomic_write_text(os.path.join(out, "fid_grid.csv"), csv_text)
    _log("fid-grid", bundles=len(bundles), prompts=len(prompts))
    return {
        "command": "fid-grid",
        "grid": grid,
        "artifacts": [os.path.join(out, "fid_grid.json"),
                      os.path.join(out, "fid_grid.csv")],
    }


HANDLERS = {
    "recon-eval": _cmd_recon_eval,
    "text-bench": _cmd_text_bench,
    "train-projection": _cmd_train_projection,
    "train-ti": _cmd_train_ti,
    "train-unet": _cmd_train_unet,
    "generate": _cmd_generate,
    "classify-eval": _cmd_classify_eval,
    "fid-grid": _cmd_fid_grid,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cxrlab",
        description="Desk-scale diffusion adaptation workbench")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in HANDLERS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
        _validate(cfg, args.command)
        summary = HANDLERS[args.command](cfg, args)
    except CxrlabError as exc:
        _log("error", kind=type(exc).__name__, message=str(exc))
        if isinstance(exc, ConfigError):
            return 2
        if isinstance(exc, DataError):
            return 3
        if isinstance(exc, NumericalError):
            return 4
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
