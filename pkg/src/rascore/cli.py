"""Operator-facing command line: composes the pipeline stages into reproducible
runs. Every subcommand takes `--config <file.toml>` and `--out <run-dir>`,
snapshots the config into the run directory, and prints one machine-readable
summary line:

    stage=<name> status=<ok|fail> key-metrics=<comma-separated k:v>

Exit codes: 0 success, 1 config error (message names the offending key),
2 missing upstream artifact, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    """Bad or missing configuration; the message names the key."""


class MissingArtifactError(FileNotFoundError):
    """An upstream stage output the config points at does not exist."""


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error in {p}: {exc}") from None


def _get(cfg: dict, key: str, default=None, required: bool = False):
    """Dotted-key lookup; missing required keys raise ConfigError naming the key."""
    node = cfg
    for part in key.split("."):
        if not isinstance(node, dict) or part not in node:
            if required:
                raise ConfigError(f"missing config key: {key}")
            return default
        node = node[part]
    return node


def _prepare_run_dir(out: str, config_path: str, stage: str, seed) -> Path:
    run = Path(out)
    run.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(config_path, run / "config.toml")
    (run / "run.json").write_text(
        json.dumps({"stage": stage, "seed": seed, "config": "config.toml"}, indent=2),
        encoding="utf-8",
    )
    return run


def _manifest(cfg: dict):
    from .data import ManifestError, load_manifest

    path = Path(_get(cfg, "data.manifest", required=True))
    if not path.is_file():
        raise MissingArtifactError(f"manifest not found: {path}")
    try:
        return load_manifest(path)
    except ManifestError as exc:
        raise ConfigError(f"data.manifest: {exc}") from None


def _require_file(path_s, what: str) -> Path:
    path = Path(path_s)
    if not path.is_file():
        raise MissingArtifactError(f"missing {what}: {path}")
    return path


def _load_split_images(manifest, split: str, with_landmarks: bool = False):
    from .pipeline import load_radiograph

    entries = manifest.split(split)
    return [load_radiograph(manifest, e, with_landmarks=with_landmarks) for e in entries]


# ---------------------------------------------------------------------------
# Stage implementations. Each returns a dict of key metrics.

def _stage_synth(cfg: dict, run: Path) -> dict:
    from .synthetic import SyntheticSpec, generate, write_dataset

    n = int(_get(cfg, "synth.n", required=True))
    counts = tuple(int(c) for c in _get(cfg, "synth.counts", required=True))
    if len(counts) != 3:
        raise ConfigError("synth.counts must be [train, val, test]")
    fields = {
        name: _get(cfg, f"synth.{name}")
        for name in (
            "height", "width", "score_per_lesion", "max_lesions", "noise_sd",
            "rotation_deg", "lesion_intensity", "seed",
        )
    }
    spec = SyntheticSpec(**{k: v for k, v in fields.items() if v is not None})
    samples = generate(spec, n, id_prefix=_get(cfg, "synth.id_prefix", "synth"))
    manifest_path = write_dataset(samples, run / "dataset", counts)
    return {"n": n, "manifest": manifest_path}


def _stage_masks(cfg: dict, run: Path) -> dict:
    from .foreground import MaskConfig
    from .pipeline import get_mask, load_radiograph

    manifest = _manifest(cfg)
    mask_cfg = MaskConfig(
        blur_ksize=int(_get(cfg, "masks.blur_ksize", 5)),
        erosion_iters=int(_get(cfg, "masks.erosion_iters", 1)),
        dilation_iters=int(_get(cfg, "masks.dilation_iters", 2)),
    )
    masks_dir = run / "masks"
    n = 0
    for entry in manifest.entries:
        img = load_radiograph(manifest, entry)
        get_mask(img, masks_dir, mask_cfg)
        n += 1
    return {"n_masks": n, "dir": masks_dir}


def _stage_train_landmarks(cfg: dict, run: Path) -> dict:
    from .landmark_model import LandmarkTrainConfig, save_landmark_model, train_landmark_model

    manifest = _manifest(cfg)
    train = _load_split_images(manifest, "train", with_landmarks=True)
    if not train:
        raise ConfigError("data.manifest: empty training split for landmarks")
    tc = LandmarkTrainConfig(
        work_size=int(_get(cfg, "landmarks.work_size", 128)),
        sigma=float(_get(cfg, "landmarks.sigma", 2.0)),
        epochs=int(_get(cfg, "landmarks.epochs", 60)),
        batch_size=int(_get(cfg, "landmarks.batch_size", 8)),
        lr=float(_get(cfg, "landmarks.lr", 1e-3)),
        seed=int(_get(cfg, "seed", 0)),
    )
    model, history = train_landmark_model(train, [t.landmarks for t in train], tc)
    ckpt = run / "landmark_model.pt"
    save_landmark_model(model, tc.work_size, ckpt)
    with open(run / "landmark_history.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss"])
        for epoch, loss in enumerate(history):
            writer.writerow([epoch, f"{loss:.10f}"])
    # convergence flag: validation-free heuristic on the loss tail
    tail = max(1, len(history) // 10)
    still_improving = len(history) > tail and min(history[-tail:]) < min(history[:-tail])
    return {
        "final_loss": f"{history[-1]:.6f}",
        "still_improving": str(still_improving).lower(),
        "checkpoint": ckpt,
    }


def _stage_eval_landmarks(cfg: dict, run: Path) -> dict:
    from .joints import estimate_pixel_spacing, mre_sdr
    from .landmark_model import load_landmark_model, predict_landmarks

    manifest = _manifest(cfg)
    ckpt = _require_file(_get(cfg, "landmarks.checkpoint", required=True), "landmark checkpoint")
    model, work_size = load_landmark_model(ckpt)
    split = _get(cfg, "data.split", "test")
    images = _load_split_images(manifest, split, with_landmarks=True)
    if not images:
        raise ConfigError(f"data.split: split {split!r} is empty")
    rows, mres = [], []
    for img in images:
        pred = predict_landmarks(model, img, work_size)
        spacing = (
            estimate_pixel_spacing(img.landmarks, "left")
            + estimate_pixel_spacing(img.landmarks, "right")
        ) / 2.0
        mre, sdr = mre_sdr(pred, img.landmarks, spacing)
        rows.append([img.id, f"{mre:.4f}"] + [f"{s:.2f}" for s in sdr])
        mres.append(mre)
    with open(run / "landmark_eval.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "mre_mm", "sdr2", "sdr3", "sdr4", "sdr10"])
        writer.writerows(rows)
    return {"n": len(images), "mre_mm": f"{float(np.mean(mres)):.4f}"}


def _pc_config(cfg: dict):
    from .patch_classifier import PCTrainConfig

    return PCTrainConfig(
        epochs=int(_get(cfg, "pc.epochs", 30)),
        batch_size=int(_get(cfg, "pc.batch_size", 64)),
        lr=float(_get(cfg, "pc.lr", 1e-3)),
        weight_decay=float(_get(cfg, "pc.weight_decay", 1e-3)),
        seed=int(_get(cfg, "seed", 0)),
    )


def _stage_train_pc(cfg: dict, run: Path) -> dict:
    from .foreground import MaskConfig
    from .joints import default_joint_patch_spec
    from .patch_classifier import PatchClassifier, save_classifier, train_patch_classifier
    from .pipeline import get_mask, pc_data_scheme1, pc_data_scheme2

    manifest = _manifest(cfg)
    scheme = int(_get(cfg, "scheme", required=True))
    if scheme not in (1, 2):
        raise ConfigError(f"scheme: must be 1 or 2, got {scheme}")
    seed = int(_get(cfg, "seed", 0))
    rng = np.random.default_rng(seed)
    input_size = int(_get(cfg, "pc.input_size", 224))
    classifier = PatchClassifier(
        backbone_id=_get(cfg, "pc.backbone", "small-conv"),
        n_classes=3 if scheme == 1 else 2,
        feature_dim=_get(cfg, "pc.feature_dim"),
        input_size=input_size,
        pretrained=bool(_get(cfg, "pc.pretrained", False)),
    )
    train = _load_split_images(manifest, "train", with_landmarks=scheme == 2)
    val = _load_split_images(manifest, "val", with_landmarks=scheme == 2)
    if scheme == 1:
        masks_dir = _get(cfg, "masks.dir")
        if masks_dir is not None and not Path(masks_dir).is_dir():
            raise MissingArtifactError(f"missing masks directory: {masks_dir}")
        masks_dir = None if masks_dir is None else Path(masks_dir)
        mask_cfg = MaskConfig()
        patches, labels = pc_data_scheme1(
            train, [get_mask(i, masks_dir, mask_cfg) for i in train], rng
        )
        vp, vl = pc_data_scheme1(val, [get_mask(i, masks_dir, mask_cfg) for i in val], rng)
    else:
        spec = default_joint_patch_spec()
        patches, labels = pc_data_scheme2(train, spec, rng, input_size)
        vp, vl = pc_data_scheme2(val, spec, rng, input_size) if val else ((), ())
    classifier, history = train_patch_classifier(
        patches, labels, classifier, _pc_config(cfg), vp, vl
    )
    ckpt = run / "patch_classifier.pt"
    save_classifier(classifier, ckpt)
    metrics = {"n_patches": len(patches), "train_acc": f"{history.train_acc[-1]:.4f}"}
    if history.val_acc:
        metrics["val_acc"] = f"{max(history.val_acc):.4f}"
    metrics["checkpoint"] = ckpt
    return metrics


def _bag_builder(cfg: dict, scheme: int, classifier_path, manifest):
    """Shared between train-abmil / score / ensemble / explain."""
    from .joints import default_joint_patch_spec
    from .patch_classifier import load_classifier, truncate_to_feature_extractor
    from .pipeline import BagBuilder

    classifier = load_classifier(_require_file(classifier_path, "patch-classifier checkpoint"))
    extractor = truncate_to_feature_extractor(classifier)
    perturb = _get(cfg, "abmil.perturb_sd_mm")
    builder = BagBuilder(
        scheme=scheme,
        extractor=extractor,
        classifier=classifier if scheme == 1 else None,
        k=int(_get(cfg, "abmil.k", 30)),
        joint_spec=default_joint_patch_spec() if scheme == 2 else None,
        patch_size=classifier.input_size,
        perturb_sds_mm=None if perturb is None else np.full(74, float(perturb)),
    )
    return builder, extractor


def _stage_train_abmil(cfg: dict, run: Path) -> dict:
    from .abmil import save_checkpoint
    from .pipeline import build_feature_bags, fit_split_standardizer
    from .training import TrainConfig, train_abmil, write_history

    manifest = _manifest(cfg)
    scheme = int(_get(cfg, "scheme", required=True))
    if scheme not in (1, 2):
        raise ConfigError(f"scheme: must be 1 or 2, got {scheme}")
    seed = int(_get(cfg, "seed", 0))
    builder, extractor = _bag_builder(
        cfg, scheme, _get(cfg, "pc.checkpoint", required=True), manifest
    )
    rng = np.random.default_rng(seed)
    train = _load_split_images(manifest, "train", with_landmarks=scheme == 2)
    val = _load_split_images(manifest, "val", with_landmarks=scheme == 2)
    if not train:
        raise ConfigError("data.manifest: empty training split")
    _, train_fb = build_feature_bags(builder, train, rng=rng)
    _, val_fb = build_feature_bags(builder, val, rng=rng) if val else ([], [])
    standardizer = fit_split_standardizer(manifest)
    tc = TrainConfig(
        scheme=scheme,
        k=builder.k,
        epochs=int(_get(cfg, "abmil.epochs", 100)),
        batch_size=int(_get(cfg, "abmil.batch_size", 16)),
        lr=float(_get(cfg, "abmil.lr", 1e-3)),
        weight_decay=float(_get(cfg, "abmil.weight_decay", 1e-3)),
        attention_dim=int(_get(cfg, "abmil.attention_dim", 128)),
        dropout=float(_get(cfg, "abmil.dropout", 0.1)),
        attention_warm_start_scale=float(_get(cfg, "abmil.warm_start_scale", 0.0)),
        seed=seed,
    )
    direction = None
    if tc.attention_warm_start_scale > 0:
        from .patch_classifier import abnormality_direction

        direction = abnormality_direction(extractor.classifier)
    result = train_abmil(
        train_fb, val_fb, standardizer, tc, extractor=extractor,
        attention_direction=direction,
    )
    ckpt = run / "abmil.pt"
    save_checkpoint(result.model, standardizer, ckpt)
    write_history(result.history, run / "history.csv")
    return {
        "best_epoch": result.best_epoch,
        "val_rmse_std": f"{result.val_rmse:.4f}",
        "checkpoint": ckpt,
    }


def _score_images(cfg: dict, scheme: int, manifest, images):
    """Predict scores for a list of radiographs; returns (ids, preds, truths)."""
    from .abmil import load_checkpoint, predict
    from .landmark_model import load_landmark_model, predict_landmarks
    from .patch_classifier import extract_features

    model, standardizer = load_checkpoint(
        _require_file(_get(cfg, "abmil.checkpoint", required=True), "ABMIL checkpoint")
    )
    builder, _ = _bag_builder(cfg, scheme, _get(cfg, "pc.checkpoint", required=True), manifest)
    builder.perturb_sds_mm = None  # never perturb at inference
    lm_model = None
    lm_path = _get(cfg, "landmarks.checkpoint")
    if scheme == 2 and lm_path is not None:
        lm_model, lm_work = load_landmark_model(_require_file(lm_path, "landmark checkpoint"))
    ids, preds, truths = [], [], []
    for img in images:
        if scheme == 2 and img.landmarks is None:
            if lm_model is None:
                raise MissingArtifactError(
                    f"image {img.id!r} has no landmarks and no landmarks.checkpoint is configured"
                )
        if scheme == 2 and lm_model is not None:
            from dataclasses import replace

            img = replace(img, landmarks=predict_landmarks(lm_model, img, lm_work))
        _, fb = builder.build(img)
        z, _ = predict(model, fb.features)
        ids.append(img.id)
        preds.append(standardizer.invert(z))
        truths.append(img.score)
    return ids, preds, truths


def _write_predictions(path, ids, preds, truths) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "prediction", "truth"])
        for rid, p, t in zip(ids, preds, truths):
            writer.writerow([rid, repr(p), "" if t is None else repr(t)])


def _stage_score(cfg: dict, run: Path, scheme: int) -> dict:
    from .data import Radiograph
    from .evaluation import pcc, rmse

    image_path = _get(cfg, "data.image")
    if image_path is not None:  # single-image mode
        import cv2

        pix = cv2.imread(str(image_path), cv2.IMREAD_GRAYSCALE)
        if pix is None:
            raise MissingArtifactError(f"missing image: {image_path}")
        lms = None
        lm_file = _get(cfg, "data.landmark_file")
        if lm_file is not None:
            from .joints import load_landmarks

            lms = load_landmarks(_require_file(lm_file, "landmark file"))
        images = [Radiograph(Path(image_path).stem, pix, landmarks=lms)]
        manifest = None
    else:
        manifest = _manifest(cfg)
        split = _get(cfg, "data.split", "test")
        images = _load_split_images(manifest, split, with_landmarks=False)
        if not images:
            raise ConfigError(f"data.split: split {split!r} is empty")
        if scheme == 2 and _get(cfg, "landmarks.checkpoint") is None:
            images = _load_split_images(manifest, split, with_landmarks=True)
    ids, preds, truths = _score_images(cfg, scheme, manifest, images)
    _write_predictions(run / "predictions.csv", ids, preds, truths)
    metrics = {"n": len(ids)}
    scored = [(p, t) for p, t in zip(preds, truths) if t is not None]
    if len(scored) >= 2:
        ps, ts = zip(*scored)
        metrics["pcc"] = f"{pcc(ps, ts):.4f}"
        metrics["rmse"] = f"{rmse(ps, ts):.4f}"
    elif len(ids) == 1:
        metrics["prediction"] = f"{preds[0]:.4f}"
    return metrics


def _stage_ensemble(cfg: dict, run: Path) -> dict:
    from .abmil import ensemble_predict, load_checkpoint, predict
    from .evaluation import pcc, rmse

    manifest = _manifest(cfg)
    scheme = int(_get(cfg, "scheme", required=True))
    ckpts = _get(cfg, "abmil.checkpoints", required=True)
    if not isinstance(ckpts, list) or not ckpts:
        raise ConfigError("abmil.checkpoints: must be a non-empty list of paths")
    members = [load_checkpoint(_require_file(c, "ABMIL checkpoint")) for c in ckpts]
    builder, _ = _bag_builder(cfg, scheme, _get(cfg, "pc.checkpoint", required=True), manifest)
    builder.perturb_sds_mm = None
    split = _get(cfg, "data.split", "test")
    images = _load_split_images(manifest, split, with_landmarks=scheme == 2)
    if not images:
        raise ConfigError(f"data.split: split {split!r} is empty")
    ids, preds, truths = [], [], []
    for img in images:
        _, fb = builder.build(img)
        member_preds = [std.invert(predict(m, fb.features)[0]) for m, std in members]
        ids.append(img.id)
        preds.append(ensemble_predict(member_preds))
        truths.append(img.score)
    _write_predictions(run / "predictions.csv", ids, preds, truths)
    metrics = {"n": len(ids), "members": len(members)}
    scored = [(p, t) for p, t in zip(preds, truths) if t is not None]
    if len(scored) >= 2:
        ps, ts = zip(*scored)
        metrics["pcc"] = f"{pcc(ps, ts):.4f}"
        metrics["rmse"] = f"{rmse(ps, ts):.4f}"
    return metrics


def _stage_explain(cfg: dict, run: Path) -> dict:
    from .abmil import explain, load_checkpoint, save_report

    manifest = _manifest(cfg)
    scheme = int(_get(cfg, "scheme", required=True))
    image_id = _get(cfg, "data.image_id", required=True)
    entries = [e for e in manifest.entries if e.id == image_id]
    if not entries:
        raise ConfigError(f"data.image_id: id {image_id!r} not in manifest")
    from .pipeline import load_radiograph

    img = load_radiograph(manifest, entries[0], with_landmarks=scheme == 2)
    model, standardizer = load_checkpoint(
        _require_file(_get(cfg, "abmil.checkpoint", required=True), "ABMIL checkpoint")
    )
    builder, _ = _bag_builder(cfg, scheme, _get(cfg, "pc.checkpoint", required=True), manifest)
    builder.perturb_sds_mm = None
    _, fb = builder.build(img)
    overlay = run / f"{image_id}.overlay.png"
    report = explain(model, fb, standardizer, image=img.pixels, overlay_path=overlay)
    save_report(report, run / f"{image_id}.attention.csv")
    return {
        "id": image_id,
        "prediction": f"{report.prediction:.4f}",
        "top_weight": f"{report.weights.max():.4f}",
        "overlay": overlay,
    }


def _stage_report(cfg: dict, run: Path) -> dict:
    from .evaluation import regression_report

    pred_path = _require_file(_get(cfg, "report.predictions", required=True), "predictions file")
    ids, preds, truths = [], [], []
    with open(pred_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            if not row or row[2] == "":
                continue
            ids.append(row[0])
            preds.append(float(row[1]))
            truths.append(float(row[2]))
    if len(preds) < 2:
        raise ConfigError("report.predictions: need at least 2 scored predictions")
    rep = regression_report(preds, truths, scatter_path=run / "scatter.png")
    (run / "report.json").write_text(
        json.dumps({"pcc": rep.pcc, "mae": rep.mae, "rmse": rep.rmse, "n": rep.n}, indent=2),
        encoding="utf-8",
    )
    return {"n": rep.n, "pcc": f"{rep.pcc:.4f}", "mae": f"{rep.mae:.4f}", "rmse": f"{rep.rmse:.4f}"}


# ---------------------------------------------------------------------------

_STAGES = {
    "synth": _stage_synth,
    "masks": _stage_masks,
    "train-landmarks": _stage_train_landmarks,
    "eval-landmarks": _stage_eval_landmarks,
    "train-pc": _stage_train_pc,
    "train-abmil": _stage_train_abmil,
    "score": _stage_score,
    "ensemble": _stage_ensemble,
    "explain": _stage_explain,
    "report": _stage_report,
}


def _summary(stage: str, status: str, metrics: dict) -> None:
    kv = ",".join(f"{k}:{v}" for k, v in metrics.items())
    print(f"stage={stage} status={status} key-metrics={kv}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rascore", description="Interpretable SvdH scoring pipeline stages."
    )
    sub = parser.add_subparsers(dest="stage", required=True)
    for name in _STAGES:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="TOML config file")
        sp.add_argument("--out", required=True, help="run directory for all artifacts")
        if name == "score":
            sp.add_argument("--scheme", type=int, choices=(1, 2), required=True)
    args = parser.parse_args(argv)

    stage = args.stage
    try:
        cfg = _load_config(args.config)
        seed = _get(cfg, "seed", 0)
        import torch

        torch.manual_seed(int(seed))
        run = _prepare_run_dir(args.out, args.config, stage, seed)
        if stage == "score":
            metrics = _stage_score(cfg, run, args.scheme)
        else:
            metrics = _STAGES[stage](cfg, run)
    except ConfigError as exc:
        _summary(stage, "fail", {"error": f'"{exc}"'})
        return 1
    except (MissingArtifactError, FileNotFoundError) as exc:
        _summary(stage, "fail", {"error": f'"{exc}"'})
        return 2
    except Exception as exc:  # runtime failure (non-finite loss, decode error, ...)
        _summary(stage, "fail", {"error": f'"{exc}"'})
        return 3
    _summary(stage, "ok", metrics)
    return 0


if __name__ == "__main__":
    sys.exit(main())
