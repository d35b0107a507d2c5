# app/main.py
"""
Command line: synth, extract, train-vlm, score, saliency, eval-auc, reconstruct.

Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app import cnn, config, container, datasets, preprocess, reconstruct, saliency, seeding, synthetic, vlm
from app import metrics
from app import tensor as T
from app.errors import DataError, EmptyCorpusError, UsageError, VlmError
from app.logs.logger import configure_logging, log_event
from app.metrics import IMAGES_PROCESSED_TOTAL
from app.models import PRESETS, RunConfig, TrainHyperParams
from app.tensor import Tensor

logger = logging.getLogger("vlm.cli")


# -------------------------------------------------------------------
# Parser
# -------------------------------------------------------------------

class VlmArgumentParser(argparse.ArgumentParser):
    """Usage problems raise instead of exiting so `main` owns the exit code."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def _name_list(text: str) -> List[str]:
    names = [v.strip() for v in text.split(",") if v.strip()]
    if not names:
        raise argparse.ArgumentTypeError("expected at least one name")
    return names


def parse_lambdas(text: Optional[str]) -> Dict[str, float]:
    """'conv1=1,conv2=0.1' -> {'conv1': 1.0, 'conv2': 0.1}."""
    if not text:
        return {}
    out = {}
    for item in text.split(","):
        name, sep, value = item.partition("=")
        if not sep or not name.strip():
            raise UsageError(f"bad lambda entry {item!r}; expected layer=weight")
        try:
            out[name.strip()] = float(value)
        except ValueError as e:
            raise UsageError(f"bad lambda weight in {item!r}") from e
    return out


def build_parser() -> VlmArgumentParser:
    common = VlmArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", help="JSON run config; CLI flags override its values")
    g.add_argument("--precision", choices=sorted(T.DTYPES), help="scalar precision (default from config / VLM_PRECISION)")
    g.add_argument("--seed", type=int, help="global seed; every consumer derives a named stream from it")
    g.add_argument("--jobs", type=int, help="worker cap for per-image work (default: available cores)")
    g.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    g.add_argument("--metrics-out", help="write prometheus counters to this text file at exit")

    parser = VlmArgumentParser(prog="vlm", description="Visual language model unnaturalness toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic toy CNNs and datasets")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("extract", parents=[common], help="extract CNN feature grids for a directory of images")
    p.add_argument("--cnn", help="CNN weight file")
    p.add_argument("--images", required=True, help="directory of PNG/PPM images")
    p.add_argument("--taps", type=_name_list, help="comma-separated tap names (default: all taps)")
    p.add_argument("--out", help="output directory for feature files")
    p.add_argument("--subtract-mean", action="store_true", default=None, help="subtract the mean image of the input set")
    p.add_argument("--post-relu", action="store_true", default=None, help="tap after the following ReLU")

    p = sub.add_parser("train-vlm", parents=[common], help="fit preprocessing and train one layer model")
    p.add_argument("--features", required=True, help="directory of extracted feature files")
    p.add_argument("--layer", required=True, help="tap name to train on")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="hyperparameter preset")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--momentum", type=float, help="momentum")
    p.add_argument("--batch", type=int, help="minibatch size")
    p.add_argument("--iters", type=int, help="iterations")
    p.add_argument("--clip-norm", type=float, help="global gradient-norm clip, 0 disables")
    p.add_argument("--objective", choices=["joint", "per_direction"], help="training loss")
    p.add_argument("--cell", choices=["lstm", "rnn"], help="recurrent cell")
    p.add_argument("--whiten", action="store_true", default=None, help="whiten the PCA output")
    p.add_argument("--init-model", help="resume from a saved layer model")

    p = sub.add_parser("score", parents=[common], help="print per-layer and image unnaturalness")
    p.add_argument("--cnn", help="CNN weight file")
    p.add_argument("--model", nargs="+", required=True, help="layer model files")
    p.add_argument("--lambdas", help="layer weights 'conv1=1,conv2=0.1' (default 10^-(n-1))")
    p.add_argument("--image", required=True, help="image file")
    p.add_argument("--mean-image", help="mean image tensor to subtract")
    p.add_argument("--symmetric", action="store_true", help="symmetric left/up weights in the map")

    p = sub.add_parser("saliency", parents=[common], help="write the saliency map of one image")
    p.add_argument("--cnn", help="CNN weight file")
    p.add_argument("--model", required=True, help="layer model whose map is used")
    p.add_argument("--image", required=True, help="image file")
    p.add_argument("--sigma", type=float, help="blur sigma relative to image width")
    p.add_argument("--out", required=True, help="output PNG (raw tensor written next to it)")
    p.add_argument("--mean-image", help="mean image tensor to subtract")

    p = sub.add_parser("eval-auc", parents=[common], help="shuffled AUC over a fixation dataset")
    p.add_argument("--cnn", help="CNN weight file")
    p.add_argument("--model", required=True, help="layer model whose map is used")
    p.add_argument("--dataset", required=True, help="dataset root with images/ and fixations/")
    p.add_argument("--sigma", type=_float_list, help="one or more comma-separated relative sigmas")
    p.add_argument("--negative-cap", type=int, help="maximum negatives per image")
    p.add_argument("--out", required=True, help="output CSV report")
    p.add_argument("--mean-image", help="mean image tensor to subtract")

    p = sub.add_parser("reconstruct", parents=[common], help="invert a feature by gradient descent")
    p.add_argument("--cnn", help="CNN weight file")
    p.add_argument("--models", nargs="*", default=None, help="layer model files for the regularizer")
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--target-image", help="image whose feature is inverted")
    target.add_argument("--target-tensor", help="feature tensor file to invert")
    p.add_argument("--target-layer", help="tap holding the target feature (default: last tap)")
    p.add_argument("--init-image", help="start from this image instead of Gaussian noise")
    p.add_argument("--rgb-corpus", help="directory of images for the Gaussian init statistics")
    p.add_argument("--lambda-r", type=float, help="regularizer weight")
    p.add_argument("--lambdas", help="layer weights 'conv1=1,conv2=0.1'")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--momentum", type=float, help="momentum")
    p.add_argument("--iters", type=int, help="iterations")
    p.add_argument("--out", help="output directory")
    p.add_argument("--mean-image", help="mean image tensor to subtract")
    return parser


# -------------------------------------------------------------------
# Helpers
# -------------------------------------------------------------------

def _require_file(path: Optional[str], what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _require_dir(path: Optional[str], what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} is not a directory: {path}")
    return p


def _output_dir(path: Optional[str], what: str = "--out") -> Path:
    if not path:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise UsageError(f"{what} exists and is not a directory: {path}")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _artifact(path: Path, root: Path, **extra: Any) -> Dict[str, Any]:
    entry = {"path": str(path.relative_to(root)) if path.is_relative_to(root) else str(path), "sha256": datasets.sha256_file(path)}
    entry.update(extra)
    return entry


def _write_run_files(out_dir: Path, command: str, cfg: RunConfig, artifacts: List[Dict[str, Any]], sources: List[Dict[str, Any]]) -> None:
    """manifest.json and effective-config.json; no timestamps so reruns hash-compare equal."""
    manifest = {
        "schema_version": config.MANIFEST_SCHEMA_VERSION,
        "command": command,
        "artifacts": artifacts,
        "sources": sources,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out_dir / "effective-config.json").write_text(
        json.dumps(cfg.model_dump(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _load_cnn(cfg: RunConfig) -> cnn.CnnModel:
    return cnn.load_model(_require_file(cfg.cnn, "--cnn"))


def _mean_image(path: Optional[str], model: cnn.CnnModel) -> Optional[np.ndarray]:
    if not path:
        return None
    mean, _ = container.read_tensor(_require_file(path, "--mean-image"))
    if mean.shape != tuple(model.input_size):
        raise DataError(f"mean image shape {mean.shape} does not match CNN input {tuple(model.input_size)}")
    return mean.astype(np.float64)


def _cnn_input(path: Path, model: cnn.CnnModel, mean: Optional[np.ndarray]) -> np.ndarray:
    h, w, _ = model.input_size
    image = datasets.load_image(path, size=(h, w))
    return image - mean if mean is not None else image


def _check_layers(models: Sequence[vlm.VlmLayerModel], model: cnn.CnnModel) -> None:
    for m in models:
        if m.layer_name not in model.spec.taps:
            raise DataError(f"layer model {m.layer_name!r} has no matching tap in the CNN ({model.spec.taps})")


# -------------------------------------------------------------------
# Commands
# -------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = _output_dir(args.out)
    paths = synthetic.write_all(out, cfg.seed)
    artifacts = [_artifact(paths["cnn"], out), _artifact(paths["cnn2"], out)]
    for sub in (paths["corpus"], paths["fixations"] / "images", paths["fixations"] / "fixations"):
        artifacts.extend(_artifact(p, out) for p in sorted(sub.iterdir()))
    _write_run_files(out, "synth", cfg, artifacts, [])
    log_event("synth", {"out": out, "files": len(artifacts)})
    return 0


def cmd_extract(args: argparse.Namespace, cfg: RunConfig) -> int:
    model = _load_cnn(cfg)
    images_dir = _require_dir(args.images, "--images")
    out = _output_dir(cfg.output_dir)
    taps = args.taps or list(model.spec.taps)
    unknown = sorted(set(taps) - set(model.spec.taps))
    if unknown:
        raise UsageError(f"unknown taps {unknown}; CNN exports {model.spec.taps}")

    files = datasets.list_images(images_dir)
    if not files:
        raise EmptyCorpusError(f"no images in {images_dir}")

    h, w, _ = model.input_size
    decoded: List[Tuple[Path, np.ndarray]] = []
    for path in files:
        try:
            decoded.append((path, datasets.load_image(path, size=(h, w))))
        except DataError as e:
            IMAGES_PROCESSED_TOTAL.labels(command="extract", status="skipped").inc()
            log_event("skip_image", {"image": path.name, "reason": e.detail}, logger=logger, level=logging.WARNING)
    if not decoded:
        raise DataError(f"all {len(files)} images in {images_dir} were undecodable")

    artifacts: List[Dict[str, Any]] = []
    mean = None
    if cfg.subtract_mean:
        mean = np.mean(np.stack([img for _, img in decoded]), axis=0)
        mean_path = out / "mean-image.vlmt"
        container.write_tensor(mean_path, mean, {"images": len(decoded)})
        artifacts.append(_artifact(mean_path, out, shape=list(mean.shape)))

    precision = T.current_precision()

    def one(item: Tuple[Path, np.ndarray]) -> Dict[str, np.ndarray]:
        _, image = item
        with T.precision(precision):
            x = image - mean if mean is not None else image
            grids = cnn.forward(model, Tensor(x), post_relu=cfg.post_relu)
            return {tap: grids[tap].values.numpy() for tap in taps}

    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        results = list(pool.map(one, decoded))

    sources = []
    for i, ((path, _), feats) in enumerate(zip(decoded, results)):
        image = datasets.image_id(path)
        sources.append({"image": path.name, "sha256": datasets.sha256_file(path)})
        for tap in taps:
            target = datasets.feature_path(out, image, tap)
            container.write_tensor(target, feats[tap], {"image": path.name, "tap": tap})
            artifacts.append(_artifact(target, out, shape=list(feats[tap].shape)))
        IMAGES_PROCESSED_TOTAL.labels(command="extract", status="ok").inc()
        if (i + 1) % config.LOG_EVERY == 0:
            logger.info("[extract] progress=%d/%d", i + 1, len(decoded))

    _write_run_files(out, "extract", cfg, artifacts, sources)
    log_event("extract", {"images": len(decoded), "taps": ",".join(taps), "out": out})
    return 0


def cmd_train_vlm(args: argparse.Namespace, cfg: RunConfig) -> int:
    features = _require_dir(args.features, "--features")
    out_file = Path(args.out)
    out_dir = _output_dir(str(out_file.parent))
    init_path = _require_file(args.init_model, "--init-model") if args.init_model else None

    entries = datasets.read_feature_dir(features, tap=args.layer)
    if not entries:
        raise EmptyCorpusError(f"no feature files for layer {args.layer!r} in {features}")
    grids = [cnn.FeatureGrid(layer_name=args.layer, values=Tensor(values)) for _, _, values in entries]

    hp = cfg.train
    if init_path is not None:
        model = vlm.load_vlm(init_path)
        if model.layer_name != args.layer:
            raise DataError(f"--init-model is for layer {model.layer_name!r}, not {args.layer!r}")
    else:
        params = preprocess.fit(grids, whiten=hp.whiten)
        model = vlm.init_layer_model(
            args.layer,
            params,
            seed=seeding.child_seed(cfg.seed, "init"),
            cell=hp.cell,
            metadata={"corpus": str(features), "images": len(grids)},
        )

    model, history = vlm.train(model, grids, hp)
    vlm.save_vlm(model, out_file)
    loss_file = out_file.with_suffix(".loss.csv")
    pd.DataFrame({"iter": np.arange(len(history)), "loss": history}).to_csv(
        loss_file, index=False, lineterminator="\n", float_format="%.17g"
    )

    artifacts = [_artifact(out_file, out_dir), _artifact(loss_file, out_dir)]
    sources = [{"feature": p.name, "sha256": datasets.sha256_file(p)} for p in sorted(features.glob(f"*.{args.layer}.vlmt"))]
    _write_run_files(out_dir, "train-vlm", cfg, artifacts, sources)
    log_event(
        "train_vlm",
        {"layer": args.layer, "grids": len(grids), "iters": hp.max_iters, "final_loss": history[-1] if history else "n/a", "out": out_file},
    )
    return 0


def cmd_score(args: argparse.Namespace, cfg: RunConfig) -> int:
    model = _load_cnn(cfg)
    paths = [_require_file(p, "--model") for p in args.model]
    image_path = _require_file(args.image, "--image")
    models = [vlm.load_vlm(p) for p in paths]
    _check_layers(models, model)
    lambdas = parse_lambdas(args.lambdas) or vlm.default_lambdas([m.layer_name for m in models])

    image = _cnn_input(image_path, model, _mean_image(args.mean_image, model))
    grids = cnn.forward(model, Tensor(image), post_relu=cfg.post_relu)
    per_layer = {
        m.layer_name: vlm.layer_unnaturalness(vlm.unnaturalness_map(m, grids[m.layer_name], symmetric=args.symmetric)).item()
        for m in models
    }
    total = vlm.image_unnaturalness(per_layer, lambdas).item()
    for name in sorted(per_layer):
        print(f"{name},{per_layer[name]:.10g}")
    print(f"image,{total:.10g}")
    IMAGES_PROCESSED_TOTAL.labels(command="score", status="ok").inc()
    log_event("score", {"image": image_path.name, "u": f"{total:.6g}"})
    return 0


def _unnaturalness_for(model: cnn.CnnModel, layer: vlm.VlmLayerModel, path: Path, mean: Optional[np.ndarray], post_relu: bool) -> np.ndarray:
    grids = cnn.forward(model, Tensor(_cnn_input(path, model, mean)), post_relu=post_relu)
    return vlm.unnaturalness_map(layer, grids[layer.layer_name]).values.numpy()


def cmd_saliency(args: argparse.Namespace, cfg: RunConfig) -> int:
    model = _load_cnn(cfg)
    layer = vlm.load_vlm(_require_file(args.model, "--model"))
    image_path = _require_file(args.image, "--image")
    out_png = Path(args.out)
    out_dir = _output_dir(str(out_png.parent))
    _check_layers([layer], model)

    h_img, w_img, _ = datasets.load_image(image_path).shape
    u = _unnaturalness_for(model, layer, image_path, _mean_image(args.mean_image, model), cfg.post_relu)
    sal = saliency.saliency_from_map(u, h_img, w_img, cfg.saliency.sigma_rel)
    datasets.write_gray16_png(out_png, sal)
    raw = out_png.with_suffix(".vlmt")
    container.write_tensor(raw, sal, {"image": image_path.name, "sigma_rel": cfg.saliency.sigma_rel})

    IMAGES_PROCESSED_TOTAL.labels(command="saliency", status="ok").inc()
    _write_run_files(
        out_dir,
        "saliency",
        cfg,
        [_artifact(out_png, out_dir), _artifact(raw, out_dir, shape=list(sal.shape))],
        [{"image": image_path.name, "sha256": datasets.sha256_file(image_path)}],
    )
    log_event("saliency", {"image": image_path.name, "out": out_png})
    return 0


def cmd_eval_auc(args: argparse.Namespace, cfg: RunConfig) -> int:
    model = _load_cnn(cfg)
    layer = vlm.load_vlm(_require_file(args.model, "--model"))
    root = _require_dir(args.dataset, "--dataset")
    out_csv = Path(args.out)
    out_dir = _output_dir(str(out_csv.parent))
    _check_layers([layer], model)
    mean = _mean_image(args.mean_image, model)
    sigmas = args.sigma or [cfg.saliency.sigma_rel]
    if any(s < 0 for s in sigmas):
        raise UsageError(f"--sigma values must be >= 0, got {sigmas}")

    images, fixations = datasets.load_fixation_dataset(root)
    ids = sorted(images)
    precision = T.current_precision()

    def one(image_id: str) -> Tuple[np.ndarray, Tuple[int, int]]:
        with T.precision(precision):
            shape = datasets.load_image(images[image_id]).shape[:2]
            return _unnaturalness_for(model, layer, images[image_id], mean, cfg.post_relu), shape

    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        maps = dict(zip(ids, pool.map(one, ids)))

    report = pd.DataFrame({"image_id": ids})
    summary = []
    for sigma in sigmas:
        def saliency_for(image_id: str, sigma: float = sigma) -> np.ndarray:
            u, (h, w) = maps[image_id]
            return saliency.saliency_from_map(u, h, w, sigma)

        results = saliency.evaluate_dataset(saliency_for, fixations, cfg.saliency.negative_cap, cfg.seed, jobs=cfg.jobs)
        column = "shuffled_auc" if len(sigmas) == 1 else f"shuffled_auc@{sigma:g}"
        report[column] = [score for _, score in results]
        summary.append(("mean" if len(sigmas) == 1 else f"mean@{sigma:g}", saliency.summarize(results)["mean"]))
        logger.info("[eval] sigma=%g mean_auc=%.4f", sigma, summary[-1][1])

    text = report.to_csv(index=False, lineterminator="\n", float_format="%.6f")
    text += "".join(f"{name},{value:.6f}\n" for name, value in summary)
    out_csv.write_text(text, encoding="utf-8")

    sources = [{"image": images[i].name, "sha256": datasets.sha256_file(images[i])} for i in ids]
    _write_run_files(out_dir, "eval-auc", cfg, [_artifact(out_csv, out_dir)], sources)
    log_event("eval_auc", {"images": len(ids), "sigmas": ",".join(f"{s:g}" for s in sigmas), "out": out_csv})
    return 0


def cmd_reconstruct(args: argparse.Namespace, cfg: RunConfig) -> int:
    model = _load_cnn(cfg)
    model_paths = [_require_file(p, "--models") for p in (args.models if args.models is not None else cfg.vlm_models)]
    target_image = _require_file(args.target_image, "--target-image") if args.target_image else None
    target_tensor = _require_file(args.target_tensor, "--target-tensor") if args.target_tensor else None
    init_path = _require_file(args.init_image, "--init-image") if args.init_image else None
    rgb_dir = _require_dir(args.rgb_corpus, "--rgb-corpus") if args.rgb_corpus else None
    out = _output_dir(cfg.output_dir)

    models = [vlm.load_vlm(p) for p in model_paths]
    _check_layers(models, model)
    mean = _mean_image(args.mean_image, model)
    rcfg = cfg.reconstruct
    if init_path is not None:
        rcfg = rcfg.model_copy(update={"init": "from_image", "init_image": str(init_path)})
    tap = rcfg.target_layer or model.spec.taps[-1]
    if tap not in model.spec.taps:
        raise UsageError(f"--target-layer {tap!r} is not a tap of the CNN ({model.spec.taps})")

    h, w, _ = model.input_size
    sources: List[Dict[str, Any]] = []
    raw_target = None
    if target_image is not None:
        raw_target = datasets.load_image(target_image, size=(h, w))
        x = raw_target - mean if mean is not None else raw_target
        target = cnn.forward(model, Tensor(x), post_relu=cfg.post_relu)[tap].values.numpy()
        sources.append({"target_image": target_image.name, "sha256": datasets.sha256_file(target_image)})
    else:
        target, _ = container.read_tensor(target_tensor)
        sources.append({"target_tensor": target_tensor.name, "sha256": datasets.sha256_file(target_tensor)})

    init_image = None
    stats = None
    if rcfg.init == "from_image":
        if not rcfg.init_image:
            raise UsageError("init=from_image needs --init-image")
        init_image = _cnn_input(_require_file(rcfg.init_image, "--init-image"), model, mean)
    elif rgb_dir is not None:
        stats = reconstruct.fit_rgb_stats(datasets.load_image(p, size=(h, w)) for p in datasets.list_images(rgb_dir))
    elif raw_target is not None:
        logger.info("[reconstruct] no --rgb-corpus, using the target image's own RGB statistics")
        stats = reconstruct.fit_rgb_stats([raw_target])
    else:
        raise UsageError("Gaussian init from a target tensor needs --rgb-corpus")
    if stats is not None and mean is not None:
        stats = reconstruct.RgbStats(mean=stats.mean - mean.reshape(-1, 3).mean(axis=0), std=stats.std)

    result = reconstruct.reconstruct(
        target, model, models, rcfg, init_image=init_image, rgb_stats=stats, post_relu=cfg.post_relu, log_every=config.LOG_EVERY
    )
    image = result.image + mean if mean is not None else result.image
    png, raw, csv = out / "reconstruction.png", out / "reconstruction.vlmt", out / "history.csv"
    datasets.write_rgb_png(png, image)
    reconstruct.write_raw(raw, image, {"best_iteration": result.best_iteration, "target_layer": tap})
    reconstruct.write_history(csv, result.history)

    _write_run_files(
        out,
        "reconstruct",
        cfg.model_copy(update={"reconstruct": rcfg}),
        [_artifact(png, out), _artifact(raw, out, shape=list(image.shape)), _artifact(csv, out)],
        sources,
    )
    log_event(
        "reconstruct",
        {"best_iteration": result.best_iteration, "objective": f"{result.history[result.best_iteration]['objective']:.6g}", "out": out},
    )
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "train-vlm": cmd_train_vlm,
    "score": cmd_score,
    "saliency": cmd_saliency,
    "eval-auc": cmd_eval_auc,
    "reconstruct": cmd_reconstruct,
}


# -------------------------------------------------------------------
# Config resolution
# -------------------------------------------------------------------

def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    o: Dict[str, Any] = {
        "seed": get("seed"),
        "precision": get("precision"),
        "jobs": get("jobs"),
        "cnn": get("cnn"),
        "subtract_mean": get("subtract_mean"),
        "post_relu": get("post_relu"),
    }
    if args.command in ("extract", "reconstruct"):
        o["output_dir"] = get("out")
    if args.command == "reconstruct":
        o.update(
            {
                "reconstruct.lambda_r": get("lambda_r"),
                "reconstruct.lr": get("lr"),
                "reconstruct.momentum": get("momentum"),
                "reconstruct.iters": get("iters"),
                "reconstruct.target_layer": get("target_layer"),
                "reconstruct.lambdas": parse_lambdas(get("lambdas")) or None,
            }
        )
    if args.command == "train-vlm":
        o.update(
            {
                "train.lr": get("lr"),
                "train.momentum": get("momentum"),
                "train.batch": get("batch"),
                "train.max_iters": get("iters"),
                "train.clip_norm": get("clip_norm"),
                "train.objective": get("objective"),
                "train.cell": get("cell"),
                "train.whiten": get("whiten"),
            }
        )
    if args.command in ("saliency", "eval-auc") and get("sigma") is not None:
        sigma = get("sigma")
        o["saliency.sigma_rel"] = sigma[0] if isinstance(sigma, list) else sigma
    if args.command == "eval-auc":
        o["saliency.negative_cap"] = get("negative_cap")
    return o


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """CLI flag > config file > built-in default."""
    base = RunConfig.load(args.config)
    explicit = base.explicit_seeds()
    if getattr(args, "preset", None):
        preset = TrainHyperParams.preset(args.preset, seed=base.train.seed, log_every=base.train.log_every)
        base = base.model_copy(update={"train": preset})
    return base.merged(_overrides(args)).with_derived_seeds(explicit)


# -------------------------------------------------------------------
# Entry point
# -------------------------------------------------------------------

def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    metrics_out = None
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:  # --help
            return int(e.code or 0)
        configure_logging(args.log_level)
        metrics_out = args.metrics_out
        cfg = resolve_config(args)
        T.set_default_precision(cfg.precision)
        logger.info("[cli] command=%s seed=%d precision=%s jobs=%d", args.command, cfg.seed, cfg.precision, cfg.jobs)
        return COMMANDS[args.command](args, cfg)
    except VlmError as e:
        configure_logging()
        logger.error("[cli] %s: %s", type(e).__name__, e.detail)
        return e.exit_code
    except Exception:
        configure_logging()
        logger.exception("[cli] unexpected failure")
        return 2
    finally:
        if metrics_out:
            metrics.dump(metrics_out)


if __name__ == "__main__":
    sys.exit(main())
