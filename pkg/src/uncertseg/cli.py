"""Command-line pipeline: generate -> train -> predict -> evaluate.

Exit codes: 0 success, 2 usage or input errors (bad flags, bad config keys,
missing/unreadable/unwritable files, malformed containers), 1 internal or
numeric failures. Every effective setting is printed at startup; a flat
``key=value`` config file can supply settings, with command-line flags
taking precedence. Parallel per-volume prediction is opt-in via
``--threads`` (or the UNCERTSEG_THREADS environment variable) and does not
change results: each volume draws from its own derived stream.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import report as report_mod
from .dataset import Dataset, GeneratorParams, generate_dataset
from .inference import normalize_uncertainty, predict_stack
from .metrics import VolumePrediction, disruption_auc, evaluate, pr_auc
from .model import Network, load_checkpoint
from .postprocess import otsu_threshold
from .rng import RngState
from .tensorio import export_pgm, load_tensor, save_tensor
from .train import TrainConfig, train

PREDICTIONS_MANIFEST = "predictions.txt"
_PREDICTIONS_FORMAT = "uncertseg-predictions v1"
DEFAULT_SWEEP = (1, 2, 5, 10, 20, 50)


class UserError(Exception):
    """Invalid usage or input; reported with exit code 2."""


_DEFAULTS: dict[str, dict[str, object]] = {
    "generate": {
        "out": None,
        "volumes": 60,
        "seed": 0,
        "geometry": "128x128",
        "bscans": 49,
        "disruption_rate": 0.08,
        "shadow_rate": 0.10,
        "noise_level": 0.30,
        "shadows_disrupt": False,
    },
    "train": {
        "dataset": None,
        "out": None,
        "arch": "u2net",
        "seed": 0,
        "lr": 1e-4,
        "batch_size": 2,
        "weight_decay": 5e-4,
        "epochs": 160,
        "noise_samples": 10,
        "base_channels": 64,
    },
    "predict": {
        "checkpoint": None,
        "dataset": None,
        "out": None,
        "split": "testA",
        "volume": None,
        "T": 10,
        "seed": 0,
        "threads": 0,
    },
    "evaluate": {
        "predictions": None,
        "checkpoint": None,
        "dataset": None,
        "out": None,
        "split": "testA",
        "sweep_T": None,
        "seed": 0,
        "threads": 0,
    },
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uncertseg",
        description="Segmentation with MC-dropout uncertainty on synthetic B-scan volumes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--out", help="output dataset directory")
    g.add_argument("--volumes", type=int, help="total volume count (default 60)")
    g.add_argument("--seed", type=int)
    g.add_argument("--geometry", help="B-scan size as HxW, e.g. 128x128 or 496x512")
    g.add_argument("--bscans", type=int, help="B-scans per volume (default 49)")
    g.add_argument("--disruption-rate", dest="disruption_rate", type=float)
    g.add_argument("--shadow-rate", dest="shadow_rate", type=float)
    g.add_argument("--noise-level", dest="noise_level", type=float)
    g.add_argument(
        "--shadows-disrupt",
        dest="shadows_disrupt",
        action="store_const",
        const=True,
        help="count shadowed columns as disruptions in the ground truth",
    )

    t = sub.add_parser("train", help="train a network on a generated dataset")
    t.add_argument("--dataset", help="dataset directory")
    t.add_argument("--out", help="output directory for checkpoints and history")
    t.add_argument("--arch", choices=["unet", "u2net", "bunet"])
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--noise-samples", dest="noise_samples", type=int)
    t.add_argument("--base-channels", dest="base_channels", type=int)

    p = sub.add_parser("predict", help="MC-dropout prediction maps for a split or volume")
    p.add_argument("--checkpoint", help="checkpoint directory")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--out", help="output directory for maps")
    p.add_argument("--split", choices=["train", "val", "testA", "testB"])
    p.add_argument("--volume", help="predict a single volume id instead of a split")
    p.add_argument("--T", dest="T", type=int, help="MC sample count")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="volumes processed in parallel (default 1)")

    e = sub.add_parser("evaluate", help="metrics report from predictions, or a T sweep")
    e.add_argument("--predictions", help="predictions directory from the predict step")
    e.add_argument("--checkpoint", help="checkpoint directory (T sweep mode)")
    e.add_argument("--dataset", help="dataset directory")
    e.add_argument("--out", help="output directory for the report files")
    e.add_argument("--split", choices=["train", "val", "testA", "testB"])
    e.add_argument("--sweep-T", dest="sweep_T", help="comma-separated sample counts, e.g. 1,2,5,10,20,50")
    e.add_argument("--seed", type=int)
    e.add_argument("--threads", type=int)

    for s in (g, t, p, e):
        s.add_argument("--config", help="flat key=value settings file (flags win)")
    return parser


def _load_config_file(path: str, allowed: dict[str, object]) -> dict[str, object]:
    cfg_path = Path(path)
    if not cfg_path.is_file():
        raise UserError(f"config file not found: {path}")
    values: dict[str, object] = {}
    for ln, line in enumerate(cfg_path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise UserError(f"{path}:{ln}: expected key=value, got {line!r}")
        key = key.strip()
        raw = raw.strip()
        if key not in allowed:
            raise UserError(f"{path}:{ln}: unknown config key {key!r}")
        default = allowed[key]
        if isinstance(default, bool):
            values[key] = raw.lower() in ("1", "true", "yes")
        elif isinstance(default, int):
            values[key] = int(raw)
        elif isinstance(default, float):
            values[key] = float(raw)
        else:
            values[key] = raw
    return values


def _effective_settings(args: argparse.Namespace) -> dict[str, object]:
    defaults = _DEFAULTS[args.command]
    settings = dict(defaults)
    if getattr(args, "config", None):
        settings.update(_load_config_file(args.config, defaults))
    for key in defaults:
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            settings[key] = cli_value
    for key, value in sorted(settings.items()):
        print(f"config: {key}={value}")
    return settings


def _threads(settings: dict[str, object]) -> int:
    n = int(settings.get("threads") or 0)
    if n <= 0:
        n = int(os.environ.get("UNCERTSEG_THREADS", "1") or "1")
    return max(1, n)


def _parse_geometry(text: str) -> tuple[int, int]:
    try:
        h, w = (int(x) for x in text.lower().split("x"))
    except ValueError as exc:
        raise UserError(f"bad geometry {text!r}, expected HxW like 128x128") from exc
    return h, w


def _require(settings: dict[str, object], *keys: str) -> None:
    for key in keys:
        if settings.get(key) in (None, ""):
            raise UserError(f"--{key.replace('_', '-')} is required")


def _open_dataset(settings: dict[str, object]) -> Dataset:
    try:
        return Dataset(str(settings["dataset"]))
    except FileNotFoundError as exc:
        raise UserError(str(exc)) from exc


def cmd_generate(settings: dict[str, object]) -> int:
    _require(settings, "out")
    h, w = _parse_geometry(str(settings["geometry"]))
    params = GeneratorParams(
        height=h,
        width=w,
        bscans=int(settings["bscans"]),
        disruption_rate=float(settings["disruption_rate"]),
        shadow_rate=float(settings["shadow_rate"]),
        noise_level=float(settings["noise_level"]),
        shadows_disrupt=bool(settings["shadows_disrupt"]),
    )
    manifest = generate_dataset(
        str(settings["out"]), int(settings["volumes"]), int(settings["seed"]), params
    )
    for split in ("train", "val", "testA", "testB"):
        print(f"{split}: {len(manifest.splits[split])} volumes")
    return 0


def _flatten_split(ds: Dataset, split: str):
    images = []
    masks = []
    for vol in ds.load_split(split):
        images.append(vol.bscans)
        masks.append(vol.masks)
    return np.concatenate(images), np.concatenate(masks)


def cmd_train(settings: dict[str, object]) -> int:
    _require(settings, "dataset", "out")
    ds = _open_dataset(settings)
    config = TrainConfig(
        arch=str(settings["arch"]),
        lr0=float(settings["lr"]),
        batch_size=int(settings["batch_size"]),
        weight_decay=float(settings["weight_decay"]),
        max_epochs=int(settings["epochs"]),
        seed=int(settings["seed"]),
        noise_samples=int(settings["noise_samples"]),
        base_channels=int(settings["base_channels"]),
    )
    train_data = _flatten_split(ds, "train")
    val_volumes = [(v.bscans, v.masks) for v in ds.load_split("val")]
    _, _, history = train(config, train_data, val_volumes, out_dir=str(settings["out"]), log=print)
    print(f"best epoch: {history.best_epoch} (val_dice={history.val_dice[history.best_epoch - 1]:.4f})")
    return 0


def _predict_volume(net: Network, volume, samples: int, rng: RngState, outdir: Path) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    mean, std = predict_stack(net, volume.bscans[:, None], samples, rng)
    for i in range(mean.shape[0]):
        stem = outdir / f"bscan{i:03d}"
        save_tensor(f"{stem}_prob.tnsr", mean[i])
        save_tensor(f"{stem}_std.tnsr", std[i])
        export_pgm(f"{stem}_uncertainty.pgm", normalize_uncertainty(std[i]))
        export_pgm(f"{stem}_mask.pgm", otsu_threshold(mean[i]).mask.astype(np.float32))


def cmd_predict(settings: dict[str, object]) -> int:
    _require(settings, "checkpoint", "dataset", "out")
    samples = int(settings["T"])
    if samples < 1:
        raise UserError("--T must be >= 1")
    try:
        net = load_checkpoint(str(settings["checkpoint"]))
    except FileNotFoundError as exc:
        raise UserError(str(exc)) from exc
    ds = _open_dataset(settings)
    if settings.get("volume"):
        volume_ids = [str(settings["volume"])]
        split = "volume"
    else:
        split = str(settings["split"])
        volume_ids = ds.volume_ids(split)
        if not volume_ids:
            raise UserError(f"split {split!r} has no volumes")
    out_root = Path(str(settings["out"]))
    out_root.mkdir(parents=True, exist_ok=True)
    seed = int(settings["seed"])

    def run(idx_vid):
        idx, vid = idx_vid
        volume = ds.load_volume(vid)
        rng = RngState(seed).derive((idx + 1) << 32)
        _predict_volume(net, volume, samples, rng, out_root / vid)
        return vid

    jobs = list(enumerate(volume_ids))
    n_threads = _threads(settings)
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            done = list(pool.map(run, jobs))
    else:
        done = [run(job) for job in jobs]
    lines = [
        f"format: {_PREDICTIONS_FORMAT}",
        f"checkpoint: {settings['checkpoint']}",
        f"dataset: {settings['dataset']}",
        f"split: {split}",
        f"samples: {samples}",
        f"seed: {seed}",
    ]
    lines += [f"volume: {vid} {ds.bscan_count}" for vid in done]
    (out_root / PREDICTIONS_MANIFEST).write_text("\n".join(lines) + "\n", encoding="ascii")
    print(f"predicted {len(done)} volumes at T={samples}")
    return 0


def _load_predictions(pred_dir: Path, ds: Dataset, split: str) -> list[VolumePrediction]:
    if not (pred_dir / PREDICTIONS_MANIFEST).is_file():
        raise UserError(f"no predictions manifest in {pred_dir}")
    predictions = []
    for vid in ds.volume_ids(split):
        vdir = pred_dir / vid
        probs = []
        stds = []
        for i in range(ds.bscan_count):
            prob_file = vdir / f"bscan{i:03d}_prob.tnsr"
            std_file = vdir / f"bscan{i:03d}_std.tnsr"
            if not prob_file.is_file() or not std_file.is_file():
                raise UserError(f"incomplete predictions for {vid}: missing B-scan {i}")
            probs.append(load_tensor(prob_file))
            stds.append(load_tensor(std_file))
        predictions.append(VolumePrediction(vid, np.stack(probs), np.stack(stds)))
    return predictions


def _sweep_rows(
    net: Network, ds: Dataset, split: str, sample_counts: list[int], seed: int, n_threads: int
) -> list[tuple[int, float, float]]:
    from .postprocess import disruption_labels, disruption_scores

    volumes = ds.load_split(split)
    if not volumes:
        raise UserError(f"split {split!r} has no volumes")
    rows = []
    for t in sample_counts:
        def run(idx_vol):
            idx, vol = idx_vol
            rng = RngState(seed ^ (t << 48)).derive((idx + 1) << 32)
            mean, _ = predict_stack(net, vol.bscans[:, None], t, rng)
            return mean

        jobs = list(enumerate(volumes))
        if n_threads > 1:
            with ThreadPoolExecutor(max_workers=n_threads) as pool:
                means = list(pool.map(run, jobs))
        else:
            means = [run(job) for job in jobs]
        scores = np.concatenate([m.ravel() for m in means]).astype(np.float64)
        labels = np.concatenate([v.masks.ravel() for v in volumes]).astype(np.int64)
        _, p_auc = pr_auc(scores, labels)
        pairs = []
        for mean, vol in zip(means, volumes):
            for prob, gt in zip(mean, vol.masks):
                pairs.append((disruption_scores(prob), disruption_labels(gt)))
        d_auc = disruption_auc(pairs)
        rows.append((t, p_auc, d_auc))
        print(f"T={t}: photoreceptor_auc={p_auc:.4f} disruption_auc={d_auc:.4f}")
    return rows


def cmd_evaluate(settings: dict[str, object]) -> int:
    _require(settings, "dataset", "out")
    ds = _open_dataset(settings)
    split = str(settings["split"])
    out_dir = Path(str(settings["out"]))
    out_dir.mkdir(parents=True, exist_ok=True)

    if settings.get("sweep_T"):
        _require(settings, "checkpoint")
        try:
            counts = [int(x) for x in str(settings["sweep_T"]).split(",") if x]
        except ValueError as exc:
            raise UserError(f"bad --sweep-T value {settings['sweep_T']!r}") from exc
        if not counts or min(counts) < 1:
            raise UserError("--sweep-T needs positive integers")
        try:
            net = load_checkpoint(str(settings["checkpoint"]))
        except FileNotFoundError as exc:
            raise UserError(str(exc)) from exc
        rows = _sweep_rows(net, ds, split, counts, int(settings["seed"]), _threads(settings))
        report_mod.write_sweep_csv(rows, out_dir / report_mod.SWEEP_FILE)
        print(f"wrote {out_dir / report_mod.SWEEP_FILE}")
        return 0

    _require(settings, "predictions")
    predictions = _load_predictions(Path(str(settings["predictions"])), ds, split)
    truths = [ds.load_volume(p.volume_id).masks for p in predictions]
    result = evaluate(predictions, truths)
    report_mod.write_report(result, out_dir / report_mod.REPORT_FILE)
    report_mod.write_per_volume_csv(result, out_dir / report_mod.PER_VOLUME_FILE)
    report_mod.write_scatter_svg(
        result.uncertainty_per_volume,
        result.dice_per_volume,
        result.fit,
        out_dir / report_mod.SCATTER_FILE,
    )
    print(
        f"dice={result.dice_mean:.4f}+/-{result.dice_std:.4f} "
        f"photoreceptor_auc={result.photoreceptor_auc:.4f} "
        f"disruption_auc={result.disruption_auc:.4f} "
        f"r_squared={result.fit.r_squared:.4f}"
    )
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        settings = _effective_settings(args)
        return _COMMANDS[args.command](settings)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # numeric/internal failures
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
