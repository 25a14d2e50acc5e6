"""Synthetic OCT-like volumes with exact ground truth, plus dataset IO.

Each volume is a stack of B-scans showing a bright horizontal band (the
segmentation target) over a textured background, with a fainter second band
as a distractor. Confounders: contiguous disrupted column runs where the
band is absent (recorded as ground truth), darkened vertical shadow stripes
that keep their mask, cyst-like dark blobs for the edema/occlusion disease
tags, and multiplicative speckle. Per-volume style draws (contrast, noise,
disruption density) make volumes unevenly difficult on purpose.

All randomness flows through ``RngState`` uniforms and integer draws only,
so a seed pins every generated byte across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import RngState
from .tensorio import load_tensor, save_tensor

DISEASES = ("DME", "RVO", "earlyAMD", "lateAMD-GA")
GA = "lateAMD-GA"
SPLITS = ("train", "val", "testA", "testB")

DEFAULT_COUNTS = {"train": 31, "val": 4, "testA": 15, "testB": 10}
DEFAULT_DISEASE_MIX = {"DME": 16, "RVO": 24, "earlyAMD": 10, GA: 10}

DATASET_MANIFEST = "manifest.txt"
PARAMS_LOG = "params.txt"
_DATASET_FORMAT = "uncertseg-dataset v1"


@dataclass(frozen=True)
class GeneratorParams:
    """Geometry and confounder levels for one volume."""

    height: int = 128
    width: int = 128
    bscans: int = 49
    thickness_range: tuple[float, float] = (0.06, 0.12)  # fraction of height
    disruption_rate: float = 0.08
    shadow_rate: float = 0.15
    noise_level: float = 0.45
    shadows_disrupt: bool = False  # count shadowed columns as disruptions
    disease_tag: str = "DME"

    def __post_init__(self):
        if self.height % 16 or self.width % 16:
            raise ValueError("geometry must be divisible by 16")
        if not 0.0 <= self.disruption_rate < 1.0:
            raise ValueError("disruption rate must be in [0, 1)")
        if not 0.0 <= self.shadow_rate < 1.0:
            raise ValueError("shadow rate must be in [0, 1)")
        if self.disease_tag not in DISEASES:
            raise ValueError(f"unknown disease tag {self.disease_tag!r}")


@dataclass
class Volume:
    volume_id: str
    disease: str
    bscans: np.ndarray  # (B, H, W) float32 in [0, 1]
    masks: np.ndarray  # (B, H, W) uint8
    disrupted_columns: np.ndarray  # (B, W) uint8


@dataclass
class SplitManifest:
    splits: dict[str, list[str]]
    diseases: dict[str, str]

    def split_of(self, volume_id: str) -> str:
        for name, ids in self.splits.items():
            if volume_id in ids:
                return name
        raise KeyError(volume_id)


def _smooth_curve(rng: RngState, length: int, knots: int, amplitude: float) -> np.ndarray:
    """Piecewise-linear random curve in [-amplitude, amplitude]."""
    values = (rng.uniform(knots + 1) * 2.0 - 1.0) * amplitude
    xs = np.linspace(0.0, length - 1.0, knots + 1)
    return np.interp(np.arange(length, dtype=np.float64), xs, values)


def _largest_remainder(quotas: np.ndarray, total: int) -> np.ndarray:
    """Round non-negative quotas to integers that sum to ``total``."""
    base = np.floor(quotas).astype(int)
    leftover = total - int(base.sum())
    if leftover > 0:
        order = np.argsort(-(quotas - base), kind="stable")
        base[order[:leftover]] += 1
    return base


def _place_runs(rng: RngState, width: int, target_cols: int, mean_len: float, cap: int) -> np.ndarray:
    """Boolean column vector with ``target_cols`` set in contiguous runs.

    Run lengths follow a truncated geometric; runs are separated by random
    gaps obtained from a largest-remainder allocation of the free columns.
    """
    flags = np.zeros(width, dtype=bool)
    target_cols = min(target_cols, width)
    if target_cols <= 0:
        return flags
    cont = max(0.0, 1.0 - 1.0 / mean_len)
    lengths = []
    remaining = target_cols
    while remaining > 0:
        run = min(rng.geometric_run(cont, cap), remaining)
        lengths.append(run)
        remaining -= run
    free = width - target_cols
    weights = rng.uniform(len(lengths) + 1) + 1e-9
    gaps = _largest_remainder(weights / weights.sum() * free, free)
    pos = 0
    for gap, run in zip(gaps, lengths):
        pos += int(gap)
        flags[pos : pos + run] = True
        pos += run
    return flags


def generate_volume(params: GeneratorParams, rng: RngState, volume_id: str = "vol") -> Volume:
    """Render one volume; bit-identical for a given (params, rng seed)."""
    h, w, nb = params.height, params.width, params.bscans
    disease = params.disease_tag

    # volume-level style draws (fixed order; do not reorder)
    band_intensity = 0.60 + 0.30 * rng.uniform(())
    bg_level = 0.06 + 0.06 * rng.uniform(())
    second_intensity = 0.28 + 0.14 * rng.uniform(())
    noise_scale = params.noise_level
    base_center = (0.50 + 0.15 * rng.uniform(())) * h
    t_lo, t_hi = params.thickness_range
    base_thickness = (t_lo + (t_hi - t_lo) * rng.uniform(())) * h
    # ambiguity style is coherent within a volume: some volumes are
    # consistently harder (bright disruption residue, dark shadows)
    vol_residue = 0.10 + 0.45 * rng.uniform(())
    vol_shadow = 0.28 + 0.22 * rng.uniform(())

    wobble = 1.0
    run_cap = max(2, w // 16)
    disruption_rate = params.disruption_rate
    if disease == GA:
        disruption_rate = min(disruption_rate * 2.2, 0.90)
        run_cap = max(4, w // 6)
    elif disease == "earlyAMD":
        wobble = 1.8
    n_cysts = {"DME": 3, "RVO": 2}.get(disease, 0)
    shadow_rate = params.shadow_rate

    rows = np.arange(h, dtype=np.float64)[:, None]
    images = np.empty((nb, h, w), dtype=np.float32)
    masks = np.empty((nb, h, w), dtype=np.uint8)
    disrupted = np.empty((nb, w), dtype=np.uint8)
    soft = max(1.0, 0.012 * h)

    for b in range(nb):
        center = base_center + _smooth_curve(rng, w, 6, 0.06 * h) + (rng.uniform(()) - 0.5) * 0.04 * h
        thickness = np.clip(
            base_thickness + _smooth_curve(rng, w, 8, 0.25 * wobble * base_thickness),
            2.0,
            0.2 * h,
        )
        half = thickness / 2.0

        dist = np.abs(rows - center[None, :])
        band = np.clip((half[None, :] + soft - dist) / soft, 0.0, 1.0)
        mask = (dist <= half[None, :]).astype(np.uint8)

        gap = 0.16 * h + _smooth_curve(rng, w, 4, 0.02 * h)
        dist2 = np.abs(rows - (center - gap)[None, :])
        half2 = 0.4 * half
        band2 = np.clip((half2[None, :] + soft - dist2) / soft, 0.0, 1.0)

        img = np.full((h, w), bg_level, dtype=np.float64)
        img += 0.03 * (rng.uniform((h, w)) * 2.0 - 1.0)
        img += band2 * second_intensity

        # disruptions: remove the band up to a residue glow whose brightness
        # overlaps the shadowed-band range, so the distinction needs context
        target = int(round(disruption_rate * w))
        dis = _place_runs(rng, w, target, mean_len=max(2.0, w * 0.015), cap=run_cap)
        residue = np.clip(vol_residue + 0.1 * (rng.uniform(()) - 0.5), 0.05, 0.6)
        band_scale = np.where(dis, residue, 1.0)
        mask[:, dis] = 0
        img += band * band_intensity * band_scale[None, :]

        # vessel shadows darken whole columns but leave the layer in place
        sh_target = int(round(shadow_rate * w))
        shadows = _place_runs(rng, w, sh_target, mean_len=2.5, cap=6)
        factor = np.clip(vol_shadow + 0.1 * (rng.uniform(()) - 0.5), 0.20, 0.60)
        img[:, shadows] *= factor
        if params.shadows_disrupt:
            mask[:, shadows] = 0
            dis = dis | shadows

        for _ in range(n_cysts):
            if rng.uniform(()) < 0.5:
                continue
            cy = (0.15 + 0.25 * rng.uniform(())) * h
            cx = rng.uniform(()) * w
            ry = (0.04 + 0.08 * rng.uniform(())) * h
            rx = (0.05 + 0.10 * rng.uniform(())) * w
            blob = ((rows - cy) / ry) ** 2 + ((np.arange(w, dtype=np.float64)[None, :] - cx) / rx) ** 2
            img *= 1.0 - 0.7 * np.clip(1.0 - blob, 0.0, 1.0)

        img *= 1.0 + noise_scale * (rng.uniform((h, w)) * 2.0 - 1.0)
        images[b] = np.clip(img, 0.0, 1.0).astype(np.float32)
        masks[b] = mask
        disrupted[b] = dis.astype(np.uint8)

    return Volume(volume_id, disease, images, masks, disrupted)


def make_splits(volumes: list[tuple[str, str]], counts: dict[str, int], rng: RngState) -> SplitManifest:
    """Stratified split assignment.

    ``volumes`` pairs (volume_id, disease). Every late-AMD volume goes to
    testB (their count must equal counts['testB']); the remaining diseases
    are spread over train/val/testA by per-disease largest-remainder quotas,
    which keeps each disease proportion within one volume of the global mix.
    """
    for split in SPLITS:
        if split not in counts:
            raise ValueError(f"missing count for split {split!r}")
    ga_ids = [vid for vid, d in volumes if d == GA]
    if len(ga_ids) != counts["testB"]:
        raise ValueError(
            f"need exactly {counts['testB']} {GA} volumes for testB, got {len(ga_ids)}"
        )
    by_disease: dict[str, list[str]] = {}
    for vid, d in volumes:
        if d != GA:
            by_disease.setdefault(d, []).append(vid)
    n_rest = sum(len(v) for v in by_disease.values())
    needed = counts["train"] + counts["val"] + counts["testA"]
    if n_rest != needed:
        raise ValueError(f"have {n_rest} non-{GA} volumes but splits need {needed}")

    splits: dict[str, list[str]] = {s: [] for s in SPLITS}
    splits["testB"] = sorted(ga_ids)
    alloc: dict[str, np.ndarray] = {}
    for disease in sorted(by_disease):
        ids = by_disease[disease]
        quotas = np.array(
            [counts[s] * len(ids) / n_rest for s in ("train", "val", "testA")], dtype=np.float64
        )
        alloc[disease] = _largest_remainder(quotas, len(ids))

    # repair rounding drift so split totals match the requested counts exactly;
    # moves touch only later splits, so already-fixed totals stay fixed
    for j, split in enumerate(("train", "val", "testA")):
        drift = sum(int(alloc[d][j]) for d in alloc) - counts[split]
        while drift != 0:
            step = -1 if drift > 0 else 1
            for k in range(j + 1, 3):
                cand = [d for d in sorted(alloc) if alloc[d][j] + step >= 0 and alloc[d][k] - step >= 0]
                if cand:
                    alloc[cand[0]][j] += step
                    alloc[cand[0]][k] -= step
                    drift += step
                    break
            else:
                raise ValueError("cannot satisfy split counts with given volumes")

    for disease in sorted(by_disease):
        ids = by_disease[disease]
        order = rng.permutation(len(ids))
        shuffled = [ids[i] for i in order]
        t, v, _ = (int(x) for x in alloc[disease])
        splits["train"].extend(shuffled[:t])
        splits["val"].extend(shuffled[t : t + v])
        splits["testA"].extend(shuffled[t + v :])

    diseases = dict(volumes)
    return SplitManifest(splits={s: sorted(ids) for s, ids in splits.items()}, diseases=diseases)


def scaled_counts(total: int) -> tuple[dict[str, int], dict[str, int]]:
    """Split counts and disease mix for ``total`` volumes, scaled from 60."""
    if total < 12:
        raise ValueError("need at least 12 volumes (one per split and disease)")
    split_names = ("train", "val", "testA", "testB")
    quotas = np.array([DEFAULT_COUNTS[s] * total / 60 for s in split_names])
    counts = dict(zip(split_names, (int(x) for x in _largest_remainder(quotas, total))))
    rest = total - counts["testB"]
    mix_names = ("DME", "RVO", "earlyAMD")
    quotas = np.array([DEFAULT_DISEASE_MIX[d] * rest / 50 for d in mix_names])
    mix = dict(zip(mix_names, (int(x) for x in _largest_remainder(quotas, rest))))
    mix[GA] = counts["testB"]
    return counts, mix


class Dataset:
    """An on-disk dataset directory: manifest, params log, per-volume tensors."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest_path = self.root / DATASET_MANIFEST
        if not manifest_path.is_file():
            raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
        fields: dict[str, str] = {}
        splits: dict[str, list[str]] = {s: [] for s in SPLITS}
        diseases: dict[str, str] = {}
        for line in manifest_path.read_text(encoding="ascii").splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition(": ")
            if key == "volume":
                vid, disease, split = value.split(" ")
                splits[split].append(vid)
                diseases[vid] = disease
            else:
                fields[key] = value
        if fields.get("format") != _DATASET_FORMAT:
            raise ValueError(f"unsupported dataset format {fields.get('format')!r}")
        self.manifest = SplitManifest(splits=splits, diseases=diseases)
        self.height, self.width = (int(x) for x in fields["geometry"].split("x"))
        self.bscan_count = int(fields["bscans"])
        self.seed = int(fields.get("seed", "0"))

    def volume_ids(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return list(self.manifest.splits[split])

    def load_volume(self, volume_id: str) -> Volume:
        vdir = self.root / "volumes" / volume_id
        if not vdir.is_dir():
            raise FileNotFoundError(f"volume directory {vdir} not found")
        return Volume(
            volume_id=volume_id,
            disease=self.manifest.diseases.get(volume_id, ""),
            bscans=load_tensor(vdir / "image.tnsr"),
            masks=load_tensor(vdir / "mask.tnsr").astype(np.uint8),
            disrupted_columns=load_tensor(vdir / "disrupted.tnsr").astype(np.uint8),
        )

    def load_split(self, split: str) -> list[Volume]:
        return [self.load_volume(vid) for vid in self.volume_ids(split)]


def write_dataset(
    outdir: str | Path,
    volumes: list[Volume],
    manifest: SplitManifest,
    params: GeneratorParams,
    seed: int,
) -> None:
    outdir = Path(outdir)
    (outdir / "volumes").mkdir(parents=True, exist_ok=True)
    lines = [
        f"format: {_DATASET_FORMAT}",
        f"geometry: {params.height}x{params.width}",
        f"bscans: {params.bscans}",
        f"seed: {seed}",
    ]
    for vol in sorted(volumes, key=lambda v: v.volume_id):
        lines.append(f"volume: {vol.volume_id} {vol.disease} {manifest.split_of(vol.volume_id)}")
        vdir = outdir / "volumes" / vol.volume_id
        vdir.mkdir(parents=True, exist_ok=True)
        save_tensor(vdir / "image.tnsr", vol.bscans)
        save_tensor(vdir / "mask.tnsr", vol.masks.astype(np.float32))
        save_tensor(vdir / "disrupted.tnsr", vol.disrupted_columns.astype(np.float32))
    (outdir / DATASET_MANIFEST).write_text("\n".join(lines) + "\n", encoding="ascii")
    plog = [
        f"{name}: {getattr(params, name)}"
        for name in (
            "height",
            "width",
            "bscans",
            "thickness_range",
            "disruption_rate",
            "shadow_rate",
            "noise_level",
            "shadows_disrupt",
        )
    ]
    (outdir / PARAMS_LOG).write_text("\n".join(plog) + "\n", encoding="ascii")


def _vary_difficulty(params: GeneratorParams, disease: str, rng: RngState) -> GeneratorParams:
    """Per-volume jitter of the confounder levels around the configured means.

    Volumes of one dataset are deliberately uneven in difficulty so that
    segmentation quality varies across volumes.
    """
    # disruption density and residue (drawn inside the generator) dominate
    # volume difficulty; shadow density is kept steadier so it adds texture
    # without decoupling uncertainty from segmentation quality
    return replace(
        params,
        disease_tag=disease,
        disruption_rate=min(params.disruption_rate * (0.2 + 1.6 * rng.uniform(())), 0.90),
        shadow_rate=min(params.shadow_rate * (0.8 + 0.4 * rng.uniform(())), 0.90),
        noise_level=params.noise_level * (0.5 + 1.0 * rng.uniform(())),
    )


def generate_dataset(
    outdir: str | Path,
    total_volumes: int,
    seed: int,
    params: GeneratorParams | None = None,
) -> SplitManifest:
    """Generate, split and write a full dataset; deterministic per seed."""
    params = params or GeneratorParams()
    counts, mix = scaled_counts(total_volumes)
    root = RngState(seed)
    difficulty_rng = root.derive(0xD1FF << 24)
    pairs: list[tuple[str, str]] = []
    volumes: list[Volume] = []
    index = 0
    for disease in DISEASES:
        for _ in range(mix[disease]):
            vid = f"vol{index:03d}"
            vol_params = _vary_difficulty(params, disease, difficulty_rng)
            volumes.append(generate_volume(vol_params, root.derive(index + 1), vid))
            pairs.append((vid, disease))
            index += 1
    manifest = make_splits(pairs, counts, root.derive(0x5B1175))
    write_dataset(outdir, volumes, manifest, params, seed)
    return manifest
