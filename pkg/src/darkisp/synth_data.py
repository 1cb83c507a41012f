"""Synthetic dark RAW data with known camera parameters.

Clean RGB -> inverse tone curve -> inverse CCM -> green duplication ->
inverse white balance gives a clean Bayer frame whose forward camera matrix
is known exactly; exposure reduction and Poisson/Gaussian/row noise then turn
it into a low-light capture.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import EmptySource, IoFailure, SingularCCM
from .linear_isp import LinearParams, compose
from .raw_io import (
    BayerImage,
    RgbImage,
    SensorMeta,
    is_image_file,
    load_rgb,
    save_bayer,
    save_rgb,
    tile_rows,
    unpack_cfa,
)

# Diagonally dominant with non-positive off-diagonals and unit row sums, so its
# inverse is non-negative and keeps [0, 1] RGB inside [0, 1].
DEFAULT_GT_CCM = ((1.7, -0.5, -0.2), (-0.3, 1.6, -0.3), (0.0, -0.6, 1.6))
DEFAULT_GT_GAINS = (1.8, 1.0, 1.5, 1.0)


@dataclass
class NoiseParams:
    shot_scale: float = 0.0
    read_sigma: float = 0.0
    row_sigma: float = 0.0
    quantize_bits: int | None = None

    def __post_init__(self):
        if min(self.shot_scale, self.read_sigma, self.row_sigma) < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.quantize_bits is not None and self.quantize_bits not in (10, 12, 14):
            raise ValueError(f"quantize_bits must be 10, 12 or 14, got {self.quantize_bits}")


@dataclass
class SynthConfig:
    ground_truth: LinearParams = field(default_factory=lambda: LinearParams(DEFAULT_GT_GAINS, DEFAULT_GT_CCM))
    gamma: float = 2.2
    exposure_ratio: float = 1.0
    noise: NoiseParams = field(default_factory=NoiseParams)
    count: int = 8
    size: tuple[int, int] = (64, 64)
    seed: int = 0
    # calibration written to the RAW sidecars: "identity" (unknown camera) or "ground_truth"
    meta_calibration: str = "identity"
    cfa_pattern: str = "RGGB"

    def __post_init__(self):
        if not 0 < self.exposure_ratio <= 1:
            raise ValueError(f"exposure_ratio must be in (0, 1], got {self.exposure_ratio}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.meta_calibration not in ("identity", "ground_truth"):
            raise ValueError(f"meta_calibration must be 'identity' or 'ground_truth', got {self.meta_calibration!r}")
        self.size = (int(self.size[0]), int(self.size[1]))

    def ground_truth_dict(self) -> dict:
        return {**self.ground_truth.to_dict(), "gamma": self.gamma}

    def to_dict(self) -> dict:
        return {
            "ground_truth": self.ground_truth_dict(),
            "exposure_ratio": self.exposure_ratio,
            "noise": asdict(self.noise),
            "count": self.count,
            "size": list(self.size),
            "seed": self.seed,
            "meta_calibration": self.meta_calibration,
            "cfa_pattern": self.cfa_pattern,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        gt = d.get("ground_truth", {})
        kwargs = {k: d[k] for k in ("exposure_ratio", "count", "seed", "meta_calibration", "cfa_pattern") if k in d}
        if "size" in d:
            kwargs["size"] = tuple(d["size"])
        if "noise" in d:
            kwargs["noise"] = NoiseParams(**d["noise"])
        return cls(
            ground_truth=LinearParams(gt.get("wb_gains", DEFAULT_GT_GAINS), gt.get("ccm", DEFAULT_GT_CCM)),
            gamma=float(gt.get("gamma", 2.2)),
            **kwargs,
        )


def inverse_isp(rgb: RgbImage, cfg: SynthConfig) -> BayerImage:
    """Undo display gamma, CCM, binning (duplicating G) and white balance."""
    gt = cfg.ground_truth
    try:
        ccm_inv = np.linalg.inv(gt.ccm)
    except np.linalg.LinAlgError as exc:
        raise SingularCCM(f"ground-truth CCM is singular: {gt.ccm.tolist()}") from exc
    if not np.all(np.isfinite(ccm_inv)) or abs(np.linalg.det(gt.ccm)) < 1e-12:
        raise SingularCCM(f"ground-truth CCM is singular: {gt.ccm.tolist()}")
    linear = np.power(np.clip(rgb.channels, 0.0, None), cfg.gamma)
    cam = np.einsum("rc,chw->rhw", ccm_inv, linear)
    planes = np.stack([cam[0], cam[1], cam[2], cam[1]]) / gt.wb_gains[:, None, None]
    return BayerImage(planes, sensor_meta(cfg))


def sensor_meta(cfg: SynthConfig) -> SensorMeta:
    if cfg.meta_calibration == "ground_truth":
        gains, ccm = tuple(cfg.ground_truth.wb_gains), tuple(map(tuple, cfg.ground_truth.ccm))
        return SensorMeta(0.0, 1.0, cfg.cfa_pattern, gains, ccm, cfg.exposure_ratio)
    return SensorMeta(cfa_pattern=cfg.cfa_pattern, exposure_ratio=cfg.exposure_ratio)


def darken(img: BayerImage, ratio: float) -> BayerImage:
    return BayerImage(img.planes * ratio, img.meta)


def inject_noise(img: BayerImage, p: NoiseParams, seed: int) -> BayerImage:
    """Poisson shot + Gaussian read + per-sensor-row Gaussian offset, then optional quantization.

    Output is clamped to [0, 1.5] to leave headroom above white.
    """
    rng = np.random.default_rng(seed)
    v = img.planes.copy()
    _, h, w = v.shape
    if p.shot_scale > 0:
        v = rng.poisson(np.clip(v, 0.0, None) * p.shot_scale) / p.shot_scale
    if p.read_sigma > 0:
        v = v + rng.normal(0.0, p.read_sigma, size=v.shape)
    if p.row_sigma > 0:
        # one offset per mosaic row; each 2x2 tile spans two sensor rows
        offsets = rng.normal(0.0, p.row_sigma, size=(2, h))
        top, bottom = tile_rows(img.meta.cfa_pattern)
        for planes, row in ((top, offsets[0]), (bottom, offsets[1])):
            for c in planes:
                v[c] += row[:, None]
    if p.quantize_bits is not None:
        levels = 2**p.quantize_bits - 1
        v = np.round(np.clip(v, 0.0, None) * levels) / levels
    return BayerImage(np.clip(v, 0.0, 1.5), img.meta)


def mosaic(img: BayerImage) -> np.ndarray:
    """Re-interleave the planes into a 2H x 2W CFA mosaic."""
    return unpack_cfa(img)


# -- procedural test cards ---------------------------------------------------

# sRGB 8-bit values of the classic 24-patch colour checker
CHECKER = np.array([
    (115, 82, 68), (194, 150, 130), (98, 122, 157), (87, 108, 67), (133, 128, 177), (103, 189, 170),
    (214, 126, 44), (80, 91, 166), (193, 90, 99), (94, 60, 108), (157, 188, 64), (224, 163, 46),
    (56, 61, 150), (70, 148, 73), (175, 54, 60), (231, 199, 31), (187, 86, 149), (8, 133, 161),
    (243, 243, 242), (200, 200, 200), (160, 160, 160), (122, 122, 121), (85, 85, 85), (52, 52, 52),
]) / 255.0

CARD_KINDS = ("gradient", "checker", "texture")


def make_test_card(kind: str, size: tuple[int, int], seed: int) -> RgbImage:
    h, w = size
    rng = np.random.default_rng(seed)
    if kind == "gradient":
        yy, xx = np.mgrid[0:h, 0:w] / np.array([max(h - 1, 1), max(w - 1, 1)])[:, None, None]
        phase = rng.uniform(0, 2 * np.pi, 3)
        img = np.stack([
            0.5 + 0.45 * np.sin(2 * np.pi * (xx * (c + 1) * 0.5 + yy * 0.7) + phase[c]) for c in range(3)
        ])
        img *= (0.3 + 0.7 * xx)[None]
    elif kind == "checker":
        order = rng.permutation(len(CHECKER))
        rows, cols = 4, 6
        ys = (np.arange(h) * rows) // h
        xs = (np.arange(w) * cols) // w
        patch = order[(ys[:, None] * cols + xs[None, :]) % len(CHECKER)]
        img = CHECKER[patch].transpose(2, 0, 1)
    elif kind == "texture":
        noise = rng.uniform(0, 1, size=(3, h, w))
        img = np.stack([ndimage.gaussian_filter(noise[c], sigma=2.0, mode="wrap") for c in range(3)])
        img = (img - img.min()) / max(img.max() - img.min(), 1e-12)
        img = 0.05 + 0.9 * img
    else:
        raise ValueError(f"unknown test card {kind!r}")
    return RgbImage(np.clip(img, 0.0, 1.0))


def resize(rgb: RgbImage, size: tuple[int, int]) -> RgbImage:
    h, w = size
    if (rgb.height, rgb.width) == (h, w):
        return rgb
    zoom = (1.0, h / rgb.height, w / rgb.width)
    out = ndimage.zoom(rgb.channels, zoom, order=1, mode="nearest", grid_mode=True)
    return RgbImage(np.clip(out[:, :h, :w], 0.0, 1.0))


def _sources(source_dir, cfg: SynthConfig) -> list[RgbImage]:
    if source_dir is None:
        return [make_test_card(CARD_KINDS[i % len(CARD_KINDS)], cfg.size, cfg.seed ^ i) for i in range(cfg.count)]
    d = Path(source_dir)
    if not d.is_dir():
        raise EmptySource(f"source directory {d} does not exist")
    files = sorted(p for p in d.iterdir() if is_image_file(p))
    if not files:
        raise EmptySource(f"no .pfm/.ppm images in {d}")
    return [resize(load_rgb(files[i % len(files)]), cfg.size) for i in range(cfg.count)]


def synthesize(rgb: RgbImage, cfg: SynthConfig, seed: int) -> BayerImage:
    clean = inverse_isp(rgb, cfg)
    return inject_noise(darken(clean, cfg.exposure_ratio), cfg.noise, seed)


def generate_dataset(cfg: SynthConfig, source_dir, out_dir) -> dict:
    """Write paired (dark noisy RAW, clean reference) files plus ``manifest.json``.

    ``source_dir=None`` uses procedurally generated test cards.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    pairs = []
    for i, rgb in enumerate(_sources(source_dir, cfg)):
        seed = cfg.seed ^ i
        # stored references are float32; synthesize from the same quantized values
        rgb = RgbImage(rgb.channels.astype(np.float32).astype(np.float64))
        raw_name, ref_name = f"raw_{i:04d}.draw", f"ref_{i:04d}.pfm"
        save_bayer(synthesize(rgb, cfg, seed), out / raw_name)
        save_rgb(rgb, out / ref_name, "float")
        pairs.append({"raw": raw_name, "reference": ref_name, "seed": seed})
    manifest = {
        "ground_truth": cfg.ground_truth_dict(),
        "exposure_ratio": cfg.exposure_ratio,
        "noise": asdict(cfg.noise),
        "pairs": pairs,
    }
    try:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest: {exc}") from exc
    return manifest


def ground_truth_matrix(manifest: dict) -> np.ndarray:
    gt = manifest["ground_truth"]
    return compose(LinearParams(gt["wb_gains"], gt["ccm"]))
