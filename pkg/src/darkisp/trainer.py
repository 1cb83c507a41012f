"""End-to-end optimization: forward, proxy task loss, gated Self-Boost term,
SGD with momentum and weight decay, checkpointing and per-epoch diagnostics."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import DarkIspError, ManifestError, NonFiniteLoss, ShapeMismatch
from .linear_isp import LinearParams
from .model import DarkISP, ModelConfig, dump_json, load_json
from .nonlinear_isp import BasisFamily
from .raw_io import BayerImage, RgbImage, load_bayer, load_rgb
from .self_boost import (
    DEFAULT_KAPPA_THRESHOLD,
    DEFAULT_RTOL,
    compound_loss,
    diagnostics,
    pseudo_target_tensor,
    sb_loss,
    solve_pseudo_target,
    zero_rows,
)
from .tensor import Tensor, params_digest, params_from_json, params_to_json

log = logging.getLogger(__name__)

DECAY_EXEMPT = ("linear.wb_gains", "linear.ccm")
LOG_COLUMNS = ("epoch", "l_task", "l_sb", "total", "kappa_mean", "residual_mean", "residual_grad_norm")


@dataclass
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 15
    lam: float = 1e-2
    warmup: int = 10
    sb_flow_through: bool = False
    batch: int = 1
    seed: int = 0
    proxy: str = "reconstruction"
    kappa_threshold: float = DEFAULT_KAPPA_THRESHOLD
    rtol: float = DEFAULT_RTOL
    basis_file: str | None = None
    skip_mode: bool = True
    feat_width: int = 16
    attn_dim: int = 16

    def __post_init__(self):
        if not 0 <= self.warmup <= self.epochs:
            raise ValueError(f"need 0 <= warmup <= epochs, got warmup={self.warmup}, epochs={self.epochs}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.proxy != "reconstruction":
            raise ValueError(f"unknown proxy loss {self.proxy!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig field(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def model_config(self) -> ModelConfig:
        family = BasisFamily.from_json(self.basis_file) if self.basis_file else BasisFamily.default()
        return ModelConfig(self.feat_width, self.attn_dim, 16, family.to_list(), self.skip_mode)


def proxy_loss(u: Tensor, reference) -> Tensor:
    """Mean squared error between U and the clean reference (stand-in for a detector loss)."""
    ref = reference.channels if isinstance(reference, RgbImage) else np.asarray(getattr(reference, "data", reference))
    if u.shape != ref.shape:
        raise ShapeMismatch(f"proxy_loss: U {u.shape} vs reference {ref.shape}")
    d = u - Tensor(ref)
    return T.mean(d * d)


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: dict[str, np.ndarray],
             cfg: TrainConfig, exempt=DECAY_EXEMPT):
    """v <- momentum v + g + wd p ; p <- p - lr v. ``exempt`` names skip weight decay."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.shape:
            raise ShapeMismatch(f"{name}: velocity {v.shape} vs parameter {p.shape}")
        if cfg.weight_decay and name not in exempt:
            g = g + cfg.weight_decay * p.data
        v = cfg.momentum * v + g
        state[name] = v
        p.data = p.data - cfg.lr * v
    return params, state


@dataclass
class Sample:
    raw: BayerImage
    reference: RgbImage
    name: str


def load_dataset(manifest_path) -> tuple[dict, list[Sample]]:
    path = Path(manifest_path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    pairs = manifest.get("pairs") if isinstance(manifest, dict) else None
    if not pairs:
        raise ManifestError(f"{path}: manifest has no pairs")
    samples = []
    for i, pair in enumerate(pairs):
        try:
            raw = load_bayer(path.parent / pair["raw"])
            ref = load_rgb(path.parent / pair["reference"])
        except KeyError as exc:
            raise ManifestError(f"{path}: pair {i} lacks field {exc}") from exc
        except DarkIspError as exc:
            raise ManifestError(f"{path}: pair {i}: {exc}") from exc
        if (raw.height, raw.width) != (ref.height, ref.width):
            raise ManifestError(f"{path}: pair {i} RAW and reference sizes differ")
        samples.append(Sample(raw, ref, pair["raw"]))
    return manifest, samples


@dataclass
class EpochLog:
    epoch: int
    l_task: float
    l_sb: float
    total: float
    kappa_mean: float
    residual_mean: float
    residual_grad_norm: float
    active: bool
    digest: str
    pooled: list
    group_grad_norms: dict = field(default_factory=dict)

    def csv_row(self) -> str:
        return ",".join([str(self.epoch)] + [repr(float(getattr(self, c))) for c in LOG_COLUMNS[1:]])


@dataclass
class Checkpoint:
    model: DarkISP
    epoch: int
    config_hash: str
    report: dict
    history: list[EpochLog] = field(default_factory=list, compare=False, repr=False)

    @property
    def params(self) -> dict[str, Tensor]:
        return self.model.params

    def to_json(self) -> dict:
        return {
            "params": params_to_json(self.model.params),
            "model": asdict(self.model.config),
            "epoch": self.epoch,
            "config_hash": self.config_hash,
            "report": self.report,
        }

    def save(self, path) -> None:
        dump_json(self.to_json(), path)

    @classmethod
    def from_json(cls, d: dict) -> "Checkpoint":
        try:
            model = DarkISP(params_from_json(d["params"]), ModelConfig(**d["model"]))
            return cls(model, int(d["epoch"]), str(d["config_hash"]), dict(d["report"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed checkpoint: {exc}") from exc

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_json(load_json(path))


def _mean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else float("nan")


def train(cfg: TrainConfig, dataset_manifest, out=None, log_path=None,
          task_loss: Callable[[Tensor, RgbImage], Tensor] = proxy_loss,
          on_epoch: Callable[[EpochLog], None] | None = None) -> Checkpoint:
    """Train the pipeline on a manifest and (optionally) write the checkpoint and CSV log."""
    _, samples = load_dataset(dataset_manifest)
    base = LinearParams.from_meta(samples[0].raw.meta)
    model = DarkISP.init(base, seed=cfg.seed, config=cfg.model_config())
    params = model.params
    groups = model.groups()
    state: dict[str, np.ndarray] = {}
    order_rng = np.random.default_rng(cfg.seed)
    history: list[EpochLog] = []
    report: dict = {}
    lines = [",".join(LOG_COLUMNS)]

    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(samples))
        stats: dict[str, list[float]] = {k: [] for k in LOG_COLUMNS[1:]}
        group_norms = {g: 0.0 for g in groups}
        active = False
        for b, start in enumerate(range(0, len(order), cfg.batch)):
            batch = [samples[i] for i in order[start:start + cfg.batch]]
            T.zero_grad(params)
            for s in batch:
                fwd = model.forward(s.raw)
                pooled = fwd.field.pooled()
                l_task = task_loss(fwd.u, s.reference)
                target = solve_pseudo_target(fwd.u.data, s.raw, cfg.kappa_threshold, cfg.rtol)
                p_tilde = pseudo_target_tensor(fwd.u, target) if cfg.sb_flow_through else Tensor(target.p_tilde)
                l_sb = sb_loss(pooled, p_tilde)
                rep = compound_loss(l_task, l_sb, cfg.lam, epoch, cfg.warmup)
                rep.zero_rows = tuple(zero_rows(pooled, target.p_tilde))
                active = rep.active
                total = float(rep.total.data)
                if not math.isfinite(total):
                    raise NonFiniteLoss(epoch, b, total)
                scaled = rep.total if len(batch) == 1 else rep.total * (1.0 / len(batch))
                scaled.backward()
                diag = diagnostics(fwd.u, s.raw, pooled)
                stats["l_task"].append(float(l_task.data))
                stats["l_sb"].append(float(l_sb.data))
                stats["total"].append(total)
                stats["kappa_mean"].append(target.kappa)
                stats["residual_mean"].append(diag.residual_mean)
                stats["residual_grad_norm"].append(diag.residual_grad_norm)
                report = {**rep.as_floats(), "zero_rows": list(rep.zero_rows)}
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            for g, names in groups.items():
                norm = math.sqrt(sum(float((grads[n] ** 2).sum()) for n in names if n in grads))
                group_norms[g] = max(group_norms[g], norm)
            sgd_step(params, grads, state, cfg)

        entry = EpochLog(epoch, *(_mean(stats[c]) for c in LOG_COLUMNS[1:]), active=active,
                         digest=params_digest(params), pooled=pooled.data.tolist(), group_grad_norms=group_norms)
        history.append(entry)
        lines.append(entry.csv_row())
        log.info("epoch %d: %s", epoch, entry.csv_row())
        if on_epoch is not None:
            on_epoch(entry)

    T.zero_grad(params)
    ckpt = Checkpoint(model, cfg.epochs, cfg.digest(), report, history)
    if out is not None:
        ckpt.save(out)
        if log_path is None:
            log_path = Path(str(out) + ".log.csv")
    if log_path is not None:
        Path(log_path).write_text("\n".join(lines) + "\n")
    return ckpt


def psnr(u: np.ndarray, ref: np.ndarray) -> float:
    mse = float(np.mean((u - ref) ** 2))
    return float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)


def evaluate_model(model: DarkISP, samples: list[Sample], kappa_threshold: float = DEFAULT_KAPPA_THRESHOLD,
                   rtol: float = DEFAULT_RTOL) -> dict:
    psnrs, residuals, kappas, mses = [], [], [], []
    for s in samples:
        fwd = model.forward(s.raw)
        u = fwd.u.data
        psnrs.append(psnr(u, s.reference.channels))
        mses.append(float(np.mean((u - s.reference.channels) ** 2)))
        residuals.append(diagnostics(u, s.raw, fwd.field.pooled()).residual_mean)
        kappas.append(solve_pseudo_target(u, s.raw, kappa_threshold, rtol).kappa)
    return {
        "psnr": float(np.mean(psnrs)),
        "mse": _mean(mses),
        "residual_mean": _mean(residuals),
        "kappa_mean": float(np.mean(kappas)),
        "count": len(samples),
    }


def evaluate(checkpoint, dataset_manifest) -> dict:
    """Mean PSNR of U against the references, mean |U - P'I| and mean Gram condition number."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
    _, samples = load_dataset(dataset_manifest)
    return evaluate_model(ckpt.model, samples)
