"""The full trainable pipeline: RAW -> linear stage -> tone stretch."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import IoFailure, ManifestError
from .linear_isp import DynamicLinearField, LinearParams, compose, init_linear_params, linear_forward
from .nonlinear_isp import BasisFamily, apply_nonlinear, init_coeff_params, predict_coefficients
from .raw_io import BayerImage
from .tensor import Tensor, params_from_json, params_to_json


@dataclass
class ModelConfig:
    feat_width: int = 16
    attn_dim: int = 16
    coeff_width: int = 16
    basis: list = field(default_factory=lambda: BasisFamily.default().to_list())
    skip_mode: bool = True

    @property
    def family(self) -> BasisFamily:
        return BasisFamily(np.array(self.basis), self.skip_mode)


@dataclass
class ForwardResult:
    i_prime: Tensor
    u: Tensor
    field: DynamicLinearField
    coeffs: Tensor


class DarkISP:
    """Parameter container plus forward pass. Parameters are named as in the checkpoint."""

    def __init__(self, params: dict[str, Tensor], config: ModelConfig | None = None):
        self.params = params
        self.config = config or ModelConfig()
        self.family = self.config.family

    @classmethod
    def init(cls, base: LinearParams, seed: int = 0, config: ModelConfig | None = None) -> "DarkISP":
        config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        params = init_linear_params(rng, base, config.feat_width, config.attn_dim)
        params.update(init_coeff_params(rng, len(config.basis) - 1, config.coeff_width))
        return cls(params, config)

    def forward(self, img) -> ForwardResult:
        x = img if isinstance(img, Tensor) else Tensor(img.planes if isinstance(img, BayerImage) else img)
        i_prime, fld = linear_forward(x, self.params)
        coeffs = predict_coefficients(i_prime, self.params)
        u = apply_nonlinear(i_prime, coeffs, self.family)
        return ForwardResult(i_prime, u, fld, coeffs)

    def base_matrix(self) -> np.ndarray:
        return compose(LinearParams(self.params["linear.wb_gains"].data, self.params["linear.ccm"].data))

    def groups(self) -> dict[str, list[str]]:
        """Parameter names grouped by sub-network (used for gradient-flow logging)."""
        out: dict[str, list[str]] = {}
        for name in self.params:
            key = ".".join(name.split(".")[:2])
            out.setdefault(key, []).append(name)
        return out

    def to_json(self) -> dict:
        return {"model": asdict(self.config), "params": params_to_json(self.params)}

    @classmethod
    def from_json(cls, d: dict) -> "DarkISP":
        try:
            config = ModelConfig(**d["model"])
            params = params_from_json(d["params"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed checkpoint: {exc}") from exc
        return cls(params, config)


def dump_json(obj, path) -> None:
    try:
        Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise IoFailure(f"no such file: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def freeze(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Copy of the parameters with gradients disabled (inference snapshot)."""
    return {k: Tensor(v.data) for k, v in params.items()}

