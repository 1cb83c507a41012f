"""Linear calibration stage: white balance, binning, colour correction and the
attention-driven per-pixel corrections on top of the composed 3x4 camera matrix."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ImageTooSmall, NonPositiveGain, ShapeMismatch
from .raw_io import BayerImage, RgbImage, SensorMeta
from .tensor import Tensor

BINNING = np.array(
    [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 0.5, 0.0, 0.5],
        [0.0, 0.0, 1.0, 0.0],
    ]
)

GLOBAL_STAGES = 4
N_TOKENS = 12


@dataclass
class LinearParams:
    wb_gains: np.ndarray = field(default_factory=lambda: np.ones(4))
    ccm: np.ndarray = field(default_factory=lambda: np.eye(3))
    trainable: bool = True

    def __post_init__(self):
        self.wb_gains = np.asarray(self.wb_gains, dtype=np.float64).reshape(4)
        self.ccm = np.asarray(self.ccm, dtype=np.float64).reshape(3, 3)

    @property
    def binning(self) -> np.ndarray:
        return BINNING.copy()

    @classmethod
    def from_meta(cls, meta: SensorMeta) -> "LinearParams":
        return cls(np.array(meta.wb_gains), np.array(meta.ccm))

    def to_dict(self) -> dict:
        return {"wb_gains": self.wb_gains.tolist(), "ccm": self.ccm.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearParams":
        return cls(d["wb_gains"], d["ccm"])


def white_balance(img: BayerImage, gains) -> BayerImage:
    gains = np.asarray(gains, dtype=np.float64).reshape(4)
    if np.any(gains <= 0):
        raise NonPositiveGain(f"white-balance gains must be > 0, got {gains.tolist()}")
    return BayerImage(img.planes * gains[:, None, None], img.meta)


def binning(img: BayerImage) -> RgbImage:
    p = img.planes
    return RgbImage(np.stack([p[0], 0.5 * (p[1] + p[3]), p[2]]))


def color_transform(img: RgbImage, ccm) -> RgbImage:
    ccm = np.asarray(ccm, dtype=np.float64)
    return RgbImage(np.einsum("rc,chw->rhw", ccm, img.channels))


def compose(params: LinearParams) -> np.ndarray:
    """P = ccm @ binning @ diag(wb_gains), a 3x4 matrix."""
    return params.ccm @ (BINNING * params.wb_gains[None, :])


def apply_matrix(p: np.ndarray, img: BayerImage) -> RgbImage:
    """Apply one static 3x4 matrix to every pixel."""
    return RgbImage(np.einsum("rc,chw->rhw", np.asarray(p, dtype=np.float64), img.planes))


def compose_tensor(wb_gains: Tensor, ccm: Tensor) -> Tensor:
    """Differentiable version of :func:`compose`."""
    gains = T.broadcast(T.reshape(wb_gains, (1, 4)), (3, 4))
    return T.matmul(ccm, T.mul(Tensor(BINNING), gains))


def _planes(img) -> Tensor:
    if isinstance(img, Tensor):
        return img
    if isinstance(img, BayerImage):
        return Tensor(img.planes)
    return Tensor(np.asarray(img, dtype=np.float64))


# -- feature extraction -----------------------------------------------------


@dataclass
class FeaturePair:
    local: Tensor
    global_: Tensor

    @property
    def width(self) -> int:
        return self.local.shape[0]


def init_feature_params(rng: np.random.Generator, width: int = 16, in_ch: int = 4,
                        prefix: str = "linear") -> dict[str, Tensor]:
    def conv(cout, cin):
        w = rng.standard_normal((cout, cin, 3, 3)) * math.sqrt(2.0 / (cin * 9))
        return Tensor(w, requires_grad=True), Tensor(np.zeros(cout), requires_grad=True)

    p = {}
    for name, (cout, cin) in (("conv1", (width, in_ch)), ("conv2", (width, width))):
        p[f"{prefix}.local_feat.{name}.weight"], p[f"{prefix}.local_feat.{name}.bias"] = conv(cout, cin)
    cin = in_ch
    for s in range(1, GLOBAL_STAGES + 1):
        p[f"{prefix}.global_feat.stage{s}.weight"], p[f"{prefix}.global_feat.stage{s}.bias"] = conv(width, cin)
        cin = width
    return p


def extract_features(img, params: dict[str, Tensor], prefix: str = "linear") -> FeaturePair:
    """Full-resolution local stream and a /16 global stream (four conv + pool stages)."""
    x = _planes(img)
    if x.data.ndim != 3:
        raise ShapeMismatch(f"expected C x H x W input, got {x.shape}")
    h, w = x.shape[1:]
    if h < 16 or w < 16:
        raise ImageTooSmall(f"feature extraction needs H, W >= 16, got {h}x{w}")
    lf = f"{prefix}.local_feat"
    local = T.relu(T.conv2d_3x3(x, params[f"{lf}.conv1.weight"], params[f"{lf}.conv1.bias"]))
    local = T.relu(T.conv2d_3x3(local, params[f"{lf}.conv2.weight"], params[f"{lf}.conv2.bias"]))
    g = x
    gf = f"{prefix}.global_feat"
    for s in range(1, GLOBAL_STAGES + 1):
        g = T.relu(T.conv2d_3x3(g, params[f"{gf}.stage{s}.weight"], params[f"{gf}.stage{s}.bias"]))
        g = T.avg_pool2d(g, 2)
    return FeaturePair(local, g)


# -- attention --------------------------------------------------------------


def init_attention_params(rng: np.random.Generator, kind: str, feat_width: int = 16, dim: int = 16,
                          prefix: str = "linear") -> dict[str, Tensor]:
    """Parameters for ``kind`` in {"local", "global"}; output projections start at zero."""
    pre = f"{prefix}.{kind}_attn"

    def lin(fan_in, fan_out):
        return Tensor(rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in), requires_grad=True)

    p = {
        f"{pre}.embed": Tensor(rng.standard_normal(dim), requires_grad=True),
        f"{pre}.pos": Tensor(rng.standard_normal((N_TOKENS, dim)), requires_grad=True),
    }
    if kind == "local":
        p[f"{pre}.wq"] = lin(feat_width, dim)
        p[f"{pre}.wk"] = lin(dim, dim)
        p[f"{pre}.wv"] = lin(dim, dim)
        p[f"{pre}.wo"] = Tensor(np.zeros((dim, N_TOKENS)), requires_grad=True)
    elif kind == "global":
        p[f"{pre}.wq"] = lin(dim, dim)
        p[f"{pre}.wk"] = lin(feat_width, dim)
        p[f"{pre}.wv"] = lin(feat_width, dim)
        p[f"{pre}.wo"] = Tensor(np.zeros((dim, 1)), requires_grad=True)
    else:
        raise ValueError(f"unknown attention kind {kind!r}")
    p[f"{pre}.bo"] = Tensor(np.zeros(N_TOKENS), requires_grad=True)
    return p


def matrix_tokens(base: Tensor, embed: Tensor, pos: Tensor) -> Tensor:
    """One d-dim token per entry of the 3x4 matrix: value * embed + slot embedding."""
    d = embed.shape[0]
    if base.shape != (3, 4):
        raise ShapeMismatch(f"base matrix must be 3x4, got {base.shape}")
    if pos.shape != (N_TOKENS, d):
        raise ShapeMismatch(f"positional table must be {N_TOKENS}x{d}, got {pos.shape}")
    return T.matmul(T.reshape(base, (N_TOKENS, 1)), T.reshape(embed, (1, d))) + pos


def attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Single-head scaled dot-product attention on row-token matrices."""
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeMismatch(f"attention: q {q.shape}, k {k.shape}, v {v.shape} do not conform")
    scores = T.matmul(q, T.transpose(k)) * (1.0 / math.sqrt(q.shape[1]))
    return T.matmul(T.softmax(scores), v)


def local_attention(local_feat: Tensor, base: Tensor, params: dict[str, Tensor],
                    prefix: str = "linear") -> Tensor:
    """Per-pixel queries from the local features attend over the 12 matrix tokens.

    Returns a 12 x H x W correction (one 3x4 matrix per pixel, row-major).
    """
    pre = f"{prefix}.local_attn"
    c, h, w = local_feat.shape
    if params[f"{pre}.wq"].shape[0] != c:
        raise ShapeMismatch(f"local attention expects {params[f'{pre}.wq'].shape[0]} feature channels, got {c}")
    tokens = matrix_tokens(base, params[f"{pre}.embed"], params[f"{pre}.pos"])
    queries = T.matmul(T.transpose(T.reshape(local_feat, (c, h * w))), params[f"{pre}.wq"])
    keys = T.matmul(tokens, params[f"{pre}.wk"])
    values = T.matmul(tokens, params[f"{pre}.wv"])
    mixed = attend(queries, keys, values)
    out = T.matmul(mixed, params[f"{pre}.wo"])
    out = out + T.broadcast(T.reshape(params[f"{pre}.bo"], (1, N_TOKENS)), (h * w, N_TOKENS))
    return T.reshape(T.transpose(out), (N_TOKENS, h, w))


def global_attention(base: Tensor, global_feat: Tensor, params: dict[str, Tensor],
                     prefix: str = "linear") -> Tensor:
    """The 12 matrix tokens attend over the flattened global feature map; returns a 3x4 correction."""
    pre = f"{prefix}.global_attn"
    c, h, w = global_feat.shape
    if h * w < 1:
        raise ShapeMismatch("global features are empty")
    if params[f"{pre}.wk"].shape[0] != c:
        raise ShapeMismatch(f"global attention expects {params[f'{pre}.wk'].shape[0]} feature channels, got {c}")
    tokens = matrix_tokens(base, params[f"{pre}.embed"], params[f"{pre}.pos"])
    feats = T.transpose(T.reshape(global_feat, (c, h * w)))
    queries = T.matmul(tokens, params[f"{pre}.wq"])
    keys = T.matmul(feats, params[f"{pre}.wk"])
    values = T.matmul(feats, params[f"{pre}.wv"])
    mixed = attend(queries, keys, values)
    out = T.reshape(T.matmul(mixed, params[f"{pre}.wo"]), (N_TOKENS,)) + params[f"{pre}.bo"]
    return T.reshape(out, (3, 4))


# -- dynamic field ----------------------------------------------------------


@dataclass
class DynamicLinearField:
    base: Tensor
    global_corr: Tensor
    local_corr: Tensor

    def __post_init__(self):
        if self.base.shape != (3, 4) or self.global_corr.shape != (3, 4):
            raise ShapeMismatch("base and global correction must be 3x4")
        if self.local_corr.data.ndim != 3 or self.local_corr.shape[0] != N_TOKENS:
            raise ShapeMismatch(f"local correction must be 12xHxW, got {self.local_corr.shape}")

    @property
    def spatial(self) -> tuple[int, int]:
        return self.local_corr.shape[1], self.local_corr.shape[2]

    def effective(self) -> Tensor:
        """Per-pixel 3x4 matrices, shape 3 x 4 x H x W."""
        h, w = self.spatial
        shared = T.broadcast(T.reshape(self.base + self.global_corr, (3, 4, 1, 1)), (3, 4, h, w))
        return T.reshape(self.local_corr, (3, 4, h, w)) + shared

    def pooled(self) -> Tensor:
        """base + global + spatial mean of local: the single 3x4 summary of the field."""
        return self.base + self.global_corr + T.reshape(T.mean(self.local_corr, axis=(1, 2)), (3, 4))


def apply_dynamic(img, fld: DynamicLinearField) -> Tensor:
    """I'[:, i, j] = effective[:, :, i, j] @ I[:, i, j]."""
    x = _planes(img)
    h, w = fld.spatial
    if x.shape != (4, h, w):
        raise ShapeMismatch(f"image {x.shape} does not match field {(4, h, w)}")
    expanded = T.broadcast(T.reshape(x, (1, 4, h, w)), (3, 4, h, w))
    return T.sum(fld.effective() * expanded, axis=1)


def linear_param_names(prefix: str = "linear") -> tuple[str, str]:
    return f"{prefix}.wb_gains", f"{prefix}.ccm"


def init_linear_params(rng: np.random.Generator, base: LinearParams, feat_width: int = 16, dim: int = 16,
                       prefix: str = "linear") -> dict[str, Tensor]:
    p = {
        f"{prefix}.wb_gains": Tensor(base.wb_gains, requires_grad=base.trainable),
        f"{prefix}.ccm": Tensor(base.ccm, requires_grad=base.trainable),
    }
    p.update(init_feature_params(rng, feat_width, prefix=prefix))
    p.update(init_attention_params(rng, "local", feat_width, dim, prefix=prefix))
    p.update(init_attention_params(rng, "global", feat_width, dim, prefix=prefix))
    return p


def linear_forward(img, params: dict[str, Tensor], prefix: str = "linear") -> tuple[Tensor, DynamicLinearField]:
    """Run the whole linear stage; returns (I', field)."""
    x = _planes(img)
    base = compose_tensor(params[f"{prefix}.wb_gains"], params[f"{prefix}.ccm"])
    feats = extract_features(x, params, prefix)
    fld = DynamicLinearField(
        base=base,
        global_corr=global_attention(base, feats.global_, params, prefix),
        local_corr=local_attention(feats.local, base, params, prefix),
    )
    return apply_dynamic(x, fld), fld
