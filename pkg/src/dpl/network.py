"""Backbone, per-patch features over a shared feature map, and checkpoints.

One image goes through the conv stack once; every patch is then projected
onto that single feature map, SPP-pooled and passed through the fc stack.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dpl import head, tensor
from dpl.head import DEFAULT_SPM_SCALES


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    pool: int = 0  # 2x2/stride-2 style max-pool after the relu when > 0


@dataclass(frozen=True)
class BackboneConfig:
    convs: tuple[ConvSpec, ...] = (
        ConvSpec(16, 5, 1, 2, pool=2),
        ConvSpec(32, 3, 1, 1, pool=2),
        ConvSpec(64, 3, 1, 1),
    )
    stride: int = 4
    spp_grid: tuple[int, int] = (6, 6)
    fc_widths: tuple[int, ...] = (128,)
    fc_relu: bool = True
    in_channels: int = 3

    def __post_init__(self):
        prod = 1
        for c in self.convs:
            prod *= c.stride * (c.pool if c.pool else 1)
        if prod != self.stride:
            raise ValueError(
                f"declared stride {self.stride} != product of conv/pool strides {prod}"
            )
        if not self.fc_widths:
            raise ValueError("at least one fc layer is required")

    @property
    def feature_channels(self) -> int:
        return self.convs[-1].out_channels

    @property
    def K(self) -> int:
        return self.fc_widths[-1]

    @property
    def min_image_side(self) -> int:
        return self.stride * max(self.spp_grid)


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    encode_dim: int = 256  # N
    spm_scales: tuple[tuple[int, int], ...] = DEFAULT_SPM_SCALES
    head_init_std: float = 0.01
    backbone_init: str = "he"  # "he" or "gaussian" (same std as the head)

    @property
    def M(self) -> int:
        return head.spm_cell_count(self.spm_scales)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        b = dict(d["backbone"])
        b["convs"] = tuple(ConvSpec(**c) for c in b["convs"])
        b["spp_grid"] = tuple(b["spp_grid"])
        b["fc_widths"] = tuple(b["fc_widths"])
        d = dict(d)
        d["backbone"] = BackboneConfig(**b)
        d["spm_scales"] = tuple(tuple(s) for s in d["spm_scales"])
        return cls(**d)


HEAD_TENSORS = ("W", "U_cls", "U_dis")


class ModelParams:
    """Named parameter tensors plus one momentum buffer per tensor."""

    def __init__(self, tensors: dict[str, np.ndarray], momentum: dict[str, np.ndarray] | None = None):
        self.tensors = tensors
        self.momentum = momentum if momentum is not None else {
            k: np.zeros_like(v) for k, v in tensors.items()
        }

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def W(self) -> np.ndarray:
        return self.tensors["W"]

    @property
    def U_cls(self) -> np.ndarray:
        return self.tensors["U_cls"]

    @property
    def U_dis(self) -> np.ndarray:
        return self.tensors["U_dis"]

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            {k: v.astype(dtype) for k, v in self.tensors.items()},
            {k: v.astype(dtype) for k, v in self.momentum.items()},
        )

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: v.copy() for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.momentum.items()},
        )


def _param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, kind) in canonical order; kind is weight/bias/head."""
    bb = config.backbone
    out = []
    cin = bb.in_channels
    for i, c in enumerate(bb.convs):
        out.append((f"conv{i}.weight", (c.out_channels, cin, c.kernel, c.kernel), "weight"))
        out.append((f"conv{i}.bias", (c.out_channels,), "bias"))
        cin = c.out_channels
    fan = cin * bb.spp_grid[0] * bb.spp_grid[1]
    for i, width in enumerate(bb.fc_widths):
        out.append((f"fc{i}.weight", (fan, width), "weight"))
        out.append((f"fc{i}.bias", (width,), "bias"))
        fan = width
    K, N, M, C = bb.K, config.encode_dim, config.M, config.num_classes
    out.append(("W", (K, N), "head"))
    out.append(("U_cls", (N * M, C), "head"))
    out.append(("U_dis", (K, C), "head"))
    return out


def is_bias(name: str) -> bool:
    return name.endswith(".bias")


def init_params(config: ModelConfig, seed: int, dtype=np.float64) -> ModelParams:
    """Seeded initialisation: head matrices ~ N(0, head_init_std^2), biases 0.

    Backbone weights use He-normal by default (the backbone is trained from
    scratch); ``backbone_init="gaussian"`` uses the head std for them too.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape, kind in _param_shapes(config):
        if kind == "bias":
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        if kind == "head" or config.backbone_init == "gaussian":
            std = config.head_init_std
        elif config.backbone_init == "he":
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            std = math.sqrt(2.0 / fan_in)
        else:
            raise ValueError(f"unknown backbone_init {config.backbone_init!r}")
        tensors[name] = rng.normal(0.0, std, size=shape).astype(dtype)
    return ModelParams(tensors)


# --------------------------------------------------------------------------
# Backbone
# --------------------------------------------------------------------------


@dataclass
class BackboneCache:
    layers: list  # per conv: (input, pre_relu, pool_argmax | None, post_relu_shape)
    image_shape: tuple[int, ...]


def backbone_forward(
    image: np.ndarray, params: ModelParams, config: ModelConfig
) -> tuple[np.ndarray, BackboneCache]:
    bb = config.backbone
    if image.ndim != 3 or image.shape[0] != bb.in_channels:
        raise tensor.ShapeError(f"backbone_forward: image shape {image.shape}")
    _, H, W = image.shape
    if min(H, W) < bb.min_image_side:
        raise ValueError(
            f"image {H}x{W} too small: both sides must be >= {bb.min_image_side}"
        )
    x = image
    layers = []
    for i, c in enumerate(bb.convs):
        z = tensor.conv2d(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"], c.stride, c.pad)
        a = tensor.relu(z)
        if c.pool:
            out, am = tensor.maxpool2d(a, c.pool, c.pool, c.pool, ceil_mode=True)
        else:
            out, am = a, None
        layers.append((x, z, am, a.shape))
        x = out
    return x, BackboneCache(layers, image.shape)


def backbone_backward(
    cache: BackboneCache, grad_map: np.ndarray, params: ModelParams, config: ModelConfig
) -> dict[str, np.ndarray]:
    grads = {}
    g = grad_map
    for i in reversed(range(len(config.backbone.convs))):
        c = config.backbone.convs[i]
        x, z, am, a_shape = cache.layers[i]
        if am is not None:
            g = tensor.maxpool2d_backward(am, g, a_shape)
        g = tensor.relu_backward(z, g)
        gx, gk, gb = tensor.conv2d_backward(x, params[f"conv{i}.weight"], g, c.stride, c.pad)
        grads[f"conv{i}.weight"] = gk
        grads[f"conv{i}.bias"] = gb
        g = gx
    return grads


# --------------------------------------------------------------------------
# Patch features
# --------------------------------------------------------------------------


@dataclass
class PatchCache:
    map_shape: tuple[int, ...]
    rects: list[tuple[int, int, int, int]]
    spp_argmax: np.ndarray  # (J, Cf, gh, gw)
    fc_inputs: list[np.ndarray]
    fc_pre: list[np.ndarray]


def project_boxes(boxes: np.ndarray, n: int, map_h: int, map_w: int) -> list[tuple[int, int, int, int]]:
    return [head.roi_project(b, n, map_h, map_w) for b in boxes]


def patch_features(
    fmap: np.ndarray, boxes, params: ModelParams, config: ModelConfig
) -> tuple[np.ndarray, PatchCache]:
    """Feature rows ``(J, K)`` for every box, sharing one feature map."""
    boxes = head.as_box_array(boxes)
    if len(boxes) == 0:
        raise ValueError("patch_features: an image must contribute at least one patch")
    bb = config.backbone
    gh, gw = bb.spp_grid
    _, mh, mw = fmap.shape
    rects = project_boxes(boxes, bb.stride, mh, mw)
    pooled, argmax = head.spp_pool_many(fmap, rects, gh, gw)
    h = pooled.reshape(len(rects), -1)
    fc_inputs, fc_pre = [], []
    for i in range(len(bb.fc_widths)):
        fc_inputs.append(h)
        z = tensor.matmul(h, params[f"fc{i}.weight"]) + params[f"fc{i}.bias"]
        fc_pre.append(z)
        h = tensor.relu(z) if bb.fc_relu else z
    return h, PatchCache(fmap.shape, rects, argmax, fc_inputs, fc_pre)


def patch_features_backward(
    cache: PatchCache, grad_F: np.ndarray, params: ModelParams, config: ModelConfig
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Backward through the fc stack and SPP; returns (grad_map, fc grads)."""
    bb = config.backbone
    grads = {}
    g = grad_F
    for i in reversed(range(len(bb.fc_widths))):
        if bb.fc_relu:
            g = tensor.relu_backward(cache.fc_pre[i], g)
        gi, gw_ = tensor.matmul_backward(cache.fc_inputs[i], params[f"fc{i}.weight"], g)
        grads[f"fc{i}.weight"] = gw_
        grads[f"fc{i}.bias"] = g.sum(axis=0)
        g = gi
    # bincount over the (J, ...) argmax table accumulates in ascending patch order
    grad_map = head.spp_pool_backward(cache.spp_argmax, g, cache.map_shape)
    return grad_map, grads


@dataclass
class ForwardState:
    backbone: BackboneCache
    patches: PatchCache
    head: head.HeadState
    image_w: int
    image_h: int


def model_backward(
    state: ForwardState | None, grad_F: np.ndarray, params: ModelParams, config: ModelConfig
) -> dict[str, np.ndarray]:
    """Gradients of every backbone tensor (conv and fc) given d loss / d F."""
    if state is None or state.patches is None or state.backbone is None:
        raise RuntimeError("model_backward: no cached forward state; run forward first")
    grad_map, grads = patch_features_backward(state.patches, grad_F, params, config)
    grads.update(backbone_backward(state.backbone, grad_map, params, config))
    return grads


def forward(
    params: ModelParams, config: ModelConfig, image: np.ndarray, boxes
) -> ForwardState:
    """Full forward pass for one image and its (already scaled) boxes."""
    boxes = head.as_box_array(boxes)
    fmap, bcache = backbone_forward(image, params, config)
    F, pcache = patch_features(fmap, boxes, params, config)
    _, H, W = image.shape
    hs = head.head_forward(
        F, boxes, W, H, params.W, params.U_cls, params.U_dis, config.spm_scales
    )
    return ForwardState(bcache, pcache, hs, W, H)


def backward(
    state: ForwardState,
    y: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
    mode: str = "multi-task",
    weights: tuple[float, float] = (1.0, 1.0),
) -> dict[str, np.ndarray]:
    """Gradients of the single-image loss for every parameter tensor."""
    gW, gUc, gUd, gF = head.head_backward(
        state.head, y, params.W, params.U_cls, params.U_dis, mode, weights
    )
    grads = model_backward(state, gF, params, config)
    grads.update(W=gW, U_cls=gUc, U_dis=gUd)
    return grads


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    params: ModelParams,
    config: ModelConfig,
    *,
    seed: int,
    iteration: int,
    extra: dict | None = None,
) -> Path:
    """Write ``manifest.json`` + ``params.bin`` (little-endian float32)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for prefix, store in (("", params.tensors), ("momentum/", params.momentum)):
        for name, arr in store.items():
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append(
                {"name": prefix + name, "shape": list(arr.shape), "dtype": "f32le", "offset": offset, "nbytes": len(data)}
            )
            offset += len(data)
            chunks.append(data)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "tensors": entries,
        "config": config.to_dict(),
        "seed": seed,
        "iteration": iteration,
    }
    if extra:
        manifest.update(extra)
    (path / "params.bin").write_bytes(b"".join(chunks))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path, dtype=np.float64) -> tuple[ModelParams, ModelConfig, dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    blob = (path / "params.bin").read_bytes()
    tensors, momentum = {}, {}
    for e in manifest["tensors"]:
        if e["dtype"] != "f32le":
            raise ValueError(f"unsupported dtype tag {e['dtype']!r}")
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(dtype)
        if e["name"].startswith("momentum/"):
            momentum[e["name"][len("momentum/") :]] = arr
        else:
            tensors[e["name"]] = arr
    config = ModelConfig.from_dict(manifest["config"])
    expected = [n for n, _, _ in _param_shapes(config)]
    if list(tensors) != expected:
        raise ValueError(f"checkpoint tensors {list(tensors)} do not match config {expected}")
    return ModelParams(tensors, momentum or None), config, manifest
