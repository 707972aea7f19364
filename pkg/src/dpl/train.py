"""Mini-batch SGD training with scale/flip augmentation, and the
finite-difference gradient checker."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from PIL import Image

from dpl import head, network, tensor
from dpl.network import HEAD_TENSORS, ModelConfig, ModelParams
from dpl.proposals import ProposalSet
from dpl.synthdata import Dataset

log = logging.getLogger(__name__)

PIXEL_MEAN = 127.5
PIXEL_SCALE = 64.0
LOSS_LOG_HEADER = ("iteration", "loss", "loss_cls", "loss_dis", "lr")


@dataclass
class TrainConfig:
    batch_size: int = 2
    lr_schedule: list[tuple[int, float]] = field(default_factory=lambda: [(6000, 0.001), (1000, 0.0001)])
    momentum: float = 0.9
    weight_decay: float = 0.0005
    mode: str = "multi-task"
    train_scales: list[int] = field(default_factory=lambda: [64, 96, 128])
    flip: bool = True
    seed: int = 0
    loss_weights: tuple[float, float] = (1.0, 1.0)
    dtype: str = "float32"

    def __post_init__(self):
        self.mode = head.canonical_mode(self.mode)
        self.lr_schedule = [(int(n), float(lr)) for n, lr in self.lr_schedule]
        self.train_scales = [int(s) for s in self.train_scales]
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not self.train_scales:
            raise ValueError("at least one training scale is required")
        if not self.lr_schedule or any(n < 0 or lr < 0 for n, lr in self.lr_schedule):
            raise ValueError(f"invalid lr schedule {self.lr_schedule}")

    @property
    def iterations(self) -> int:
        return sum(n for n, _ in self.lr_schedule)

    def lr_at(self, iteration: int) -> float:
        """Learning rate for 0-based ``iteration``."""
        acc = 0
        for n, lr in self.lr_schedule:
            acc += n
            if iteration < acc:
                return lr
        return self.lr_schedule[-1][1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_schedule"] = [list(p) for p in self.lr_schedule]
        d["loss_weights"] = list(self.loss_weights)
        return d


def parse_lr_schedule(text: str) -> list[tuple[int, float]]:
    """``"30000:0.001,10000:0.0001"`` -> ``[(30000, 0.001), (10000, 0.0001)]``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        n, _, lr = part.partition(":")
        if not lr:
            raise ValueError(f"bad lr schedule phase {part!r}; expected ITERS:LR")
        out.append((int(n), float(lr)))
    if not out:
        raise ValueError("empty lr schedule")
    return out


# --------------------------------------------------------------------------
# Rescaling / flipping
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BoxTransform:
    """Maps original-image box coordinates into a rescaled (and maybe flipped) image."""

    sx: float
    sy: float
    flip: bool
    out_w: int
    out_h: int

    def apply(self, boxes: np.ndarray) -> np.ndarray:
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) * [self.sx, self.sy, self.sx, self.sy]
        if self.flip:
            b = np.stack([self.out_w - b[:, 2], b[:, 1], self.out_w - b[:, 0], b[:, 3]], axis=1)
        return b

    def invert(self, boxes: np.ndarray) -> np.ndarray:
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if self.flip:
            b = np.stack([self.out_w - b[:, 2], b[:, 1], self.out_w - b[:, 0], b[:, 3]], axis=1)
        return b / [self.sx, self.sy, self.sx, self.sy]


def rescale_image(image: np.ndarray, target_longest_side: int, flip: bool = False) -> tuple[np.ndarray, BoxTransform]:
    """Bilinear resize of an HxWx3 image so its longest side is the target.

    Aspect ratio is kept (side lengths rounded to whole pixels); ``flip``
    mirrors horizontally. Returns the new HxWx3 array and the matching box
    transform.
    """
    h, w = image.shape[:2]
    scale = target_longest_side / max(h, w)
    nw = max(int(round(w * scale)), 1)
    nh = max(int(round(h * scale)), 1)
    if (nw, nh) == (w, h):
        out = image
    else:
        out = np.asarray(Image.fromarray(image).resize((nw, nh), Image.BILINEAR))
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out), BoxTransform(nw / w, nh / h, flip, nw, nh)


def to_network_input(image: np.ndarray, dtype=np.float32) -> np.ndarray:
    """HxWx3 uint8 -> 3xHxW normalised float."""
    return ((image.astype(dtype) - PIXEL_MEAN) / PIXEL_SCALE).transpose(2, 0, 1).copy()


def prepare(image: np.ndarray, boxes: np.ndarray, scale: int, flip: bool, dtype) -> tuple[np.ndarray, np.ndarray]:
    img, tf = rescale_image(image, scale, flip)
    return to_network_input(img, dtype), tf.apply(boxes)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def frozen_tensors(mode: str) -> set[str]:
    """Head tensors that receive no gradient (and no decay) in ``mode``."""
    mode = head.canonical_mode(mode)
    if mode == "cls-only":
        return {"U_dis"}
    if mode == "dis-only":
        return {"W", "U_cls"}
    return set()


def batch_step(
    params: ModelParams,
    config: ModelConfig,
    samples: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]],
    mode: str,
    weights: tuple[float, float] = (1.0, 1.0),
) -> tuple[dict[str, np.ndarray], float, float, float]:
    """Mean loss and mean gradients over ``(image, boxes, y)`` samples.

    Gradients are summed in sample order, then scaled by 1/I.
    """
    total = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    loss = l_cls = l_dis = 0.0
    for image, boxes, y in samples:
        state = network.forward(params, config, image, boxes)
        lt, lc, ld = head.total_loss(state.head.s_cls, state.head.s_dis, y, mode, weights)
        grads = network.backward(state, y, params, config, mode, weights)
        for k, g in grads.items():
            total[k] += g
        loss += lt
        l_cls += lc
        l_dis += ld
    inv = 1.0 / len(samples)
    for g in total.values():
        g *= inv
    return total, loss * inv, l_cls * inv, l_dis * inv


@dataclass
class TrainResult:
    params: ModelParams
    config: ModelConfig
    losses: list[tuple[int, float, float, float, float]]
    checkpoint: Path | None


def train(
    dataset: Dataset,
    proposals: Mapping[str, ProposalSet],
    config: TrainConfig,
    out_dir: str | Path | None = None,
    model_config: ModelConfig | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train from a seeded initialisation; writes ``checkpoint/`` and ``loss.csv``.

    Only ``dataset``'s image-level labels are used. Raises
    :class:`~dpl.tensor.NumericalError` on a non-finite loss after saving
    the last good parameters to ``checkpoint_last_good/``.
    """
    missing = [r.id for r in dataset.images if r.id not in proposals or len(proposals[r.id]) == 0]
    if missing:
        raise ValueError(f"no proposals for training image(s) {missing[:10]}")
    dtype = np.dtype(config.dtype)
    mc = model_config or ModelConfig(num_classes=len(dataset.classes))
    params = network.init_params(mc, config.seed, dtype=dtype)
    rng = np.random.default_rng(config.seed)
    frozen = frozen_tensors(config.mode)

    cache: dict[str, np.ndarray] = {}
    labels = {r.id: np.asarray(r.labels, dtype=dtype) for r in dataset.images}

    def image_of(rec):
        if rec.id not in cache:
            cache[rec.id] = dataset.load_image(rec)
        return cache[rec.id]

    order: list[int] = []
    losses = []
    out = Path(out_dir) if out_dir is not None else None
    last_good, last_good_iter = params.copy(), 0
    for it in range(config.iterations):
        lr = config.lr_at(it)
        batch = []
        for _ in range(config.batch_size):
            if not order:
                order = list(rng.permutation(len(dataset)))
            batch.append(dataset.images[order.pop(0)])
        samples = []
        for rec in batch:
            scale = int(config.train_scales[rng.integers(len(config.train_scales))])
            flip = bool(config.flip and rng.random() < 0.5)
            img, boxes = prepare(image_of(rec), proposals[rec.id].boxes, scale, flip, dtype)
            samples.append((img, boxes, labels[rec.id]))
        grads, loss, l_cls, l_dis = batch_step(params, mc, samples, config.mode, config.loss_weights)
        if not math.isfinite(loss):
            if out is not None:
                network.save_checkpoint(
                    out / "checkpoint_last_good", last_good, mc, seed=config.seed, iteration=last_good_iter
                )
            raise tensor.NumericalError(f"non-finite loss {loss} at iteration {it}")
        for name in params.names():
            if name in frozen:
                continue
            wd = 0.0 if network.is_bias(name) else config.weight_decay
            tensor.sgd_update(params.tensors[name], grads[name], params.momentum[name], lr, config.momentum, wd)
        losses.append((it + 1, loss, l_cls, l_dis, lr))
        if progress is not None:
            progress(it + 1, loss)
        if (it + 1) % 50 == 0:
            log.info("iter %d loss %.4f (cls %.4f dis %.4f) lr %g", it + 1, loss, l_cls, l_dis, lr)
        if (it + 1) % 100 == 0:
            last_good, last_good_iter = params.copy(), it + 1

    ckpt = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt = network.save_checkpoint(
            out / "checkpoint",
            params,
            mc,
            seed=config.seed,
            iteration=config.iterations,
            extra={"train_config": config.to_dict()},
        )
        write_loss_log(out / "loss.csv", losses)
    return TrainResult(params, mc, losses, ckpt)


def write_loss_log(path: str | Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_LOG_HEADER)
        for it, loss, lc, ld, lr in rows:
            w.writerow([it, repr(float(loss)), repr(float(lc)), repr(float(ld)), repr(float(lr))])


def smoothed(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()])
    return np.convolve(v, np.ones(window) / window, mode="valid")


# --------------------------------------------------------------------------
# Gradient check
# --------------------------------------------------------------------------


@dataclass
class BlockCheck:
    name: str
    checked: int
    skipped_nonsmooth: int
    max_rel_error: float
    worst: list[tuple[tuple[int, ...], float, float, float]]  # (index, analytic, numeric, rel)


@dataclass
class GradCheckReport:
    blocks: list[BlockCheck]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(b.max_rel_error <= self.tolerance for b in self.blocks)

    def failures(self) -> list[BlockCheck]:
        return [b for b in self.blocks if b.max_rel_error > self.tolerance]

    def format(self) -> str:
        lines = [f"{'block':<14} {'checked':>8} {'skipped':>8} {'max_rel_err':>12}  status"]
        for b in self.blocks:
            ok = "ok" if b.max_rel_error <= self.tolerance else "FAIL"
            lines.append(f"{b.name:<14} {b.checked:>8} {b.skipped_nonsmooth:>8} {b.max_rel_error:>12.3e}  {ok}")
            if ok == "FAIL":
                for idx, a, n, r in b.worst:
                    lines.append(f"    at {idx}: analytic {a:.6e} numeric {n:.6e} rel {r:.3e}")
        lines.append(f"tolerance {self.tolerance:g}: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def _decisions(state: network.ForwardState) -> tuple:
    """Every discrete choice made in the forward pass (relu signs, argmaxes)."""
    parts = []
    for x, z, am, _ in state.backbone.layers:
        parts.append((z > 0).tobytes())
        if am is not None:
            parts.append(am.tobytes())
    parts.append(state.patches.spp_argmax.tobytes())
    parts.extend((z > 0).tobytes() for z in state.patches.fc_pre)
    parts.append(state.head.rep.argmax.tobytes())
    parts.append(state.head.dis_argmax.tobytes())
    return tuple(parts)


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(
    params: ModelParams,
    config: ModelConfig,
    image: np.ndarray,
    boxes: np.ndarray,
    y: np.ndarray,
    mode: str = "multi-task",
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    backbone_coords: int = 200,
    seed: int = 0,
    blocks: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences in float64.

    All coordinates of the head matrices are checked; backbone tensors get
    ``backbone_coords`` random coordinates spread over them (all of a tensor
    if it is smaller). A coordinate whose +/-epsilon perturbation flips any
    relu sign or argmax is counted as skipped: the loss is not differentiable
    across such a switch.
    """
    mode = head.canonical_mode(mode)
    params = params.astype(np.float64)
    image = image.astype(np.float64)
    y = np.asarray(y, dtype=np.float64)
    rng = np.random.default_rng(seed)

    def loss_at() -> tuple[float, tuple]:
        st = network.forward(params, config, image, boxes)
        return head.total_loss(st.head.s_cls, st.head.s_dis, y, mode)[0], _decisions(st)

    state = network.forward(params, config, image, boxes)
    base_decisions = _decisions(state)
    analytic = network.backward(state, y, params, config, mode)

    names = list(blocks) if blocks is not None else params.names()
    if blocks is None and mode == "cls-only":
        names = [n for n in names if n != "U_dis"]
    backbone = [n for n in names if n not in HEAD_TENSORS]
    per_tensor = math.ceil(backbone_coords / max(len(backbone), 1))

    results = []
    for name in names:
        p = params.tensors[name]
        if name in HEAD_TENSORS or p.size <= per_tensor:
            flat_idx = np.arange(p.size)
        else:
            flat_idx = np.sort(rng.choice(p.size, size=per_tensor, replace=False))
        errs = []
        skipped = 0
        for fi in flat_idx:
            idx = np.unravel_index(fi, p.shape)
            orig = p[idx]
            p[idx] = orig + epsilon
            lp, dp = loss_at()
            p[idx] = orig - epsilon
            lm, dm = loss_at()
            p[idx] = orig
            if dp != base_decisions or dm != base_decisions:
                skipped += 1
                continue
            num = (lp - lm) / (2 * epsilon)
            a = float(analytic[name][idx])
            errs.append((tuple(int(i) for i in idx), a, num, relative_error(a, num)))
        errs.sort(key=lambda e: -e[3])
        results.append(
            BlockCheck(name, len(errs), skipped, errs[0][3] if errs else 0.0, errs[:5])
        )
    return GradCheckReport(results, tolerance)


def toy_model_config(num_classes: int = 3, K: int = 16, N: int = 8) -> ModelConfig:
    """Three conv layers, stride 4, 2x2 SPP; small enough for exhaustive checks."""
    bb = network.BackboneConfig(
        convs=(
            network.ConvSpec(4, 3, 1, 1, pool=2),
            network.ConvSpec(6, 3, 1, 1, pool=2),
            network.ConvSpec(8, 3, 1, 1),
        ),
        stride=4,
        spp_grid=(2, 2),
        fc_widths=(K,),
    )
    return ModelConfig(num_classes=num_classes, backbone=bb, encode_dim=N, head_init_std=0.1)


def toy_sample(seed: int, num_classes: int = 3, num_patches: int = 10, size: int = 32):
    """Random image (3, size, size), random in-bounds boxes and a label vector."""
    rng = np.random.default_rng(seed)
    image = rng.normal(0, 1, size=(3, size, size))
    boxes = []
    for _ in range(num_patches):
        w, h = rng.uniform(6, size, size=2)
        x, y0 = rng.uniform(0, size - w), rng.uniform(0, size - h)
        boxes.append((x, y0, x + w, y0 + h))
    y = (rng.random(num_classes) < 0.5).astype(np.float64)
    if y.sum() == 0:
        y[rng.integers(num_classes)] = 1.0
    return image, np.asarray(boxes), y
