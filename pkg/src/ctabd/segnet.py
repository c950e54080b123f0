"""U-Net++-style segmentation: network, losses, training, inference.

The network is the nested-node grid X(i, j): X(i, 0) is the encoder column,
X(i, j>=1) consumes the concatenation of X(i, 0..j-1) with the upsampled
X(i+1, j-1), followed by two conv+batchnorm+ReLU blocks. 1x1x1 heads at
every X(0, j) emit class logits when deep supervision is on; heads are
ordered final-first, so head 0 is the full-depth output used at inference.
"""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .diff import (
    AdamConfig,
    AdamOptimizer,
    BatchNorm3d,
    Conv3d,
    CosineAnnealing,
    MaxPool3d,
    PointwiseConv3d,
    ReLU,
    UpsampleTrilinear2x,
    component_rng,
    load_checkpoint,
    schedule_lr,
)
from .errors import ConfigError, FormatError, ParameterError, ShapeError
from .grid import LabelMask, VoxelGrid
from .preprocess import PatchSpec, pad_to_dims, patch_corners

NUM_CLASSES = 6


@dataclass(frozen=True)
class SegNetConfig:
    depth: int = 3
    base_channels: int = 8
    max_channels: int = 256
    num_classes: int = NUM_CLASSES
    deep_supervision: bool = True
    patch: PatchSpec = field(default_factory=lambda: PatchSpec((64, 64, 32), (32, 32, 16)))
    batch_size: int = 2
    w_dice: float = 0.6
    w_ce: float = 0.4
    lr0: float = 0.01
    lr_min: float = 0.0
    total_steps: int = 300
    steps_per_epoch: int = 25
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if abs(self.w_dice + self.w_ce - 1.0) > 1e-9:
            raise ConfigError(f"loss weights must sum to 1: {self.w_dice} + {self.w_ce}")
        if self.batch_size < 1 or self.total_steps < 1 or self.steps_per_epoch < 1:
            raise ConfigError("batch size and step counts must be >= 1")

    @property
    def encoder_channels(self) -> tuple[int, ...]:
        return tuple(min(self.base_channels * 2**i, self.max_channels) for i in range(self.depth))

    @property
    def total_epochs(self) -> int:
        return int(np.ceil(self.total_steps / self.steps_per_epoch))

    @property
    def schedule(self) -> CosineAnnealing:
        return CosineAnnealing(self.lr0, self.total_epochs, self.lr_min)


class _ConvBlock:
    """conv -> bn -> relu, twice."""

    def __init__(self, in_ch, out_ch, rng, dtype):
        self.layers = [
            Conv3d(in_ch, out_ch, rng, dtype),
            BatchNorm3d(out_ch, dtype=dtype),
            ReLU(),
            Conv3d(out_ch, out_ch, rng, dtype),
            BatchNorm3d(out_ch, dtype=dtype),
            ReLU(),
        ]

    def forward(self, x, train):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, gy):
        for layer in reversed(self.layers):
            gy = layer.backward(gy)
        return gy

    def named_params(self, prefix):
        names = ("conv1", "bn1", None, "conv2", "bn2", None)
        for sub, layer in zip(names, self.layers):
            if sub is None:
                continue
            for pname, p in layer.params():
                yield f"{prefix}.{sub}.{pname}", p

    def named_buffers(self, prefix):
        names = ("conv1", "bn1", None, "conv2", "bn2", None)
        for sub, layer in zip(names, self.layers):
            if sub is None:
                continue
            for bname, _ in layer.buffers():
                yield f"{prefix}.{sub}.{bname}", layer, bname


class UNetPP:
    """Parameterized nested U-Net; see module docstring for topology."""

    def __init__(self, config: SegNetConfig, seed: int, dtype=np.float32):
        for p, d in zip(config.patch.dims, ("x", "y", "z")):
            if p % 2**config.depth:
                raise ConfigError(
                    f"patch {d}-dim {p} is not divisible by 2^depth = {2 ** config.depth}"
                )
        self.config = config
        self.dtype = dtype
        ch = config.encoder_channels
        rng = component_rng(seed, "segnet", "init")
        self.blocks: dict[tuple[int, int], _ConvBlock] = {}
        self.pools: dict[int, MaxPool3d] = {}
        self.ups: dict[tuple[int, int], UpsampleTrilinear2x] = {}
        self.split_sizes: dict[tuple[int, int], list[int]] = {}
        L = config.depth
        for i in range(L):
            in_ch = 1 if i == 0 else ch[i - 1]
            self.blocks[(i, 0)] = _ConvBlock(in_ch, ch[i], rng, dtype)
            if i > 0:
                self.pools[i] = MaxPool3d()
        for j in range(1, L):
            for i in range(L - j):
                parts = [ch[i]] * j + [ch[i + 1]]
                self.split_sizes[(i, j)] = parts
                self.ups[(i, j)] = UpsampleTrilinear2x()
                self.blocks[(i, j)] = _ConvBlock(sum(parts), ch[i], rng, dtype)
        head_js = list(range(1, L)) if config.deep_supervision else [L - 1]
        # final-first ordering: head 0 is X(0, L-1)
        self.head_js = sorted(head_js, reverse=True)
        self.heads = [PointwiseConv3d(ch[0], config.num_classes, rng, dtype) for _ in self.head_js]
        self._acts: dict[tuple[int, int], np.ndarray] | None = None

    # -- parameter plumbing ------------------------------------------------

    def named_params(self):
        for (i, j), block in sorted(self.blocks.items()):
            yield from block.named_params(f"x{i}_{j}")
        for j, head in zip(self.head_js, self.heads):
            for pname, p in head.params():
                yield f"head{j}.{pname}", p

    def named_buffers(self):
        for (i, j), block in sorted(self.blocks.items()):
            yield from block.named_buffers(f"x{i}_{j}")

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_params())

    def checkpoint_entries(self):
        entries = [(name, p.data) for name, p in self.named_params()]
        entries += [(name, getattr(layer, bname)) for name, layer, bname in self.named_buffers()]
        return entries

    def load_entries(self, arrays: dict):
        for name, p in self.named_params():
            if name not in arrays:
                raise FormatError(f"checkpoint is missing parameter {name!r}")
            if tuple(arrays[name].shape) != p.data.shape:
                raise FormatError(
                    f"checkpoint parameter {name!r} has shape {arrays[name].shape}, "
                    f"expected {p.data.shape}"
                )
            p.data = arrays[name].astype(self.dtype)
        for name, layer, bname in self.named_buffers():
            if name not in arrays:
                raise FormatError(f"checkpoint is missing buffer {name!r}")
            setattr(layer, bname, arrays[name].astype(self.dtype))

    # -- forward / backward ------------------------------------------------

    def forward(self, x: np.ndarray, train: bool = True) -> list[np.ndarray]:
        """Returns per-head logits, final head first."""
        L = self.config.depth
        acts: dict[tuple[int, int], np.ndarray] = {}
        acts[(0, 0)] = self.blocks[(0, 0)].forward(x, train)
        for i in range(1, L):
            pooled = self.pools[i].forward(acts[(i - 1, 0)], train)
            acts[(i, 0)] = self.blocks[(i, 0)].forward(pooled, train)
        for j in range(1, L):
            for i in range(L - j):
                up = self.ups[(i, j)].forward(acts[(i + 1, j - 1)], train)
                cat = np.concatenate([acts[(i, k)] for k in range(j)] + [up], axis=1)
                acts[(i, j)] = self.blocks[(i, j)].forward(cat, train)
        self._acts = acts
        return [head.forward(acts[(0, j)], train) for j, head in zip(self.head_js, self.heads)]

    def backward(self, dlogits: list[np.ndarray]) -> None:
        if self._acts is None:
            raise ShapeError("backward called before forward")
        L = self.config.depth
        grads: dict[tuple[int, int], np.ndarray] = {}

        def add(key, g):
            if key in grads:
                grads[key] += g
            else:
                grads[key] = g.copy()

        for j, head, dl in zip(self.head_js, self.heads, dlogits):
            add((0, j), head.backward(dl))
        for j in range(L - 1, 0, -1):
            for i in range(L - 1 - j, -1, -1):
                g = grads.pop((i, j), None)
                if g is None:
                    continue
                gcat = self.blocks[(i, j)].backward(g)
                sizes = self.split_sizes[(i, j)]
                offs = np.cumsum([0] + sizes)
                for k in range(j):
                    add((i, k), gcat[:, offs[k] : offs[k + 1]])
                gup = self.ups[(i, j)].backward(gcat[:, offs[j] :])
                add((i + 1, j - 1), gup)
        for i in range(L - 1, 0, -1):
            g = grads.pop((i, 0), None)
            if g is None:
                continue
            gp = self.blocks[(i, 0)].backward(g)
            add((i - 1, 0), self.pools[i].backward(gp))
        if (0, 0) in grads:
            self.blocks[(0, 0)].backward(grads.pop((0, 0)))
        self._acts = None


def build_unetpp(config: SegNetConfig, seed: int = 0, dtype=np.float32) -> UNetPP:
    """Construct the network for a config (validates patch divisibility)."""
    return UNetPP(config, seed, dtype)


# -- losses -----------------------------------------------------------------

def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    """(n, X, Y, Z) integer labels -> (n, C, X, Y, Z) one-hot."""
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype)
    for c in range(num_classes):
        out[:, c] = labels == c
    return out


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


DICE_SMOOTH = 1e-5


def soft_dice_loss(probs: np.ndarray, target_onehot: np.ndarray, smooth: float = DICE_SMOOTH):
    """Mean soft Dice loss over foreground classes present in the target."""
    loss, _ = soft_dice_loss_grad(probs, target_onehot, smooth)
    return loss


def soft_dice_loss_grad(probs: np.ndarray, target_onehot: np.ndarray, smooth: float = DICE_SMOOTH):
    """Returns (loss, dloss/dprobs). Classes absent from the target are skipped."""
    if probs.shape != target_onehot.shape:
        raise ShapeError(f"probs {probs.shape} vs target {target_onehot.shape}")
    axes = (0,) + tuple(range(2, probs.ndim))
    g_sum = target_onehot.sum(axis=axes, dtype=np.float64)
    present = [c for c in range(1, probs.shape[1]) if g_sum[c] > 0]
    grad = np.zeros_like(probs)
    if not present:
        return 0.0, grad
    total = 0.0
    for c in present:
        p = probs[:, c]
        g = target_onehot[:, c]
        inter = np.sum(p * g, dtype=np.float64)
        denom = np.sum(p, dtype=np.float64) + g_sum[c] + smooth
        num = 2.0 * inter + smooth
        total += 1.0 - num / denom
        # d/dp[v] of -(2*inter+s)/(denom): quotient rule, denom depends on p
        grad[:, c] = (-(2.0 * g * denom - num) / denom**2).astype(probs.dtype)
    k = len(present)
    return total / k, grad / k


def softmax_ce_loss_grad(logits: np.ndarray, labels: np.ndarray):
    """Voxel-mean cross-entropy on softmax probabilities; grad w.r.t. logits."""
    probs = softmax_channels(logits)
    n_vox = labels.size
    idx = np.expand_dims(labels.astype(np.intp), 1)
    picked = np.take_along_axis(probs, idx, axis=1)
    loss = float(-np.sum(np.log(np.maximum(picked, 1e-30)), dtype=np.float64) / n_vox)
    grad = probs.copy()
    np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=1) - 1.0, axis=1)
    grad /= n_vox
    return loss, grad, probs


def combined_loss_grad(logits: np.ndarray, labels: np.ndarray, w_dice: float = 0.6, w_ce: float = 0.4):
    """0.6 Dice + 0.4 CE on one head; returns (loss, dloss/dlogits)."""
    ce, dce, probs = softmax_ce_loss_grad(logits, labels)
    target = one_hot(labels, logits.shape[1], dtype=probs.dtype)
    dice, ddice_dp = soft_dice_loss_grad(probs, target)
    # chain Dice through softmax: dz = p * (dp - sum_c p_c dp_c)
    inner = np.sum(probs * ddice_dp, axis=1, keepdims=True)
    ddice_dz = probs * (ddice_dp - inner)
    loss = w_dice * dice + w_ce * ce
    return float(loss), (w_dice * ddice_dz + w_ce * dce).astype(logits.dtype)


def combined_loss(logits: np.ndarray, labels: np.ndarray, w_dice: float = 0.6, w_ce: float = 0.4) -> float:
    return combined_loss_grad(logits, labels, w_dice, w_ce)[0]


def head_weights(num_heads: int) -> np.ndarray:
    """Normalized deep-supervision weights 2^-d, head 0 = full resolution."""
    w = 0.5 ** np.arange(num_heads, dtype=np.float64)
    return w / w.sum()


def downsample_labels(labels: np.ndarray, spatial: tuple[int, int, int]) -> np.ndarray:
    """Nearest-neighbor downsampling of (n, X, Y, Z) labels to a head's grid."""
    if labels.shape[1:] == tuple(spatial):
        return labels
    steps = []
    for full, small in zip(labels.shape[1:], spatial):
        if full % small:
            raise ShapeError(f"cannot downsample {labels.shape[1:]} to {spatial}")
        steps.append(full // small)
    return labels[:, :: steps[0], :: steps[1], :: steps[2]]


def deep_supervised_loss_grad(logits_list, labels, w_dice=0.6, w_ce=0.4):
    """Weighted combined loss over heads; returns (loss, [dlogits])."""
    weights = head_weights(len(logits_list))
    total = 0.0
    grads = []
    for w, logits in zip(weights, logits_list):
        tgt = downsample_labels(labels, logits.shape[2:])
        loss, dz = combined_loss_grad(logits, tgt, w_dice, w_ce)
        total += w * loss
        grads.append((w * dz).astype(logits.dtype))
    return float(total), grads


# -- prediction --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SegPrediction:
    """Per-class softmax probabilities plus the argmax mask."""

    probabilities: np.ndarray  # (num_classes, nx, ny, nz) float32
    mask: LabelMask

    def prob_grid(self, organ: int) -> VoxelGrid:
        return VoxelGrid(self.probabilities[int(organ)], self.mask.spacing, self.mask.origin)


def predict_segmentation(grid: VoxelGrid, net: UNetPP, patch: PatchSpec | None = None,
                         threads: int = 1) -> SegPrediction:
    """Sliding-window softmax inference with uniform overlap averaging."""
    patch = patch or net.config.patch
    dims = grid.dims
    padded = pad_to_dims(grid, patch.dims)
    corners = patch_corners(dims, patch)
    px, py, pz = patch.dims

    def run(corner):
        cx, cy, cz = corner
        sub = padded.data[cx : cx + px, cy : cy + py, cz : cz + pz]
        logits = net.forward(sub[None, None].astype(net.dtype), train=False)[0]
        return softmax_channels(logits)[0]

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            probs = list(pool.map(run, corners))
    else:
        probs = [run(c) for c in corners]
    # merge in fixed corner order so the result is independent of threading
    eff = tuple(max(n, p) for n, p in zip(dims, patch.dims))
    acc = np.zeros((net.config.num_classes,) + eff, dtype=np.float64)
    cnt = np.zeros(eff, dtype=np.float64)
    for (cx, cy, cz), p in zip(corners, probs):
        acc[:, cx : cx + px, cy : cy + py, cz : cz + pz] += p
        cnt[cx : cx + px, cy : cy + py, cz : cz + pz] += 1.0
    acc /= cnt
    acc = acc[:, : dims[0], : dims[1], : dims[2]]
    mask = LabelMask(np.argmax(acc, axis=0).astype(np.uint8), grid.spacing, grid.origin)
    return SegPrediction(acc.astype(np.float32), mask)


def predict_from_checkpoint(grid: VoxelGrid, ckpt_path, threads: int = 1) -> SegPrediction:
    net, _meta = load_segnet_checkpoint(ckpt_path)
    return predict_segmentation(grid, net, threads=threads)


def load_segnet_checkpoint(path) -> tuple[UNetPP, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "segnet":
        raise FormatError(f"{path}: not a segmentation checkpoint")
    cfg_d = dict(meta["config"])
    cfg_d["patch"] = PatchSpec(tuple(cfg_d["patch"]["dims"]), tuple(cfg_d["patch"]["stride"]))
    config = SegNetConfig(**cfg_d)
    net = UNetPP(config, seed=0)
    net.load_entries(arrays)
    return net, meta


def segnet_config_dict(config: SegNetConfig) -> dict:
    d = {k: getattr(config, k) for k in (
        "depth", "base_channels", "max_channels", "num_classes", "deep_supervision",
        "batch_size", "w_dice", "w_ce", "lr0", "lr_min", "total_steps",
        "steps_per_epoch", "val_fraction")}
    d["patch"] = {"dims": list(config.patch.dims), "stride": list(config.patch.stride)}
    return d


# -- training ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SegSample:
    """One preprocessed training case."""

    id: str
    image: VoxelGrid
    mask: LabelMask


def split_validation(samples, seed: int, val_fraction: float):
    """Deterministic split by seed-stable hash of the sample id."""
    train, val = [], []
    for s in sorted(samples, key=lambda s: s.id):
        h = int.from_bytes(hashlib.sha256(f"{seed}:{s.id}".encode()).digest()[:4], "little")
        (val if (h % 1000) < 1000 * val_fraction else train).append(s)
    if not train:  # degenerate split; keep training possible
        train, val = val, []
    return train, val


def foreground_dice(pred: np.ndarray, truth: np.ndarray, num_classes: int = NUM_CLASSES) -> float:
    """Mean Dice over foreground classes present in the truth."""
    scores = []
    for c in range(1, num_classes):
        t = truth == c
        if not t.any():
            continue
        p = pred == c
        inter = np.logical_and(p, t).sum()
        scores.append(2.0 * inter / (p.sum() + t.sum()))
    return float(np.mean(scores)) if scores else float("nan")


@dataclass
class TrainLogRow:
    epoch: int
    step: int
    lr: float
    loss: float
    val_dice: float  # nan when not evaluated at this step


def _random_patch(rng, sample: SegSample, patch_dims):
    img = pad_to_dims(sample.image, patch_dims)
    msk_arr = sample.mask.labels
    if any(n < p for n, p in zip(sample.mask.dims, patch_dims)):
        pad = [(0, max(0, p - n)) for n, p in zip(sample.mask.dims, patch_dims)]
        msk_arr = np.pad(msk_arr, pad, mode="edge")
    corner = tuple(int(rng.integers(0, n - p + 1)) for n, p in zip(img.dims, patch_dims))
    sl = tuple(slice(c, c + p) for c, p in zip(corner, patch_dims))
    return img.data[sl], msk_arr[sl]


def train_segmentation(samples, config: SegNetConfig, seed: int):
    """Deterministic training run; returns (net_with_best_params, log_rows).

    The returned network carries the parameters of the epoch with the best
    validation Dice (final parameters when there is no validation split).
    """
    samples = list(samples)
    if not samples:
        raise ParameterError("empty training dataset")
    train, val = split_validation(samples, seed, config.val_fraction)
    net = build_unetpp(config, seed)
    params = list(net.named_params())
    opt = AdamOptimizer(params, AdamConfig())
    rng = component_rng(seed, "segnet", "batches")
    sched = config.schedule
    log: list[TrainLogRow] = []
    best = (-np.inf, None)
    step = 0
    for epoch in range(config.total_epochs):
        for _ in range(config.steps_per_epoch):
            if step >= config.total_steps:
                break
            lr = schedule_lr(sched, epoch=step / config.steps_per_epoch)
            xs, ys = [], []
            for _ in range(config.batch_size):
                s = train[int(rng.integers(0, len(train)))]
                img, msk = _random_patch(rng, s, config.patch.dims)
                xs.append(img)
                ys.append(msk)
            x = np.stack(xs).astype(net.dtype)[:, None]
            y = np.stack(ys)
            logits = net.forward(x, train=True)
            loss, dlogits = deep_supervised_loss_grad(logits, y, config.w_dice, config.w_ce)
            opt.zero_grad()
            net.backward(dlogits)
            opt.step(lr)
            log.append(TrainLogRow(epoch, step, lr, loss, float("nan")))
            step += 1
        val_dice = float("nan")
        if val:
            scores = []
            for s in val:
                pred = predict_segmentation(s.image, net)
                scores.append(foreground_dice(pred.mask.labels, s.mask.labels, config.num_classes))
            val_dice = float(np.nanmean(scores))
            if log:
                log[-1].val_dice = val_dice
        snapshot_metric = val_dice if val else -np.inf
        if not val or snapshot_metric >= best[0]:
            best = (snapshot_metric, [(n, p.data.copy()) for n, p in params],
                    [(n, getattr(layer, b).copy(), layer, b) for n, layer, b in net.named_buffers()])
        if step >= config.total_steps:
            break
    # restore best-validation parameters
    _, best_params, best_buffers = best
    for (_, data), (_, p) in zip(best_params, params):
        p.data = data
    for _, data, layer, bname in best_buffers:
        setattr(layer, bname, data)
    return net, log
