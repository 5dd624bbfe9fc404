"""Encoder-decoder FCN that predicts the 9-way association map, plus training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .grid import AssociationMap, GridSpec, valid_mask
from .losses import LossConfig, semantic_loss, slic_loss
from .optim import Adam
from .sampling import bilinear_resize
from .tensor import (
    Tensor,
    backward,
    batch_norm,
    concat,
    conv2d,
    conv_transpose2d,
    leaky_relu,
    softmax_channels,
)

logger = logging.getLogger(__name__)

DOWNSAMPLE = 16  # four stride-2 stages
NEGATIVE_SLOPE = 0.1


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" | "deconv" | "predict"
    kernel: int
    stride: int
    cin: int
    cout: int
    inputs: tuple = ()  # names of source layers, concatenated along channels; () = image


@dataclass
class NetworkSpec:
    layers: list
    batch_norm: bool = True

    @classmethod
    def default(cls, bottleneck: int = 256, batch_norm: bool = True) -> "NetworkSpec":
        """The superpixel network layer table; ``bottleneck`` sets cnv4a/cnv4b width."""
        b = bottleneck
        L = LayerSpec
        layers = [
            L("cnv0a", "conv", 3, 1, 3, 16),
            L("cnv0b", "conv", 3, 1, 16, 16, ("cnv0a",)),
            L("cnv1a", "conv", 3, 2, 16, 32, ("cnv0b",)),
            L("cnv1b", "conv", 3, 1, 32, 32, ("cnv1a",)),
            L("cnv2a", "conv", 3, 2, 32, 64, ("cnv1b",)),
            L("cnv2b", "conv", 3, 1, 64, 64, ("cnv2a",)),
            L("cnv3a", "conv", 3, 2, 64, 128, ("cnv2b",)),
            L("cnv3b", "conv", 3, 1, 128, 128, ("cnv3a",)),
            L("cnv4a", "conv", 3, 2, 128, b, ("cnv3b",)),
            L("cnv4b", "conv", 3, 1, b, b, ("cnv4a",)),
            L("upcnv3", "deconv", 4, 2, b, 128, ("cnv4b",)),
            L("icnv3", "conv", 3, 1, 256, 128, ("upcnv3", "cnv3b")),
            L("upcnv2", "deconv", 4, 2, 128, 64, ("icnv3",)),
            L("icnv2", "conv", 3, 1, 128, 64, ("upcnv2", "cnv2b")),
            L("upcnv1", "deconv", 4, 2, 64, 32, ("icnv2",)),
            L("icnv1", "conv", 3, 1, 64, 32, ("upcnv1", "cnv1b")),
            L("upcnv0", "deconv", 4, 2, 32, 16, ("icnv1",)),
            L("icnv0", "conv", 3, 1, 32, 16, ("upcnv0", "cnv0b")),
            L("assoc", "predict", 3, 1, 16, 9, ("icnv0",)),
        ]
        return cls(layers, batch_norm)

    def output_sizes(self, height: int, width: int) -> dict:
        """Spatial (H, W) of every layer's output for a given input size."""
        sizes = {}
        for layer in self.layers:
            h, w = sizes[layer.inputs[0]] if layer.inputs else (height, width)
            if layer.kind == "deconv":
                sizes[layer.name] = (h * layer.stride, w * layer.stride)
            else:
                sizes[layer.name] = (-(-h // layer.stride), -(-w // layer.stride))
        return sizes


class SpixelNet:
    """Parameters and forward pass for a :class:`NetworkSpec`.

    ``params`` maps ``"<layer>.weight"`` (and ``.bias``/``.gamma``/``.beta``)
    to trainable Tensors; ``buffers`` holds batch-norm running statistics and
    the input mean.
    """

    def __init__(self, spec: NetworkSpec | None = None, seed: int = 0):
        self.spec = spec or NetworkSpec.default()
        self._check_spec()
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {"input_mean": np.zeros(3, np.float32)}
        self.training = True
        rng = np.random.default_rng(seed)
        gain = math.sqrt(2.0 / (1.0 + NEGATIVE_SLOPE**2))
        for layer in self.spec.layers:
            k = layer.kernel
            if layer.kind == "deconv":
                shape = (layer.cin, layer.cout, k, k)
                fan_in = layer.cin * k * k / layer.stride**2
            else:
                shape = (layer.cout, layer.cin, k, k)
                fan_in = layer.cin * k * k
            w = rng.normal(0.0, gain / math.sqrt(fan_in), size=shape).astype(np.float32)
            self.params[f"{layer.name}.weight"] = Tensor(w, requires_grad=True)
            if layer.kind == "predict" or not self.spec.batch_norm:
                self.params[f"{layer.name}.bias"] = Tensor(np.zeros(layer.cout, np.float32), requires_grad=True)
            else:
                self.params[f"{layer.name}.gamma"] = Tensor(np.ones(layer.cout, np.float32), requires_grad=True)
                self.params[f"{layer.name}.beta"] = Tensor(np.zeros(layer.cout, np.float32), requires_grad=True)
                self.buffers[f"{layer.name}.running_mean"] = np.zeros(layer.cout, np.float32)
                self.buffers[f"{layer.name}.running_var"] = np.ones(layer.cout, np.float32)

    def _check_spec(self) -> None:
        channels = {}
        names = set()
        for layer in self.spec.layers:
            if layer.inputs:
                missing = [n for n in layer.inputs if n not in names]
                if missing:
                    raise ValueError(f"{layer.name}: unknown input layer(s) {missing}")
                cin = sum(channels[n] for n in layer.inputs)
            else:
                cin = 3
            if cin != layer.cin:
                raise ValueError(f"{layer.name}: inputs provide {cin} channels, layer expects {layer.cin}")
            channels[layer.name] = layer.cout
            names.add(layer.name)
        if self.spec.layers[-1].cout != 9:
            raise ValueError("the prediction layer must output 9 channels")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def to_dtype(self, dtype) -> "SpixelNet":
        """Cast parameters and buffers in place (float64 is used for gradient checks)."""
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        self.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return self

    def train(self) -> "SpixelNet":
        self.training = True
        return self

    def eval(self) -> "SpixelNet":
        self.training = False
        return self

    def logits(self, x: Tensor) -> Tensor:
        """Raw 9-channel scores for an (N, 3, H, W) input already mean-centered."""
        if x.shape[2] % DOWNSAMPLE or x.shape[3] % DOWNSAMPLE:
            raise ValueError(
                f"input size {x.shape[2]}x{x.shape[3]} must be divisible by {DOWNSAMPLE}; pad or resize the image"
            )
        outputs: dict[str, Tensor] = {}
        out = x
        for layer in self.spec.layers:
            if layer.inputs:
                srcs = [outputs[n] for n in layer.inputs]
                shapes = {s.shape[2:] for s in srcs}
                if len(shapes) != 1:
                    raise ValueError(f"{layer.name}: skip inputs disagree in spatial size {shapes}")
                inp = srcs[0] if len(srcs) == 1 else concat(srcs, axis=1)
            else:
                inp = x
            p = self.params
            bias = p.get(f"{layer.name}.bias")
            if layer.kind == "deconv":
                out = conv_transpose2d(inp, p[f"{layer.name}.weight"], bias, stride=layer.stride, padding=1)
            else:
                out = conv2d(inp, p[f"{layer.name}.weight"], bias, stride=layer.stride, padding=layer.kernel // 2)
            if layer.kind != "predict":
                if self.spec.batch_norm:
                    out = batch_norm(
                        out,
                        p[f"{layer.name}.gamma"],
                        p[f"{layer.name}.beta"],
                        self.buffers[f"{layer.name}.running_mean"],
                        self.buffers[f"{layer.name}.running_var"],
                        training=self.training,
                    )
                out = leaky_relu(out, NEGATIVE_SLOPE)
            outputs[layer.name] = out
        return out

    def __call__(self, images: np.ndarray, cell: int) -> Tensor:
        """Association probabilities (N, 9, H, W) for (N, H, W, 3) images in [0, 1]."""
        images = np.asarray(images, dtype=np.float32)
        if images.ndim == 3:
            images = images[None]
        x = images - self.buffers["input_mean"]
        x = Tensor(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))
        grid = GridSpec(x.shape[2], x.shape[3], cell)
        return softmax_channels(self.logits(x), valid_mask(grid)[None])

    # -- persistence ------------------------------------------------------
    def state_arrays(self) -> dict:
        arrays = {name: t.data for name, t in self.params.items()}
        arrays.update({f"buffer:{name}": arr for name, arr in self.buffers.items()})
        return arrays

    def save(self, path, meta: dict | None = None) -> None:
        info = {"bottleneck": self.spec.layers[8].cout, "batch_norm": self.spec.batch_norm}
        info.update(meta or {})
        save_checkpoint(path, self.state_arrays(), info)

    @classmethod
    def load(cls, path) -> tuple["SpixelNet", dict]:
        arrays, meta = load_checkpoint(path)
        spec = NetworkSpec.default(meta.get("bottleneck", 256), meta.get("batch_norm", True))
        model = cls(spec)
        for name, t in model.params.items():
            if name not in arrays or arrays[name].shape != t.shape:
                raise ValueError(f"checkpoint {path}: missing or misshaped parameter {name}")
            t.data = arrays[name].copy()
        for name in model.buffers:
            key = f"buffer:{name}"
            if key not in arrays:
                raise ValueError(f"checkpoint {path}: missing buffer {name}")
            model.buffers[name] = arrays[key].copy()
        return model.eval(), meta


def predict_association(model: SpixelNet, image: np.ndarray, cell: int = 16) -> AssociationMap:
    """Association map for one (H, W, 3) image in [0, 1]; H and W must be multiples of 16."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {image.shape}")
    was_training = model.training
    model.eval()
    try:
        q = model(image, cell)
    finally:
        model.training = was_training
    return AssociationMap.from_tensor(q.data, cell)


# ---------------------------------------------------------------------------
# superpixel-count control by resizing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResizeTransform:
    source: tuple  # (H, W)
    target: tuple  # (H', W')

    @property
    def identity(self) -> bool:
        return self.source == self.target

    def labels_to_source(self, labels: np.ndarray) -> np.ndarray:
        """Nearest-neighbour map of a target-resolution label map back to the source size."""
        if self.identity:
            return labels.copy()
        (h, w), (th, tw) = self.source, self.target
        rows = np.minimum(((np.arange(h) + 0.5) * th / h).astype(np.int64), th - 1)
        cols = np.minimum(((np.arange(w) + 0.5) * tw / w).astype(np.int64), tw - 1)
        return labels[rows[:, None], cols[None, :]]


def grid_for_count(height: int, width: int, desired_n: int, cell: int = 16) -> tuple[int, int]:
    """Grid (rows, cols) whose product is closest to ``desired_n`` at the image's aspect ratio.

    Grid dimensions step so the resized image stays a multiple of 16. Ties
    on the count go to the smaller aspect-ratio distortion, then to the
    smaller grid.
    """
    if desired_n < 4:
        raise ValueError("desired superpixel count must be at least 4")
    if desired_n > height * width // 4:
        raise ValueError(
            f"{desired_n} superpixels would leave fewer than 4 source pixels each in a {height}x{width} image"
        )
    step = math.lcm(cell, DOWNSAMPLE) // cell
    ideal_rows = math.sqrt(desired_n * height / width)
    ideal_cols = math.sqrt(desired_n * width / height)

    def around(v):
        lo = max(step, int(v // step) * step)
        return {lo, lo + step}

    aspect = width / height
    best = None
    for r in around(ideal_rows):
        for c in around(ideal_cols):
            key = (abs(r * c - desired_n), abs(math.log((c / r) / aspect)), r * c)
            if best is None or key < best[0]:
                best = (key, (r, c))
    return best[1]


def resize_for_count(image: np.ndarray, desired_n: int, cell: int = 16) -> tuple[np.ndarray, ResizeTransform]:
    h, w = image.shape[:2]
    rows, cols = grid_for_count(h, w, desired_n, cell)
    target = (rows * cell, cols * cell)
    transform = ResizeTransform((h, w), target)
    if transform.identity:
        return image, transform
    return bilinear_resize(image, target), transform


def infer_with_count(model: SpixelNet, image: np.ndarray, desired_n: int, cell: int = 16):
    """Resize ``image`` so the grid holds about ``desired_n`` cells and predict.

    Returns ``(assoc, transform)``; ``transform.labels_to_source`` maps labels
    computed on the resized grid back to the input resolution.
    """
    resized, transform = resize_for_count(image, desired_n, cell)
    return predict_association(model, resized, cell), transform


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    labels: np.ndarray | None = None  # (H, W) segment ids
    lab: np.ndarray | None = None  # (H, W, 3) CIELAB, filled on demand


@dataclass
class TrainConfig:
    cell: int = 16
    crop: tuple = (208, 208)
    iterations: int = 300_000
    lr: float = 5e-5
    halve_at: float = 2 / 3
    loss: str = "semantic"
    m: float = 0.003
    batch_size: int = 8
    flips: bool = True
    seed: int = 0
    bottleneck: int = 256
    log_every: int = 0

    def __post_init__(self):
        if self.crop[0] % DOWNSAMPLE or self.crop[1] % DOWNSAMPLE:
            raise ValueError(f"crop {self.crop} must be divisible by {DOWNSAMPLE}")
        if self.loss not in ("slic", "semantic"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch size must be positive")


@dataclass
class TrainResult:
    model: SpixelNet
    history: list = field(default_factory=list)  # dicts: iteration, loss, property, position

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iteration", "loss", "property", "position"])
            for row in self.history:
                writer.writerow([row["iteration"], f"{row['loss']:.8g}", f"{row['property']:.8g}", f"{row['position']:.8g}"])


def one_hot(labels: np.ndarray, n_classes: int | None = None, dtype=np.float32) -> np.ndarray:
    """(..., H, W) integer labels -> (..., K, H, W) one-hot, ids compacted per call."""
    _, inv = np.unique(labels, return_inverse=True)
    inv = inv.reshape(labels.shape)
    k = n_classes or int(inv.max()) + 1
    out = (inv[..., None, :, :] == np.arange(k).reshape((k, 1, 1))).astype(dtype)
    return out


def _crop_batch(samples, idx, cfg: TrainConfig, rng: np.random.Generator, need_lab: bool):
    ch, cw = cfg.crop
    images, targets = [], []
    for i in idx:
        s = samples[i]
        h, w = s.image.shape[:2]
        if h < ch or w < cw:
            raise ValueError(f"sample {i} ({h}x{w}) is smaller than the crop {cfg.crop}")
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        img = s.image[y0 : y0 + ch, x0 : x0 + cw]
        tgt = (s.lab if need_lab else s.labels)[y0 : y0 + ch, x0 : x0 + cw]
        if cfg.flips:
            if rng.random() < 0.5:
                img, tgt = img[:, ::-1], tgt[:, ::-1]
            if rng.random() < 0.5:
                img, tgt = img[::-1], tgt[::-1]
        images.append(img)
        targets.append(tgt)
    return np.stack(images), targets


def _target_tensor(targets, need_lab: bool) -> Tensor:
    if need_lab:
        arr = np.stack(targets).transpose(0, 3, 1, 2)
        return Tensor(np.ascontiguousarray(arr, dtype=np.float32))
    onehots = [one_hot(np.ascontiguousarray(t)) for t in targets]
    k = max(o.shape[0] for o in onehots)
    h, w = onehots[0].shape[1:]
    out = np.zeros((len(onehots), k, h, w), np.float32)
    for i, o in enumerate(onehots):
        out[i, : o.shape[0]] = o
    return Tensor(out)


def compute_loss(model: SpixelNet, images: np.ndarray, target: Tensor, cfg: LossConfig, kind: str):
    q = model(images, cfg.cell)
    if kind == "slic":
        return slic_loss(q, target, cfg)
    return semantic_loss(q, target, cfg)


def train(samples, cfg: TrainConfig, model: SpixelNet | None = None, callback=None) -> TrainResult:
    """Train end-to-end with Adam; deterministic for a fixed ``cfg.seed``.

    ``callback(iteration, model)`` runs after every step when given.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("training dataset is empty")
    need_lab = cfg.loss == "slic"
    if need_lab:
        from .slic import rgb_to_lab

        for s in samples:
            if s.lab is None:
                s.lab = rgb_to_lab(s.image)
    elif any(s.labels is None for s in samples):
        raise ValueError("semantic loss needs ground-truth labels for every sample")

    if model is None:
        model = SpixelNet(NetworkSpec.default(cfg.bottleneck), seed=cfg.seed)
        model.buffers["input_mean"] = (
            np.mean([s.image.reshape(-1, 3).mean(axis=0) for s in samples], axis=0).astype(np.float32)
        )
    model.train()
    loss_cfg = LossConfig(m=cfg.m, cell=cfg.cell)
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    halve_step = int(round(cfg.iterations * cfg.halve_at))
    result = TrainResult(model)
    for it in range(1, cfg.iterations + 1):
        if it == halve_step + 1:
            opt.lr = cfg.lr / 2
        idx = rng.integers(0, len(samples), size=cfg.batch_size)
        images, targets = _crop_batch(samples, idx, cfg, rng, need_lab)
        terms = compute_loss(model, images, _target_tensor(targets, need_lab), loss_cfg, cfg.loss)
        opt.zero_grad()
        backward(terms.total, model.parameters())
        opt.step()
        row = {"iteration": it, **terms.as_floats()}
        result.history.append(row)
        if cfg.log_every and it % cfg.log_every == 0:
            logger.info("iter %d loss %.5f", it, row["loss"])
        if callback is not None:
            callback(it, model)
    model.eval()
    return result


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["crop"] = list(cfg.crop)
    return d
