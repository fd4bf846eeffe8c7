"""The 20-convolution dilated residual segmentation network.

Layout: a 3x3 stem (1->16 channels), three dilation stages (dilations 1, 2, 4
with 16, 32, 64 channels) of three pre-activation residual blocks each (two
3x3 convolutions per block, 18 total), and a 1x1 two-class head followed by a
channel softmax. Skips that grow channels use a 1x1 projection; all other
skips are identities. Blocks order operations norm -> ReLU -> conv.

Weight files are a text manifest (fingerprint, then one ``tensor: name shape
byte-offset`` line per tensor) next to a raw little-endian float32 blob.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .neural import (
    ConvSpec,
    conv2d_backward,
    conv2d_forward,
    instance_norm_backward,
    instance_norm_forward,
    relu_backward,
    relu_forward,
    residual_add_forward,
    softmax2_backward,
    softmax2_forward,
)
from .preprocess import NormalizedSlice
from .volumes import BinaryMask, ProbMap


@dataclass(frozen=True)
class StageSpec:
    dilation: int
    channels: int
    blocks: int = 3


@dataclass(frozen=True)
class BlockSpec:
    name: str
    in_channels: int
    out_channels: int
    dilation: int

    @property
    def has_projection(self) -> bool:
        return self.in_channels != self.out_channels

    @property
    def conv1(self) -> ConvSpec:
        return ConvSpec(self.in_channels, self.out_channels, (3, 3), self.dilation)

    @property
    def conv2(self) -> ConvSpec:
        return ConvSpec(self.out_channels, self.out_channels, (3, 3), self.dilation)

    @property
    def projection(self) -> ConvSpec:
        return ConvSpec(self.in_channels, self.out_channels, (1, 1), 1)


@dataclass(frozen=True)
class ArchitectureSpec:
    in_channels: int = 1
    stem_channels: int = 16
    stages: tuple[StageSpec, ...] = (StageSpec(1, 16), StageSpec(2, 32), StageSpec(4, 64))
    num_classes: int = 2

    def blocks(self) -> tuple[BlockSpec, ...]:
        out = []
        prev = self.stem_channels
        for si, stage in enumerate(self.stages, start=1):
            for bi in range(1, stage.blocks + 1):
                out.append(BlockSpec(f"s{si}b{bi}", prev, stage.channels, stage.dilation))
                prev = stage.channels
        return tuple(out)

    def stem_spec(self) -> ConvSpec:
        return ConvSpec(self.in_channels, self.stem_channels, (3, 3), 1)

    def head_spec(self) -> ConvSpec:
        return ConvSpec(self.stages[-1].channels, self.num_classes, (1, 1), 1)

    def conv_layers(self) -> list[tuple[str, ConvSpec]]:
        """The main-path convolutions in forward order (skip projections excluded)."""
        layers = [("stem", self.stem_spec())]
        for blk in self.blocks():
            layers.append((f"{blk.name}.c1", blk.conv1))
            layers.append((f"{blk.name}.c2", blk.conv2))
        layers.append(("head", self.head_spec()))
        return layers

    @property
    def num_convolutions(self) -> int:
        return len(self.conv_layers())

    def fingerprint(self) -> str:
        stages = ",".join(f"d{s.dilation}c{s.channels}b{s.blocks}" for s in self.stages)
        return (
            f"dilated-residual-v1/in{self.in_channels}/stem{self.stem_channels}"
            f"/{stages}/classes{self.num_classes}"
        )

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        """Ordered name -> shape map; the order fixes init draws and serialization."""
        shapes: dict[str, tuple[int, ...]] = {
            "stem.w": self.stem_spec().weight_shape,
            "stem.b": (self.stem_channels,),
        }
        for blk in self.blocks():
            shapes[f"{blk.name}.n1.scale"] = (blk.in_channels,)
            shapes[f"{blk.name}.n1.shift"] = (blk.in_channels,)
            shapes[f"{blk.name}.c1.w"] = blk.conv1.weight_shape
            shapes[f"{blk.name}.c1.b"] = (blk.out_channels,)
            shapes[f"{blk.name}.n2.scale"] = (blk.out_channels,)
            shapes[f"{blk.name}.n2.shift"] = (blk.out_channels,)
            shapes[f"{blk.name}.c2.w"] = blk.conv2.weight_shape
            shapes[f"{blk.name}.c2.b"] = (blk.out_channels,)
            if blk.has_projection:
                shapes[f"{blk.name}.proj.w"] = blk.projection.weight_shape
        shapes["final.n.scale"] = (self.stages[-1].channels,)
        shapes["final.n.shift"] = (self.stages[-1].channels,)
        shapes["head.w"] = self.head_spec().weight_shape
        shapes["head.b"] = (self.num_classes,)
        return shapes


DEFAULT_ARCH = ArchitectureSpec()


@dataclass
class ModelParams:
    arch: ArchitectureSpec
    tensors: dict[str, np.ndarray]

    @property
    def fingerprint(self) -> str:
        return self.arch.fingerprint()

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})


def init_params(seed: int, arch: ArchitectureSpec = DEFAULT_ARCH, dtype=np.float32) -> ModelParams:
    """He-normal (fan-in) conv weights, zero biases/shifts, unit scales.

    Fully determined by the seed: draws happen in parameter_shapes() order and
    only conv weights consume randomness.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in arch.parameter_shapes().items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            tensors[name] = (std * rng.standard_normal(shape)).astype(dtype)
        elif name.endswith(".scale"):
            tensors[name] = np.ones(shape, dtype=dtype)
        else:  # biases and shifts
            tensors[name] = np.zeros(shape, dtype=dtype)
    return ModelParams(arch, tensors)


def _forward(params: ModelParams, x: np.ndarray, keep_cache: bool):
    arch = params.arch
    t = params.tensors
    stem_in = x
    h = conv2d_forward(x, t["stem.w"], arch.stem_spec(), t["stem.b"])
    block_caches = []
    for blk in arch.blocks():
        n1, cache_n1 = instance_norm_forward(h, t[f"{blk.name}.n1.scale"], t[f"{blk.name}.n1.shift"])
        r1 = relu_forward(n1)
        c1 = conv2d_forward(r1, t[f"{blk.name}.c1.w"], blk.conv1, t[f"{blk.name}.c1.b"])
        n2, cache_n2 = instance_norm_forward(c1, t[f"{blk.name}.n2.scale"], t[f"{blk.name}.n2.shift"])
        r2 = relu_forward(n2)
        c2 = conv2d_forward(r2, t[f"{blk.name}.c2.w"], blk.conv2, t[f"{blk.name}.c2.b"])
        if blk.has_projection:
            skip = conv2d_forward(h, t[f"{blk.name}.proj.w"], blk.projection)
        else:
            skip = h
        if keep_cache:
            block_caches.append((h if blk.has_projection else None, cache_n1, r1, cache_n2, r2))
        h = residual_add_forward(c2, skip)
    nf, cache_nf = instance_norm_forward(h, t["final.n.scale"], t["final.n.shift"])
    rf = relu_forward(nf)
    logits = conv2d_forward(rf, t["head.w"], arch.head_spec(), t["head.b"])
    probs = softmax2_forward(logits)
    fg = probs[:, 1]
    if not keep_cache:
        return fg, None
    return fg, (stem_in, block_caches, cache_nf, rf, probs)


def forward_batch(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Foreground (lung) probabilities for a (B, 1, H, W) batch -> (B, H, W)."""
    if batch.ndim != 4 or batch.shape[1] != params.arch.in_channels:
        raise DataError(f"batch shape {batch.shape} incompatible with architecture")
    fg, _ = _forward(params, batch, keep_cache=False)
    return fg


def forward_lung_prob(params: ModelParams, slice_: NormalizedSlice | np.ndarray) -> np.ndarray:
    """Per-voxel lung probability for one normalized slice -> (rows, cols) in [0, 1]."""
    pixels = slice_.pixels if isinstance(slice_, NormalizedSlice) else np.asarray(slice_)
    if pixels.ndim != 2:
        raise DataError(f"expected a 2D slice, got shape {pixels.shape}")
    batch = pixels[None, None].astype(np.float32)
    return forward_batch(params, batch)[0]


def forward_training(params: ModelParams, batch: np.ndarray):
    """Like forward_batch but also returns the cache consumed by backward_training."""
    if batch.ndim != 4 or batch.shape[1] != params.arch.in_channels:
        raise DataError(f"batch shape {batch.shape} incompatible with architecture")
    return _forward(params, batch, keep_cache=True)


def _bias_grad(g: np.ndarray, dtype) -> np.ndarray:
    return g.sum(axis=(0, 2, 3), dtype=np.float64).astype(dtype)


def backward_training(params: ModelParams, cache, grad_fg: np.ndarray) -> dict[str, np.ndarray]:
    """Exact parameter gradients given dLoss/d(foreground probability)."""
    arch = params.arch
    t = params.tensors
    stem_in, block_caches, cache_nf, rf, probs = cache
    dtype = probs.dtype
    grads: dict[str, np.ndarray] = {}

    grad_probs = np.zeros_like(probs)
    grad_probs[:, 1] = grad_fg
    grad_logits = softmax2_backward(probs, grad_probs)
    grads["head.b"] = _bias_grad(grad_logits, dtype)
    grad_rf, grads["head.w"] = conv2d_backward(rf, t["head.w"], arch.head_spec(), grad_logits)
    grad_nf = relu_backward(rf, grad_rf)
    g, grads["final.n.scale"], grads["final.n.shift"] = instance_norm_backward(cache_nf, grad_nf)

    for blk, bc in zip(reversed(arch.blocks()), reversed(block_caches)):
        x_in, cache_n1, r1, cache_n2, r2 = bc
        grads[f"{blk.name}.c2.b"] = _bias_grad(g, dtype)
        grad_r2, grads[f"{blk.name}.c2.w"] = conv2d_backward(r2, t[f"{blk.name}.c2.w"], blk.conv2, g)
        grad_n2 = relu_backward(r2, grad_r2)
        grad_c1, grads[f"{blk.name}.n2.scale"], grads[f"{blk.name}.n2.shift"] = (
            instance_norm_backward(cache_n2, grad_n2)
        )
        grads[f"{blk.name}.c1.b"] = _bias_grad(grad_c1, dtype)
        grad_r1, grads[f"{blk.name}.c1.w"] = conv2d_backward(r1, t[f"{blk.name}.c1.w"], blk.conv1, grad_c1)
        grad_n1 = relu_backward(r1, grad_r1)
        grad_x, grads[f"{blk.name}.n1.scale"], grads[f"{blk.name}.n1.shift"] = (
            instance_norm_backward(cache_n1, grad_n1)
        )
        if blk.has_projection:
            grad_skip, grads[f"{blk.name}.proj.w"] = conv2d_backward(
                x_in, t[f"{blk.name}.proj.w"], blk.projection, g
            )
            g = grad_x + grad_skip
        else:
            g = grad_x + g

    grads["stem.b"] = _bias_grad(g, dtype)
    _, grads["stem.w"] = conv2d_backward(stem_in, t["stem.w"], arch.stem_spec(), g)
    return grads


def lung_mask_from_prob(prob: ProbMap, tau_lung: float = 0.5) -> BinaryMask:
    """Threshold a lung probability map at tau (voxels with p >= tau are lung)."""
    if not 0.0 < tau_lung < 1.0:
        raise DataError(f"tau_lung must be in (0, 1), got {tau_lung}")
    return BinaryMask(prob.geometry, prob.voxels >= tau_lung)


def save_params(params: ModelParams, path) -> None:
    """Write manifest + float32 blob; load_params(path) restores bit-exactly."""
    path = Path(path)
    blob_name = path.stem + ".bin"
    lines = [f"fingerprint: {params.fingerprint}", f"data: {blob_name}"]
    chunks = []
    offset = 0
    for name, shape in params.arch.parameter_shapes().items():
        arr = params.tensors[name]
        if tuple(arr.shape) != shape:
            raise DataError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")
        payload = np.ascontiguousarray(arr.astype("<f4")).tobytes()
        dims = "x".join(str(d) for d in shape)
        lines.append(f"tensor: {name} {dims} {offset}")
        chunks.append(payload)
        offset += len(payload)
    path.write_text("\n".join(lines) + "\n")
    (path.parent / blob_name).write_bytes(b"".join(chunks))


def load_params(path, arch: ArchitectureSpec = DEFAULT_ARCH) -> ModelParams:
    """Load a weight file, verifying fingerprint and every tensor shape/extent."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"weight manifest not found: {path}")
    fingerprint = None
    blob_name = None
    entries: list[tuple[str, tuple[int, ...], int]] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("fingerprint:"):
            fingerprint = line.split(":", 1)[1].strip()
        elif line.startswith("data:"):
            blob_name = line.split(":", 1)[1].strip()
        elif line.startswith("tensor:"):
            parts = line.split(":", 1)[1].split()
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: malformed tensor line {raw!r}")
            name, dims, offset = parts
            try:
                shape = tuple(int(d) for d in dims.split("x"))
                entries.append((name, shape, int(offset)))
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed tensor line {raw!r}") from None
        else:
            raise DataError(f"{path}:{lineno}: unrecognized manifest line {raw!r}")
    if fingerprint is None or blob_name is None or not entries:
        raise DataError(f"{path}: manifest missing fingerprint, data, or tensor lines")
    if fingerprint != arch.fingerprint():
        raise DataError(
            f"architecture fingerprint mismatch: file has {fingerprint!r}, "
            f"expected {arch.fingerprint()!r}"
        )

    expected = arch.parameter_shapes()
    names = [name for name, _, _ in entries]
    if names != list(expected):
        raise DataError(f"{path}: tensor list does not match the architecture")
    blob = (path.parent / blob_name).read_bytes()
    tensors: dict[str, np.ndarray] = {}
    for name, shape, offset in entries:
        if shape != expected[name]:
            raise DataError(f"{path}: tensor {name!r} has shape {shape}, expected {expected[name]}")
        nbytes = int(np.prod(shape)) * 4
        if offset < 0 or offset + nbytes > len(blob):
            raise DataError(f"{path}: blob truncated for tensor {name!r}")
        flat = np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape)), offset=offset)
        tensors[name] = flat.reshape(shape).copy()
    return ModelParams(arch, tensors)
