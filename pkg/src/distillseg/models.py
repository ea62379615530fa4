"""Segmentation U-Net, pseudo-label quality classifier, and checkpoint I/O.

Both networks are built from the autodiff primitives with deterministic
He-normal initialization drawn from a counter-based (Philox) generator, so
two builds with the same seed are bitwise identical.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    concat_channels,
    conv2d,
    linear,
    max_pool2d,
    mean_spatial,
    relu,
    upsample_nearest_2x,
)

CKPT_SEPARATOR = b"\n---\n"


def _arch_hash(desc: dict) -> str:
    payload = json.dumps(desc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def _he_conv(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    std = np.float32(np.sqrt(2.0 / (cin * k * k)))
    return rng.standard_normal((cout, cin, k, k), dtype=np.float32) * std


class _ParamBag:
    """Insertion-ordered named parameter map shared by both model kinds."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def new_conv(self, rng, name: str, cin: int, cout: int, k: int) -> tuple[Tensor, Tensor]:
        w = Tensor(_he_conv(rng, cout, cin, k), requires_grad=True)
        b = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
        self.params[f"{name}.weight"] = w
        self.params[f"{name}.bias"] = b
        return w, b

    def new_linear(self, rng, name: str, cin: int, cout: int) -> tuple[Tensor, Tensor]:
        std = np.float32(np.sqrt(2.0 / cin))
        w = Tensor(rng.standard_normal((cin, cout), dtype=np.float32) * std, requires_grad=True)
        b = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
        self.params[f"{name}.weight"] = w
        self.params[f"{name}.bias"] = b
        return w, b


class SegModel:
    """Encoder-decoder segmentation net with skip concatenation.

    ``depth`` encoder stages of (conv, conv, pool) with doubling widths, a
    double-conv bottleneck, mirrored (upsample, concat, conv, conv) decoder
    stages, and a 1x1 head emitting ``num_classes`` logit channels. Spatial
    size is preserved; inputs must be divisible by 2**depth.
    """

    def __init__(self, channels_base: int = 8, depth: int = 2, num_classes: int = 4, seed: int = 0):
        if depth < 1:
            raise ValueError(f"depth must be >= 1, got {depth}")
        if channels_base < 1:
            raise ValueError(f"channels_base must be >= 1, got {channels_base}")
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        self.channels_base = channels_base
        self.depth = depth
        self.num_classes = num_classes
        self.seed = seed
        self.arch_hash = _arch_hash(
            {"kind": "seg", "base": channels_base, "depth": depth, "num_classes": num_classes}
        )
        rng = np.random.Generator(np.random.Philox(seed))
        bag = _ParamBag()
        cin = 1
        for s in range(depth):
            cout = channels_base * (2**s)
            bag.new_conv(rng, f"enc{s}.conv1", cin, cout, 3)
            bag.new_conv(rng, f"enc{s}.conv2", cout, cout, 3)
            cin = cout
        cmid = channels_base * (2**depth)
        bag.new_conv(rng, "bottleneck.conv1", cin, cmid, 3)
        bag.new_conv(rng, "bottleneck.conv2", cmid, cmid, 3)
        cin = cmid
        for s in reversed(range(depth)):
            skip = channels_base * (2**s)
            bag.new_conv(rng, f"dec{s}.conv1", cin + skip, skip, 3)
            bag.new_conv(rng, f"dec{s}.conv2", skip, skip, 3)
            cin = skip
        bag.new_conv(rng, "head", cin, num_classes, 1)
        self.params = bag.params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def _p(self, name: str) -> tuple[Tensor, Tensor]:
        return self.params[f"{name}.weight"], self.params[f"{name}.bias"]

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected [N,1,H,W] input, got {list(x.shape)}")
        h, w = x.shape[2], x.shape[3]
        factor = 2**self.depth
        if h % factor or w % factor:
            raise ValueError(
                f"input spatial size {h}x{w} must be divisible by {factor} (depth {self.depth})"
            )

        def block(t: Tensor, name: str) -> Tensor:
            t = relu(conv2d(t, *self._p(f"{name}.conv1"), padding=1))
            return relu(conv2d(t, *self._p(f"{name}.conv2"), padding=1))

        skips = []
        t = x
        for s in range(self.depth):
            t = block(t, f"enc{s}")
            skips.append(t)
            t = max_pool2d(t, 2)
        t = block(t, "bottleneck")
        for s in reversed(range(self.depth)):
            t = upsample_nearest_2x(t)
            t = concat_channels(t, skips[s])
            t = block(t, f"dec{s}")
        return conv2d(t, *self._p("head"))


class QualityModel:
    """Binary quality head over (image slice + K one-hot mask channels).

    Three conv/pool stages, global average pooling, and an affine map to a
    single logit whose sigmoid is the probability the mask is "good".
    """

    POOLS = 3

    def __init__(self, num_classes: int, seed: int = 0, width: int = 16):
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        self.num_classes = num_classes
        self.width = width
        self.seed = seed
        self.in_channels = 1 + num_classes
        self.arch_hash = _arch_hash(
            {"kind": "quality", "num_classes": num_classes, "width": width}
        )
        rng = np.random.Generator(np.random.Philox(seed))
        bag = _ParamBag()
        bag.new_conv(rng, "trunk.conv1", self.in_channels, width, 3)
        bag.new_conv(rng, "trunk.conv2", width, 2 * width, 3)
        bag.new_conv(rng, "trunk.conv3", 2 * width, 2 * width, 3)
        bag.new_linear(rng, "head", 2 * width, 1)
        self.params = bag.params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def _p(self, name: str) -> tuple[Tensor, Tensor]:
        return self.params[f"{name}.weight"], self.params[f"{name}.bias"]

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected [N,{self.in_channels},H,W] input (image + {self.num_classes} "
                f"mask channels), got {list(x.shape)}"
            )
        h, w = x.shape[2], x.shape[3]
        factor = 2**self.POOLS
        if h % factor or w % factor:
            raise ValueError(f"input spatial size {h}x{w} must be divisible by {factor}")
        t = x
        for name in ("trunk.conv1", "trunk.conv2", "trunk.conv3"):
            t = max_pool2d(relu(conv2d(t, *self._p(name), padding=1)), 2)
        return linear(mean_spatial(t), *self._p("head"))


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    arch_hash: str
    step: int
    seed: int
    tensors: dict[str, np.ndarray]


def checkpoint_of(model, step: int = 0) -> Checkpoint:
    tensors = {name: p.data.copy() for name, p in model.params.items()}
    return Checkpoint(arch_hash=model.arch_hash, step=step, seed=model.seed, tensors=tensors)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "version": 1,
        "arch_hash": ckpt.arch_hash,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "tensors": entries,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return head + CKPT_SEPARATOR + b"".join(blobs)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = raw.find(CKPT_SEPARATOR)
    if sep < 0:
        raise ValueError(f"{path}: missing manifest separator")
    try:
        manifest = json.loads(raw[:sep].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: unreadable manifest: {exc}") from exc
    if manifest.get("version") != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    blob = raw[sep + len(CKPT_SEPARATOR) :]
    tensors: dict[str, np.ndarray] = {}
    expected = 0
    for entry in manifest["tensors"]:
        shape = tuple(int(v) for v in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if entry["offset"] != expected:
            raise ValueError(
                f"{path}: tensor '{entry['name']}' at offset {entry['offset']}, expected {expected}"
            )
        expected += count * 4
        if expected > len(blob):
            raise ValueError(
                f"{path}: truncated blob: need {expected} bytes for '{entry['name']}', "
                f"have {len(blob)}"
            )
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"]).reshape(shape)
        tensors[entry["name"]] = arr.copy()
    if expected != len(blob):
        raise ValueError(f"{path}: blob has {len(blob)} bytes, manifest accounts for {expected}")
    return Checkpoint(
        arch_hash=manifest["arch_hash"],
        step=int(manifest["step"]),
        seed=int(manifest["seed"]),
        tensors=tensors,
    )


def init_from_checkpoint(model, ckpt: Checkpoint) -> None:
    """Copy checkpoint parameters into the model bitwise.

    Optimizer state is never part of a checkpoint; callers build a fresh
    optimizer afterwards.
    """
    if model.arch_hash != ckpt.arch_hash:
        raise ValueError(
            f"architecture hash mismatch: model {model.arch_hash} vs checkpoint {ckpt.arch_hash}"
        )
    missing = set(model.params) - set(ckpt.tensors)
    if missing:
        raise ValueError(f"checkpoint is missing parameters: {sorted(missing)}")
    extra = set(ckpt.tensors) - set(model.params)
    if extra:
        raise ValueError(f"checkpoint has unknown parameters: {sorted(extra)}")
    for name, p in model.params.items():
        arr = ckpt.tensors[name]
        if arr.shape != p.data.shape:
            raise ValueError(
                f"parameter '{name}' shape mismatch: model {list(p.data.shape)} "
                f"vs checkpoint {list(arr.shape)}"
            )
    for name, p in model.params.items():
        p.data = np.ascontiguousarray(ckpt.tensors[name], dtype=np.float32).copy()
        p.grad = None


def parameter_checksum(model) -> str:
    h = hashlib.sha256()
    for name, p in model.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return h.hexdigest()
