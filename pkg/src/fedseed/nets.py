"""Encoder-decoder segmentation networks and parameter exchange.

Two roles share one architecture family: the compact *student* (the model
that travels between clients and server) and a wider *teacher* that takes
an extra bounding-box prompt channel next to the image. Both are plain
conv+relu encoder-decoders with skip connections and a single-channel
logits head; no normalization layers, no attention.

Parameters cross module boundaries as `ParamVector`s: named, ordered,
flat float32 buffers. The binary checkpoint format is fixed and
little-endian so files are bit-reproducible.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, ContractError, ShapeError

CHECKPOINT_MAGIC = b"FEDSEED1"


@dataclass(frozen=True)
class ParamEntry:
    name: str
    values: np.ndarray  # float32, shape preserved

    @property
    def shape(self):
        return self.values.shape


class ParamVector:
    """Ordered, named collection of parameter arrays.

    Immutable by convention once constructed; `fingerprint()` identifies
    the architecture (names + shapes in order) independent of values.
    """

    def __init__(self, entries):
        self.entries = list(entries)
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ContractError("ParamVector entry names must be unique")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def fingerprint(self):
        return tuple((e.name, tuple(e.shape)) for e in self.entries)

    def total_parameters(self):
        return int(sum(e.values.size for e in self.entries))

    def copy(self):
        return ParamVector(
            ParamEntry(e.name, e.values.copy()) for e in self.entries
        )

    def allclose(self, other, atol=0.0):
        if self.fingerprint() != other.fingerprint():
            return False
        return all(
            np.allclose(a.values, b.values, atol=atol, rtol=0.0)
            for a, b in zip(self.entries, other.entries)
        )

    def equal(self, other):
        return self.fingerprint() == other.fingerprint() and all(
            np.array_equal(a.values, b.values)
            for a, b in zip(self.entries, other.entries)
        )


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters; the parameter layout is a pure
    function of this record."""

    role: str = "student"
    input_channels: int = 1
    base_width: int = 8
    depth: int = 3

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 1:
            raise ConfigError(f"base_width must be >= 1, got {self.base_width}")
        if self.input_channels < 1:
            raise ConfigError(
                f"input_channels must be >= 1, got {self.input_channels}"
            )

    def level_widths(self):
        return [self.base_width * (1 << i) for i in range(self.depth + 1)]


STUDENT_SPEC = ModelSpec(role="student", input_channels=1, base_width=8, depth=3)
TEACHER_SPEC = ModelSpec(role="teacher", input_channels=2, base_width=24, depth=3)


def _layer_plan(spec):
    """Ordered (name, out_ch, in_ch, kernel_size) conv layer list."""
    widths = spec.level_widths()
    plan = []
    prev = spec.input_channels
    for i in range(spec.depth):
        plan.append((f"enc{i}", widths[i], prev, 3))
        prev = widths[i]
    plan.append(("bottleneck", widths[spec.depth], prev, 3))
    for i in reversed(range(spec.depth)):
        plan.append((f"dec{i}", widths[i], widths[i + 1] + widths[i], 3))
    plan.append(("head", 1, widths[0], 1))
    return plan


def parameter_count(spec):
    """Closed-form parameter count for a ModelSpec."""
    return sum(o * c * k * k + o for _, o, c, k in _layer_plan(spec))


class Model:
    """A concrete network: ModelSpec plus its parameter tensors."""

    def __init__(self, spec, params):
        self.spec = spec
        self.params = params  # ordered dict name -> Tensor

    def parameters(self):
        return self.params

    def set_trainable(self, flag):
        for p in self.params.values():
            p.requires_grad = bool(flag)

    def forward(self, batch):
        """Run the network on an NCHW batch, returning raw logits.

        The head applies no activation; losses and metrics apply
        sigmoid themselves. Internally the activations run channel-last
        (the faster memory layout for the conv GEMMs); layout changes
        happen once at each boundary.
        """
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        n, c, h, w = x.shape
        if c != self.spec.input_channels:
            raise ShapeError(
                f"model expects {self.spec.input_channels} input channels, got {c}"
            )
        div = 1 << self.spec.depth
        if h % div or w % div:
            raise ShapeError(
                f"input {h}x{w} not divisible by 2^depth={div}"
            )
        x = ad.to_nhwc(x)
        skips = []
        for i in range(self.spec.depth):
            x = ad.relu(self._conv(f"enc{i}", x, padding=1))
            skips.append(x)
            x = ad.maxpool2d_nhwc(x, 2)
        x = ad.relu(self._conv("bottleneck", x, padding=1))
        for i in reversed(range(self.spec.depth)):
            x = ad.upsample_nearest2d_nhwc(x, 2)
            x = ad.concat_channels_nhwc(x, skips[i])
            x = ad.relu(self._conv(f"dec{i}", x, padding=1))
        return ad.to_nchw(self._conv("head", x, padding=0))

    def _conv(self, name, x, padding):
        return ad.conv2d_nhwc(
            x, self.params[f"{name}.weight"], self.params[f"{name}.bias"],
            stride=1, padding=padding,
        )


def build_model(spec, seed):
    """Instantiate a model with fan-in-scaled uniform weights, zero biases.

    The draw order follows the layer plan, so (spec, seed) fully
    determines every value.
    """
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x6D6F64)))
    params = {}
    for name, out_ch, in_ch, k in _layer_plan(spec):
        fan_in = in_ch * k * k
        limit = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-limit, limit, size=(out_ch, in_ch, k, k)).astype(np.float32)
        params[f"{name}.weight"] = Tensor(w, requires_grad=True)
        params[f"{name}.bias"] = Tensor(
            np.zeros(out_ch, dtype=np.float32), requires_grad=True
        )
    return Model(spec, params)


def export_params(model):
    return ParamVector(
        ParamEntry(name, t.data.copy()) for name, t in model.params.items()
    )


def import_params(model, pv):
    """Load a ParamVector into a model; names/shapes/order must match."""
    names = list(model.params.keys())
    if len(pv) != len(names):
        raise ContractError(
            f"import_params: model has {len(names)} entries, vector has {len(pv)}"
        )
    for expected, entry in zip(names, pv):
        if entry.name != expected:
            raise ContractError(
                f"import_params: expected entry '{expected}', got '{entry.name}'"
            )
        tgt = model.params[expected]
        if entry.values.shape != tgt.data.shape:
            raise ContractError(
                f"import_params: entry '{expected}' has shape {entry.values.shape}, "
                f"model expects {tgt.data.shape}"
            )
    for name, entry in zip(names, pv):
        model.params[name].data = entry.values.astype(np.float32, copy=True)


def save_checkpoint(pv, path):
    """Write a ParamVector in the fixed little-endian binary layout."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(pv))]
    for entry in pv:
        name = entry.name.encode("utf-8")
        shape = entry.values.shape
        chunks.append(struct.pack("<H", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<B", len(shape)))
        chunks.append(struct.pack(f"<{len(shape)}I", *shape))
        chunks.append(entry.values.astype("<f4", copy=False).tobytes())
    blob = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) or blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: unknown checkpoint magic")
    off = len(CHECKPOINT_MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        piece = blob[off : off + n]
        off += n
        return piece

    (count,) = struct.unpack("<I", take(4))
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n_values = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(4 * n_values), dtype="<f4").reshape(shape)
        entries.append(ParamEntry(name, values.astype(np.float32)))
    if off != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after last entry")
    return ParamVector(entries)
