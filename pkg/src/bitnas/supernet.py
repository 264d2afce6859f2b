"""Stochastic super net over per-block precision candidates.

Each searchable position (a residual basic block) holds K parallel candidate
operators with their own latent weights; candidate outputs are mixed by soft
masks drawn from a Gumbel-Softmax over the block's architecture parameters
theta.  Hard architectures are sampled from softmax(theta) and materialized
as standalone child networks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .engine import Tensor
from .engine import ops
from .quantize import (
    FULL_PRECISION, VALID_BITS, ALPHA_INIT,
    dorefa_quantize, pact_activation,
)

mix_block_outputs = ops.mix

SKIP_KIND = "skip"
FULL_KIND = "full"
QUANT_KIND = "quantized"


# --------------------------------------------------------------------------
# search-space description
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PrecisionCandidate:
    """One edge option: quantized (w_bits, a_bits), full precision, or skip."""
    kind: str
    w_bits: Optional[int] = None
    a_bits: Optional[int] = None

    def __post_init__(self):
        if self.kind not in (QUANT_KIND, FULL_KIND, SKIP_KIND):
            raise ValueError(f"unknown candidate kind {self.kind!r}")
        if self.kind == QUANT_KIND:
            if self.w_bits not in VALID_BITS or self.a_bits not in VALID_BITS:
                raise ValueError(
                    f"quantized candidate bits must be in {VALID_BITS}, "
                    f"got ({self.w_bits}, {self.a_bits})")
        elif self.w_bits is not None or self.a_bits is not None:
            raise ValueError(f"{self.kind} candidate carries no bit-widths")

    @staticmethod
    def quantized(w_bits: int, a_bits: int) -> "PrecisionCandidate":
        return PrecisionCandidate(QUANT_KIND, w_bits, a_bits)

    @staticmethod
    def full() -> "PrecisionCandidate":
        return PrecisionCandidate(FULL_KIND)

    @staticmethod
    def skip() -> "PrecisionCandidate":
        return PrecisionCandidate(SKIP_KIND)

    def effective_bits(self) -> Tuple[int, int]:
        """(weight-bit, act-bit) as used by the cost models; skip is (0, 0)."""
        if self.kind == SKIP_KIND:
            return 0, 0
        if self.kind == FULL_KIND:
            return FULL_PRECISION, FULL_PRECISION
        return self.w_bits, self.a_bits

    def to_json(self) -> dict:
        return {"kind": self.kind, "w_bits": self.w_bits, "a_bits": self.a_bits}

    @staticmethod
    def from_json(obj: dict) -> "PrecisionCandidate":
        return PrecisionCandidate(obj["kind"], obj.get("w_bits"), obj.get("a_bits"))


@dataclass(frozen=True)
class BlockSpec:
    """A searchable residual block position: two 3x3 convs plus shortcut."""
    id: str
    in_channels: int
    out_channels: int
    stride: int
    candidates: Tuple[PrecisionCandidate, ...]

    def __post_init__(self):
        if len(self.candidates) < 2:
            raise ValueError(f"block {self.id!r} needs at least 2 candidates")
        if self.skip_legal():
            return
        for c in self.candidates:
            if c.kind == SKIP_KIND:
                raise ValueError(
                    f"block {self.id!r} (stride {self.stride}, "
                    f"{self.in_channels}->{self.out_channels}) cannot offer skip: "
                    "input and output shapes differ")

    def skip_legal(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


@dataclass(frozen=True)
class SuperNetSpec:
    """Macro-architecture: fixed stem, searchable blocks, fixed classifier."""
    input_shape: Tuple[int, int, int]
    num_classes: int
    stem_channels: int
    blocks: Tuple[BlockSpec, ...]

    def __post_init__(self):
        c = self.stem_channels
        for b in self.blocks:
            if b.in_channels != c:
                raise ValueError(
                    f"block {b.id!r} expects {b.in_channels} input channels "
                    f"but receives {c}")
            c = b.out_channels

    @property
    def final_channels(self) -> int:
        return self.blocks[-1].out_channels if self.blocks else self.stem_channels

    def block_input_sizes(self) -> List[Tuple[int, int]]:
        """Spatial (H, W) seen by each block, after the stride-1 stem."""
        h, w = self.input_shape[1], self.input_shape[2]
        sizes = []
        for b in self.blocks:
            sizes.append((h, w))
            h = (h + 2 - 3) // b.stride + 1
            w = (w + 2 - 3) // b.stride + 1
        return sizes


def resnet20_cifar_spec(candidates: Sequence[PrecisionCandidate] = None) -> SuperNetSpec:
    """Nine basic blocks in three groups of channels 16/32/64 on 32x32x3 input."""
    blocks = []
    cin = 16
    for gi, cout in enumerate((16, 32, 64)):
        for bi in range(3):
            stride = 2 if (gi > 0 and bi == 0) else 1
            cand = tuple(candidates) if candidates else default_weight_act_menu(
                skip_ok=(stride == 1 and cin == cout))
            cand = tuple(c for c in cand
                         if c.kind != SKIP_KIND or (stride == 1 and cin == cout))
            blocks.append(BlockSpec(f"g{gi + 1}b{bi + 1}", cin, cout, stride, cand))
            cin = cout
    return SuperNetSpec((3, 32, 32), 10, 16, tuple(blocks))


def default_weight_act_menu(skip_ok: bool = False) -> Tuple[PrecisionCandidate, ...]:
    """Per-block precision menu: the paired (w, a) tuples plus full precision."""
    menu = [PrecisionCandidate.quantized(w, a)
            for w, a in ((1, 4), (2, 4), (3, 3), (4, 4), (8, 8))]
    menu.append(PrecisionCandidate.full())
    if skip_ok:
        menu.append(PrecisionCandidate.skip())
    return tuple(menu)


def cifar_weight_menu(skip_ok: bool = False) -> Tuple[PrecisionCandidate, ...]:
    """Weight-only menu: k-bit weights with full-precision activations."""
    menu = [PrecisionCandidate.quantized(b, FULL_PRECISION) for b in (1, 2, 3, 4, 8)]
    menu.append(PrecisionCandidate.full())
    if skip_ok:
        menu.append(PrecisionCandidate.skip())
    return tuple(menu)


# --------------------------------------------------------------------------
# runtime modules
# --------------------------------------------------------------------------

class Module:
    """Base with recursive parameter/buffer discovery by attribute scan."""

    training: bool = True

    def _sub(self):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
        for name, sub in self._sub():
            yield from sub.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, np.ndarray):
                yield prefix + name, val
        for name, sub in self._sub():
            yield from sub.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True):
        self.training = mode
        for _, sub in self._sub():
            sub.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        for name, arr in state.items():
            if name in own:
                own[name].data = np.asarray(arr, dtype=own[name].dtype).reshape(own[name].shape)
            elif name in bufs:
                bufs[name][...] = arr
            else:
                raise KeyError(f"unexpected state entry {name!r}")
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state missing entries: {sorted(missing)}")


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, ksize: int, stride: int, padding: int,
                 rng: np.random.Generator, w_bits: int = FULL_PRECISION,
                 dtype=np.float32):
        std = math.sqrt(2.0 / (cin * ksize * ksize))
        self.weight = Tensor(rng.normal(0.0, std, (cout, cin, ksize, ksize)).astype(dtype),
                             requires_grad=True)
        self.stride = stride
        self.padding = padding
        self.w_bits = w_bits

    def __call__(self, x: Tensor) -> Tensor:
        w = self.weight
        if self.w_bits != FULL_PRECISION:
            w = dorefa_quantize(w, self.w_bits)
        return ops.conv2d(x, w, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float32):
        self.scale = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(x, self.scale, self.shift,
                               self.running_mean, self.running_var,
                               training=self.training)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator, dtype=np.float32):
        std = math.sqrt(1.0 / fin)
        self.weight = Tensor(rng.normal(0.0, std, (fout, fin)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(fout, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Activation(Module):
    """ReLU for full-precision sites, PACT with learnable alpha otherwise."""

    def __init__(self, a_bits: int, dtype=np.float32):
        self.a_bits = a_bits
        if a_bits != FULL_PRECISION:
            self.alpha = Tensor(np.asarray(ALPHA_INIT, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if self.a_bits == FULL_PRECISION:
            return x.relu()
        return pact_activation(x, self.alpha, self.a_bits)


class BasicBlock(Module):
    """Residual block: conv-bn-act, conv-bn, paramless shortcut, final act.

    Both convs share the candidate's precision; each activation site owns its
    clipping bound.
    """

    def __init__(self, bspec: BlockSpec, cand: PrecisionCandidate,
                 rng: np.random.Generator, dtype=np.float32):
        if cand.kind == SKIP_KIND:
            raise ValueError("skip candidates have no operator")
        w_bits, a_bits = cand.effective_bits()
        cin, cout, s = bspec.in_channels, bspec.out_channels, bspec.stride
        self.conv1 = Conv2d(cin, cout, 3, s, 1, rng, w_bits, dtype)
        self.bn1 = BatchNorm2d(cout, dtype)
        self.act1 = Activation(a_bits, dtype)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, rng, w_bits, dtype)
        self.bn2 = BatchNorm2d(cout, dtype)
        self.act2 = Activation(a_bits, dtype)
        self.projects = (s != 1 or cin != cout)
        self.stride = s
        self.cout = cout

    def __call__(self, x: Tensor) -> Tensor:
        h = self.act1(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        sc = ops.downsample_pad(x, self.stride, self.cout) if self.projects else x
        return self.act2(h + sc)


class _Skip(Module):
    def __call__(self, x: Tensor) -> Tensor:
        return x


class ChoiceBlock(Module):
    """K parallel candidate operators plus this position's theta vector."""

    def __init__(self, bspec: BlockSpec, rng: np.random.Generator, dtype=np.float32):
        self.block_spec = bspec
        k = len(bspec.candidates)
        # all-zero theta = uniform prior over candidates
        self.theta = Tensor(np.zeros(k, dtype=dtype), requires_grad=True)
        self.candidates = [
            _Skip() if c.kind == SKIP_KIND else BasicBlock(bspec, c, rng, dtype)
            for c in bspec.candidates
        ]

    def __call__(self, x: Tensor, mask: Tensor) -> Tensor:
        outs = [c(x) for c in self.candidates]
        return mix_block_outputs(mask, outs)


class SuperNet(Module):
    """Stem conv + choice blocks + global pool + linear classifier."""

    def __init__(self, spec: SuperNetSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        cin = spec.input_shape[0]
        self.stem_conv = Conv2d(cin, spec.stem_channels, 3, 1, 1, rng, dtype=dtype)
        self.stem_bn = BatchNorm2d(spec.stem_channels, dtype)
        self.choice_blocks = [ChoiceBlock(b, rng, dtype) for b in spec.blocks]
        self.fc = Linear(spec.final_channels, spec.num_classes, rng, dtype)

    def __call__(self, x: Tensor, masks: Sequence[Tensor]) -> Tensor:
        if len(masks) != len(self.choice_blocks):
            raise ValueError(
                f"{len(masks)} masks for {len(self.choice_blocks)} choice blocks")
        h = self.stem_bn(self.stem_conv(x)).relu()
        for cb, m in zip(self.choice_blocks, masks):
            h = cb(h, m)
        return self.fc(ops.global_avg_pool(h))

    def thetas(self) -> List[Tensor]:
        return [cb.theta for cb in self.choice_blocks]

    def theta_arrays(self) -> List[np.ndarray]:
        return [cb.theta.data.copy() for cb in self.choice_blocks]

    def weight_parameters(self) -> List[Tensor]:
        thetas = {id(t) for t in self.thetas()}
        return [p for p in self.parameters() if id(p) not in thetas]

    def one_hot_masks(self, arch: "Architecture", dtype=np.float32) -> List[Tensor]:
        masks = []
        for cb, idx in zip(self.choice_blocks, arch.choices):
            m = np.zeros(len(cb.block_spec.candidates), dtype=dtype)
            m[idx] = 1.0
            masks.append(Tensor(m))
        return masks


# --------------------------------------------------------------------------
# distributions over candidates
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TemperatureSchedule:
    t0: float
    eta: float

    def __post_init__(self):
        if self.t0 <= 0 or self.eta < 0:
            raise ValueError("need T0 > 0 and eta >= 0")


def temperature_at(schedule: TemperatureSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return schedule.t0 * math.exp(-schedule.eta * epoch)


def edge_probabilities(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if not np.isfinite(theta).all():
        raise ValueError("theta contains non-finite entries")
    z = theta - theta.max()
    e = np.exp(z)
    return e / e.sum()


GUMBEL_EPS = 1e-12


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = np.clip(rng.random(shape), GUMBEL_EPS, 1.0 - GUMBEL_EPS)
    return -np.log(-np.log(u))


def sample_soft_masks(theta: Tensor, tau: float, rng: np.random.Generator,
                      n: Optional[int] = None) -> Tensor:
    """Gumbel-Softmax draw: softmax((theta + g) / tau).

    Returns [K] for one shared draw, or [n, K] with one draw per example.
    The noise enters as a constant so gradients flow to theta only.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    k = theta.shape[-1]
    shape = (k,) if n is None else (n, k)
    g = Tensor(gumbel_noise(rng, shape).astype(theta.dtype))
    return ops.softmax((theta + g) * (1.0 / tau))


# --------------------------------------------------------------------------
# hard architectures
# --------------------------------------------------------------------------

@dataclass
class Architecture:
    """One-hot selection per choice block, with sampling provenance."""
    choices: Tuple[int, ...]
    meta: dict = field(default_factory=dict)

    def encoding(self, spec: SuperNetSpec) -> str:
        parts = []
        for b, idx in zip(spec.blocks, self.choices):
            c = b.candidates[idx]
            if c.kind == SKIP_KIND:
                parts.append("skip")
            elif c.kind == FULL_KIND:
                parts.append("full")
            else:
                parts.append(f"w{c.w_bits}a{c.a_bits}")
        return "-".join(parts)


def validate_architecture(spec: SuperNetSpec, arch: Architecture):
    if len(arch.choices) != len(spec.blocks):
        raise ValueError(
            f"architecture has {len(arch.choices)} choices for "
            f"{len(spec.blocks)} blocks")
    for b, idx in zip(spec.blocks, arch.choices):
        if not 0 <= idx < len(b.candidates):
            raise ValueError(f"block {b.id!r}: choice {idx} out of range")
        if b.candidates[idx].kind == SKIP_KIND and not b.skip_legal():
            raise ValueError(f"block {b.id!r}: skip selected but shapes differ")


def arch_to_json(spec: SuperNetSpec, arch: Architecture) -> dict:
    validate_architecture(spec, arch)
    return {
        "blocks": [
            {"id": b.id, "choice": b.candidates[idx].to_json()}
            for b, idx in zip(spec.blocks, arch.choices)
        ],
        "meta": dict(arch.meta),
    }


def arch_from_json(spec: SuperNetSpec, obj: dict) -> Architecture:
    blocks = obj["blocks"]
    if len(blocks) != len(spec.blocks):
        raise ValueError(
            f"serialized architecture has {len(blocks)} blocks, spec has "
            f"{len(spec.blocks)}")
    choices = []
    for b, entry in zip(spec.blocks, blocks):
        if entry["id"] != b.id:
            raise ValueError(f"block id mismatch: {entry['id']!r} vs {b.id!r}")
        cand = PrecisionCandidate.from_json(entry["choice"])
        try:
            choices.append(b.candidates.index(cand))
        except ValueError:
            raise ValueError(
                f"block {b.id!r}: candidate {cand} not in this block's menu")
    arch = Architecture(tuple(choices), dict(obj.get("meta", {})))
    validate_architecture(spec, arch)
    return arch


def sample_architecture(spec: SuperNetSpec, thetas: Sequence[np.ndarray],
                        rng: np.random.Generator, meta: Optional[dict] = None) -> Architecture:
    """Draw one candidate per block from softmax(theta), independently."""
    choices = []
    for b, th in zip(spec.blocks, thetas):
        p = edge_probabilities(th)
        choices.append(int(rng.choice(len(b.candidates), p=p)))
    return Architecture(tuple(choices), dict(meta or {}))


# --------------------------------------------------------------------------
# child materialization
# --------------------------------------------------------------------------

class ChildNet(Module):
    """The selected candidate per position, as a plain sequential network."""

    def __init__(self, spec: SuperNetSpec, arch: Architecture,
                 rng: np.random.Generator, dtype=np.float32):
        validate_architecture(spec, arch)
        self.spec = spec
        self.arch = arch
        cin = spec.input_shape[0]
        self.stem_conv = Conv2d(cin, spec.stem_channels, 3, 1, 1, rng, dtype=dtype)
        self.stem_bn = BatchNorm2d(spec.stem_channels, dtype)
        self.blocks = [
            _Skip() if b.candidates[idx].kind == SKIP_KIND
            else BasicBlock(b, b.candidates[idx], rng, dtype)
            for b, idx in zip(spec.blocks, arch.choices)
        ]
        self.fc = Linear(spec.final_channels, spec.num_classes, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.stem_bn(self.stem_conv(x)).relu()
        for b in self.blocks:
            h = b(h)
        return self.fc(ops.global_avg_pool(h))


def build_child(spec: SuperNetSpec, arch: Architecture, rng: np.random.Generator,
                copy_from: Optional[SuperNet] = None, dtype=np.float32) -> ChildNet:
    """Fresh-initialized child; with copy_from, selected weights are inherited."""
    child = ChildNet(spec, arch, rng, dtype)
    if copy_from is not None:
        state = dict(child.named_parameters())
        state.update(dict(child.named_buffers()))
        src_params = dict(copy_from.named_parameters())
        src_bufs = dict(copy_from.named_buffers())
        src = {**src_params, **src_bufs}
        for name, dst in state.items():
            src_name = _child_to_supernet_name(name, arch)
            if src_name is None:
                continue
            val = src[src_name]
            arr = val.data if isinstance(val, Tensor) else val
            if isinstance(dst, Tensor):
                dst.data = arr.copy()
            else:
                dst[...] = arr
    return child


def _child_to_supernet_name(name: str, arch: Architecture) -> Optional[str]:
    parts = name.split(".")
    if parts[0] in ("stem_conv", "stem_bn", "fc"):
        return name
    assert parts[0] == "blocks", name
    pos = int(parts[1])
    idx = arch.choices[pos]
    return ".".join(["choice_blocks", str(pos), "candidates", str(idx)] + parts[2:])
