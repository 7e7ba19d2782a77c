"""Shared TDNN encoder with fluent / disfluent / speaker classifier branches.

The encoder stacks five time-delay layers (contexts [t-2..t+2], {t-2,t,t+2},
{t-3,t,t+3}, {t}, {t}), each followed by ReLU and 1-D batch norm, then a
statistical pooling layer that produces the fixed-length embedding. Three
independent heads of three fully connected layers each consume the embedding;
the speaker head can be preceded by a gradient reversal layer.

Class indices are fixed: 0=Fluent, 1=Repetition, 2=Prolongation, 3=Block,
4=Interjection. The disfluent head is 4-way over indices 1..4 (head output
j maps to class j+1); the fluent head is binary with 0=fluent, 1=disfluent.

Inference uses the two-branch rule: if the fluent head picks fluent the clip
is fluent, otherwise the disfluent head's argmax decides; the speaker head is
never consulted. Argmax ties break toward the lower index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import nn
from .errors import EmptySubset, InvalidArch, ShapeMismatch


class StutterClass(IntEnum):
    FLUENT = 0
    REPETITION = 1
    PROLONGATION = 2
    BLOCK = 3
    INTERJECTION = 4


CLASS_NAMES = tuple(c.name.capitalize() for c in StutterClass)
CLASS_INITIALS = ("F", "R", "P", "B", "I")
DISFLUENT_CLASSES = (
    StutterClass.REPETITION,
    StutterClass.PROLONGATION,
    StutterClass.BLOCK,
    StutterClass.INTERJECTION,
)

PARTITIONS = ("encoder", "fluent", "disfluent", "speaker")
# Shorthand used by training schedules: E=encoder, F/D=stutter heads, S=speaker.
PARTITION_SHORT = {"E": "encoder", "F": "fluent", "D": "disfluent", "S": "speaker"}

DEFAULT_CONTEXTS = ((-2, -1, 0, 1, 2), (-2, 0, 2), (-3, 0, 3), (0,), (0,))


@dataclass(frozen=True)
class ArchConfig:
    n_podcasts: int
    n_mfcc: int = 20
    encoder_channels: tuple = (64, 64, 64, 64, 64)
    contexts: tuple = DEFAULT_CONTEXTS
    head_hidden: tuple = (64, 64)
    dropout: float = 0.2
    bn_before_relu: bool = False  # default order: layer -> ReLU -> batch norm

    def validate(self):
        if len(self.encoder_channels) != 5 or len(self.contexts) != 5:
            raise InvalidArch("encoder must have exactly 5 time-delay layers")
        if self.n_podcasts < 2:
            raise InvalidArch(f"speaker head needs >= 2 podcasts, got {self.n_podcasts}")
        if any(c < 1 for c in self.encoder_channels) or self.n_mfcc < 1:
            raise InvalidArch("channel counts must be positive")
        if not (0.0 <= self.dropout < 1.0):
            raise InvalidArch(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def embedding_dim(self) -> int:
        return 2 * self.encoder_channels[-1]

    @property
    def context_span(self) -> int:
        return sum(max(c) - min(c) for c in self.contexts)

    @property
    def min_frames(self) -> int:
        return self.context_span + 1

    def to_dict(self) -> dict:
        return {
            "n_podcasts": self.n_podcasts,
            "n_mfcc": self.n_mfcc,
            "encoder_channels": list(self.encoder_channels),
            "contexts": [list(c) for c in self.contexts],
            "head_hidden": list(self.head_hidden),
            "dropout": self.dropout,
            "bn_before_relu": self.bn_before_relu,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(
            n_podcasts=d["n_podcasts"],
            n_mfcc=d["n_mfcc"],
            encoder_channels=tuple(d["encoder_channels"]),
            contexts=tuple(tuple(c) for c in d["contexts"]),
            head_hidden=tuple(d["head_hidden"]),
            dropout=d["dropout"],
            bn_before_relu=d["bn_before_relu"],
        )


class _EncoderBlock:
    def __init__(self, c_in, c_out, context, bn_before_relu, rng, dtype):
        self.tdnn = nn.TdnnLayer(c_in, c_out, context, rng, dtype)
        self.relu = nn.Relu()
        self.bn = nn.BatchNorm1d(c_out, dtype=dtype)
        self.bn_first = bn_before_relu

    def forward(self, x, train):
        y = self.tdnn.forward(x)
        if self.bn_first:
            return self.relu.forward(self.bn.forward(y, train))
        return self.bn.forward(self.relu.forward(y), train)

    def backward(self, dy):
        if self.bn_first:
            dy = self.bn.backward(self.relu.backward(dy))
        else:
            dy = self.relu.backward(self.bn.backward(dy))
        return self.tdnn.backward(dy)

    def layers(self):
        return {"tdnn": self.tdnn, "bn": self.bn}


class _Head:
    """Three fully connected layers; dropout after the first two."""

    def __init__(self, in_dim, hidden, out_dim, dropout, bn_before_relu, rng, dtype):
        self.fcs = []
        self.bns = []
        self.relus = []
        self.drops = []
        d = in_dim
        for h in hidden:
            self.fcs.append(nn.Linear(d, h, rng, dtype))
            self.relus.append(nn.Relu())
            self.bns.append(nn.BatchNorm1d(h, dtype=dtype))
            self.drops.append(nn.Dropout(dropout))
            d = h
        self.out = nn.Linear(d, out_dim, rng, dtype)
        self.bn_first = bn_before_relu

    def forward(self, z, train, rng):
        y = z
        for fc, relu, bn, drop in zip(self.fcs, self.relus, self.bns, self.drops):
            y = fc.forward(y)
            if self.bn_first:
                y = relu.forward(bn.forward(y, train))
            else:
                y = bn.forward(relu.forward(y), train)
            y = drop.forward(y, train, rng)
        return self.out.forward(y)

    def backward(self, dy):
        dy = self.out.backward(dy)
        for fc, relu, bn, drop in zip(
            reversed(self.fcs), reversed(self.relus), reversed(self.bns), reversed(self.drops)
        ):
            dy = drop.backward(dy)
            if self.bn_first:
                dy = bn.backward(relu.backward(dy))
            else:
                dy = relu.backward(bn.backward(dy))
            dy = fc.backward(dy)
        return dy

    def layers(self):
        named = {}
        for i, (fc, bn) in enumerate(zip(self.fcs, self.bns), start=1):
            named[f"fc{i}"] = fc
            named[f"bn{i}"] = bn
        named["out"] = self.out
        return named


class MultiBranchModel:
    """Encoder plus the three branches, with named, partitioned parameters."""

    def __init__(self, arch: ArchConfig, seed: int, dtype=np.float32):
        arch.validate()
        self.arch = arch
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        self.encoder_blocks = []
        c_in = arch.n_mfcc
        for c_out, context in zip(arch.encoder_channels, arch.contexts):
            self.encoder_blocks.append(
                _EncoderBlock(c_in, c_out, context, arch.bn_before_relu, rng, dtype)
            )
            c_in = c_out
        self.pool = nn.StatPool()
        emb = arch.embedding_dim
        self.heads = {
            "fluent": _Head(emb, arch.head_hidden, 2, arch.dropout, arch.bn_before_relu, rng, dtype),
            "disfluent": _Head(emb, arch.head_hidden, 4, arch.dropout, arch.bn_before_relu, rng, dtype),
            "speaker": _Head(
                emb, arch.head_hidden, arch.n_podcasts, arch.dropout, arch.bn_before_relu, rng, dtype
            ),
        }
        self.grl = nn.GradReverse()
        self._grl_active = False

    # -- parameter bookkeeping ------------------------------------------------

    def _named_layers(self):
        for i, block in enumerate(self.encoder_blocks, start=1):
            for lname, layer in block.layers().items():
                yield f"encoder.l{i}.{lname}", layer
        for hname, head in self.heads.items():
            for lname, layer in head.layers().items():
                yield f"{hname}.{lname}", layer

    def named_params(self) -> dict[str, nn.Param]:
        out = {}
        for prefix, layer in self._named_layers():
            for pname, p in layer.params().items():
                out[f"{prefix}.{pname}"] = p
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, layer in self._named_layers():
            for bname, b in layer.buffers().items():
                out[f"{prefix}.{bname}"] = b
        return out

    def partition_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    def partition_sizes(self) -> dict[str, int]:
        sizes = {p: 0 for p in PARTITIONS}
        for name, p in self.named_params().items():
            sizes[self.partition_of(name)] += p.value.size
        return sizes

    def zero_grads(self):
        for p in self.named_params().values():
            p.grad[...] = 0.0

    # -- forward / backward ---------------------------------------------------

    def encode(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """Embed a batch (batch, n_mfcc, frames) -> (batch, 2 * last_channels)."""
        if x.ndim != 3 or x.shape[1] != self.arch.n_mfcc:
            raise ShapeMismatch(
                f"expected (batch, {self.arch.n_mfcc}, frames), got {x.shape}"
            )
        y = x.astype(self.dtype, copy=False)
        for block in self.encoder_blocks:
            y = block.forward(y, train)
        return self.pool.forward(y)

    def forward(
        self,
        x: np.ndarray,
        train: frozenset | set = frozenset(),
        grl_lambda: float | None = None,
        rng: np.random.Generator | None = None,
    ):
        """Run all branches; returns (z, fluent_logits, disfluent_logits, speaker_logits).

        `train` lists the partitions running in train mode (batch-stat norm,
        stat updates, dropout); everything else runs eval semantics. The
        gradient reversal layer is wired in front of the speaker head when
        grl_lambda is given; its forward is the identity either way.
        """
        z = self.encode(x, train="encoder" in train)
        lf = self.heads["fluent"].forward(z, "fluent" in train, rng)
        ld = self.heads["disfluent"].forward(z, "disfluent" in train, rng)
        zs = self.grl.forward(z, grl_lambda) if grl_lambda is not None else z
        self._grl_active = grl_lambda is not None
        ls = self.heads["speaker"].forward(zs, "speaker" in train, rng)
        return z, lf, ld, ls

    def backward(self, dlf=None, dld=None, dls=None):
        """Backpropagate this batch's logit gradients; overwrites all grads.

        Each gradient argument is (batch, head_out) already scaled by its
        loss weight, or None to leave that branch out. The speaker branch's
        encoder contribution passes through the gradient reversal layer iff
        it was active in the last forward.
        """
        self.zero_grads()
        dz = None

        def add(a, b):
            return b if a is None else a + b

        if dls is not None:
            dzs = self.heads["speaker"].backward(dls)
            if self._grl_active:
                dzs = self.grl.backward(dzs)
            dz = add(dz, dzs)
        if dld is not None:
            dz = add(dz, self.heads["disfluent"].backward(dld))
        if dlf is not None:
            dz = add(dz, self.heads["fluent"].backward(dlf))
        if dz is None:
            return
        dy = self.pool.backward(dz)
        for block in reversed(self.encoder_blocks):
            dy = block.backward(dy)

    # -- inference ------------------------------------------------------------

    def predict_batch(self, x: np.ndarray) -> np.ndarray:
        """Two-branch rule on a batch, eval mode; returns class indices."""
        _, lf, ld, _ = self.forward(x)
        fluent_says_fluent = np.argmax(lf, axis=1) == 0
        disfluent_pick = np.argmax(ld, axis=1) + 1
        return np.where(fluent_says_fluent, StutterClass.FLUENT.value, disfluent_pick)

    def predict(self, features: np.ndarray) -> StutterClass:
        """Classify one feature matrix (n_mfcc, frames)."""
        pred = self.predict_batch(features[None, :, :])
        return StutterClass(int(pred[0]))

    # -- snapshots (used by checkpointing and best-epoch tracking) -------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: p.value for name, p in self.named_params().items()}
        arrays.update(self.named_buffers())
        return arrays

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: a.copy() for name, a in self.state_arrays().items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]):
        arrays = self.state_arrays()
        missing = set(arrays) - set(snap)
        extra = set(snap) - set(arrays)
        if missing or extra:
            raise ShapeMismatch(f"snapshot mismatch: missing {missing}, extra {extra}")
        for name, a in arrays.items():
            if a.shape != snap[name].shape:
                raise ShapeMismatch(f"{name}: shape {snap[name].shape} vs {a.shape}")
            a[...] = snap[name]


def build_model(arch: ArchConfig, seed: int, dtype=np.float32) -> MultiBranchModel:
    """Deterministically initialize the model for a given seed."""
    return MultiBranchModel(arch, seed, dtype)


def set_trainable(subset):
    """Turn a subset of {E, F, D, S} (or full partition names) into a name mask.

    Returns (partition set, predicate over parameter names). Optimizer steps
    touch only names the predicate accepts; everything else stays bit-frozen.
    """
    parts = set()
    for s in subset:
        if s in PARTITION_SHORT:
            parts.add(PARTITION_SHORT[s])
        elif s in PARTITIONS:
            parts.add(s)
        else:
            raise EmptySubset(f"unknown partition {s!r}")
    if not parts:
        raise EmptySubset("trainable subset must not be empty")
    return parts, lambda name: name.split(".", 1)[0] in parts
