"""Desk-scale backbones with per-block taps, per-task heads and a projection head."""
from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .diffcore import Tensor, no_grad
from .diffcore import ops
from .diffcore.tensor import ShapeError

FAMILIES = ("mlp", "smallconv")
FINAL = "final"


@dataclass(frozen=True)
class ModelSpec:
    family: str
    input_shape: tuple[int, ...]
    depth: int = 2
    width: int = 32
    representation_dim: int | None = None
    projection_dim: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")
        if self.representation_dim is not None and self.representation_dim < 1:
            raise ValueError("representation_dim must be positive")
        if self.projection_dim is not None and self.projection_dim < 1:
            raise ValueError("projection_dim must be positive")
        if self.family == "mlp" and len(self.input_shape) != 1:
            raise ValueError(f"mlp expects a flat input shape, got {self.input_shape}")
        if self.family == "smallconv" and len(self.input_shape) != 3:
            raise ValueError(f"smallconv expects (channels, height, width), got {self.input_shape}")

    @property
    def rep_dim(self) -> int:
        return self.representation_dim or self.width

    def block_dims(self) -> list[int]:
        return [self.width] * (self.depth - 1) + [self.rep_dim]

    def tap_dims(self) -> list[int]:
        """Feature width at each tap; inner conv taps are the flattened pooled maps."""
        if self.family == "mlp":
            return self.block_dims()
        dims, side = [], self.input_shape[1:]
        for k, ch in enumerate(self.block_dims()):
            if side[0] >= 2 and side[1] >= 2:
                side = (side[0] // 2, side[1] // 2)
            dims.append(ch if k == self.depth - 1 else ch * side[0] * side[1])
        return dims

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{**d, "input_shape": tuple(d["input_shape"])})


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float) -> np.ndarray:
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Network:
    """Backbone + optional projection + a dict of per-task affine heads.

    Parameters live in one ordered name -> Tensor mapping; names are
    ``block{k}.W``/``block{k}.b``, ``proj{k}.*`` and ``head{t}.*``.
    """

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor], heads: dict[int, int]):
        self.spec = spec
        self.params = params
        self.heads = dict(heads)

    # --------------------------------------------------------------- params
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def backbone_parameters(self) -> list[Tensor]:
        return [p for n, p in self.params.items() if n.startswith("block")]

    def projection_parameters(self) -> list[Tensor]:
        return [p for n, p in self.params.items() if n.startswith("proj")]

    def head_parameters(self, task_id: int) -> list[Tensor]:
        if task_id not in self.heads:
            raise KeyError(f"no head for task {task_id}")
        return [self.params[f"head{task_id}.W"], self.params[f"head{task_id}.b"]]

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def add_head(self, task_id: int, n_classes: int, rng: np.random.Generator | None = None) -> None:
        """Attach a fresh head; zero-initialized when ``rng`` is None."""
        if task_id in self.heads:
            raise ValueError(f"head for task {task_id} already exists")
        d = self.spec.rep_dim
        W = np.zeros((d, n_classes)) if rng is None else _uniform(rng, (d, n_classes), d, 1.0)
        self.params[f"head{task_id}.W"] = Tensor(W, requires_grad=True, name=f"head{task_id}.W")
        self.params[f"head{task_id}.b"] = Tensor(np.zeros(n_classes), requires_grad=True, name=f"head{task_id}.b")
        self.heads[task_id] = n_classes

    # -------------------------------------------------------------- forward
    def _check_input(self, x: Tensor) -> None:
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} does not match model input {self.spec.input_shape}")

    def blocks(self, x) -> list[Tensor]:
        """Raw output of every feature block, in order."""
        x = ops.as_tensor(x)
        self._check_input(x)
        outs = []
        h = x
        for k in range(self.spec.depth):
            W, b = self.params[f"block{k}.W"], self.params[f"block{k}.b"]
            if self.spec.family == "mlp":
                h = ops.relu(ops.affine(h, W, b))
            else:
                h = ops.relu(ops.conv2d(h, W, b, stride=1, padding=1))
                if h.shape[2] >= 2 and h.shape[3] >= 2:
                    h = ops.max_pool2d(h, 2)
            outs.append(h)
        return outs

    def _tap(self, block_out: Tensor, last: bool = True) -> Tensor:
        if block_out.ndim == 2:
            return block_out
        if last:
            return ops.mean_pool2d(block_out)
        return ops.reshape(block_out, (block_out.shape[0], -1))

    def representation(self, x) -> Tensor:
        return self._tap(self.blocks(x)[-1])

    def project(self, rep: Tensor) -> Tensor:
        if self.spec.projection_dim is None:
            raise ValueError("network has no projection head")
        h = ops.relu(ops.affine(rep, self.params["proj0.W"], self.params["proj0.b"]))
        return ops.affine(h, self.params["proj1.W"], self.params["proj1.b"])

    def head_logits(self, task_id: int, x=None, rep: Tensor | None = None) -> Tensor:
        if task_id not in self.heads:
            raise KeyError(f"no head for task {task_id}")
        if rep is None:
            rep = self.representation(x)
        return ops.affine(rep, self.params[f"head{task_id}.W"], self.params[f"head{task_id}.b"])

    def features(self, x, tap=FINAL, batch_size: int = 1024) -> np.ndarray:
        """Frozen activations at ``tap`` (block index or ``"final"``), one row per sample."""
        x = np.asarray(x, dtype=np.float64)
        if tap == FINAL:
            k = self.spec.depth - 1
        elif isinstance(tap, (int, np.integer)) and 0 <= tap < self.spec.depth:
            k = int(tap)
        else:
            raise ValueError(f"unknown tap {tap!r}; expected 0..{self.spec.depth - 1} or 'final'")
        rows = []
        with no_grad():
            for start in range(0, len(x), batch_size):
                out = self.blocks(x[start:start + batch_size])[k]
                rows.append(self._tap(out, last=k == self.spec.depth - 1).data)
        if not rows:
            return np.zeros((0, self.spec.tap_dims()[k]))
        return np.concatenate(rows, axis=0)

    def copy(self) -> "Network":
        params = {n: Tensor(p.data.copy(), requires_grad=True, name=n) for n, p in self.params.items()}
        return Network(self.spec, params, self.heads)


def build(spec: ModelSpec, rng: np.random.Generator) -> Network:
    """Initialize a network with He-style fan-in uniform weights and zero biases."""
    params: dict[str, Tensor] = {}

    def put(name, arr):
        params[name] = Tensor(arr, requires_grad=True, name=name)

    in_dim = spec.input_shape[0]
    for k, out_dim in enumerate(spec.block_dims()):
        if spec.family == "mlp":
            put(f"block{k}.W", _uniform(rng, (in_dim, out_dim), in_dim, np.sqrt(6.0)))
        else:
            fan_in = in_dim * 9
            put(f"block{k}.W", _uniform(rng, (out_dim, in_dim, 3, 3), fan_in, np.sqrt(6.0)))
        put(f"block{k}.b", np.zeros(out_dim))
        in_dim = out_dim
    if spec.projection_dim is not None:
        d = spec.rep_dim
        put("proj0.W", _uniform(rng, (d, d), d, np.sqrt(6.0)))
        put("proj0.b", np.zeros(d))
        put("proj1.W", _uniform(rng, (d, spec.projection_dim), d, 1.0))
        put("proj1.b", np.zeros(spec.projection_dim))
    return Network(spec, params, {})


def permute_representation(network: Network, perm: Iterable[int]) -> Network:
    """Copy of ``network`` whose final features are reordered by ``perm``; heads untouched."""
    perm = np.asarray(list(perm))
    k = network.spec.depth - 1
    if sorted(perm.tolist()) != list(range(network.spec.rep_dim)):
        raise ValueError("perm must be a permutation of the representation units")
    out = network.copy()
    W, b = out.params[f"block{k}.W"], out.params[f"block{k}.b"]
    W.data = (W.data[:, perm] if network.spec.family == "mlp" else W.data[perm]).copy()
    b.data = b.data[perm].copy()
    return out


# ------------------------------------------------------------------ snapshots

MAGIC = b"RFSNAP"
FORMAT_VERSION = 1


class SnapshotError(ValueError):
    """A snapshot file is truncated, corrupt, or of an unknown version."""


@dataclass(frozen=True)
class Snapshot:
    step: int
    spec: ModelSpec
    params: dict[str, np.ndarray] = field(repr=False)
    heads: dict[int, int] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        header = json.dumps({"step": self.step, "spec": self.spec.to_dict(),
                             "heads": {str(k): v for k, v in sorted(self.heads.items())}},
                            sort_keys=True).encode("utf-8")
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<HI", FORMAT_VERSION, len(header)))
        buf.write(header)
        buf.write(struct.pack("<I", len(self.params)))
        for name, arr in self.params.items():
            nb = name.encode("utf-8")
            buf.write(struct.pack("<H", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        body = buf.getvalue()
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Snapshot":
        if len(blob) < len(MAGIC) + 10 or not blob.startswith(MAGIC):
            raise SnapshotError("not a snapshot file (bad magic)")
        body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
        if zlib.crc32(body) != crc:
            raise SnapshotError("snapshot checksum mismatch")
        try:
            pos = len(MAGIC)
            version, hlen = struct.unpack_from("<HI", body, pos)
            if version != FORMAT_VERSION:
                raise SnapshotError(f"unsupported snapshot version {version}")
            pos += 6
            header = json.loads(body[pos:pos + hlen].decode("utf-8"))
            pos += hlen
            (count,) = struct.unpack_from("<I", body, pos)
            pos += 4
            params = {}
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", body, pos)
                pos += 2
                name = body[pos:pos + nlen].decode("utf-8")
                pos += nlen
                (ndim,) = struct.unpack_from("<B", body, pos)
                pos += 1
                shape = struct.unpack_from(f"<{ndim}I", body, pos)
                pos += 4 * ndim
                n = int(np.prod(shape)) if ndim else 1
                arr = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
                arr.flags.writeable = False
                params[name] = arr
                pos += 8 * n
        except (struct.error, ValueError, KeyError) as exc:
            if isinstance(exc, SnapshotError):
                raise
            raise SnapshotError(f"corrupt snapshot: {exc}") from None
        if pos != len(body):
            raise SnapshotError("corrupt snapshot: trailing bytes")
        return cls(step=header["step"], spec=ModelSpec.from_dict(header["spec"]), params=params,
                   heads={int(k): v for k, v in header["heads"].items()})

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Snapshot":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def snapshot(network: Network, step: int) -> Snapshot:
    params = {}
    for name, p in network.params.items():
        arr = p.data.copy()
        arr.flags.writeable = False
        params[name] = arr
    return Snapshot(step=step, spec=network.spec, params=params, heads=dict(network.heads))


def restore(snap: Snapshot) -> Network:
    params = {n: Tensor(a.copy(), requires_grad=True, name=n) for n, a in snap.params.items()}
    return Network(snap.spec, params, snap.heads)
