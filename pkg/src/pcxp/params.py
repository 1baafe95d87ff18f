"""Named parameter store, ownership/freeze flags, and the binary checkpoint.

Checkpoint layout (all integers little-endian):

    magic  b"PCXP1"
    u32    entry count
    entry: u32 name length, name (utf-8), u8 dtype code (0 = f32),
           u8 trainable, u8 owner code, u8 rank, rank * u32 extents,
           u64 payload byte offset
    payload: raw little-endian float32, C order, in entry order

Owners: shared attention trunk, image expert path, point expert path, and
the projection/task heads. Freezing is a per-parameter flag consulted by
the optimizer; the tensors themselves always record gradients so a frozen
parameter's gradient is computed and then discarded.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

OWNERS = ("shared", "image", "point", "heads")
_OWNER_CODE = {name: i for i, name in enumerate(OWNERS)}

MAGIC = b"PCXP1"


@dataclass
class Param:
    tensor: Tensor
    owner: str
    trainable: bool


class ParamStore:
    """Insertion-ordered mapping of unique names to parameters."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, data: np.ndarray, owner: str, trainable: bool = True, dtype=np.float32) -> Tensor:
        # float64 stores exist only for gradient checking; checkpoints are float32
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if owner not in _OWNER_CODE:
            raise ValueError(f"unknown owner {owner!r}")
        # always copy: the store must own its buffers, never alias caller memory
        t = Tensor(np.array(data, dtype=dtype), requires_grad=True)
        self._params[name] = Param(t, owner, trainable)
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].tensor

    def __len__(self) -> int:
        return len(self._params)

    def param(self, name: str) -> Param:
        return self._params[name]

    def names(self) -> list:
        return list(self._params)

    def items(self):
        return self._params.items()

    def trainable_items(self):
        return [(n, p) for n, p in self._params.items() if p.trainable]

    def set_trainable_owners(self, owners):
        """Mark parameters trainable iff their owner is listed."""
        owners = set(owners)
        for p in self._params.values():
            p.trainable = p.owner in owners

    def zero_grads(self):
        for p in self._params.values():
            p.tensor.grad = None

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, p in self._params.items():
            out.add(name, p.tensor.data, p.owner, p.trainable, dtype=dtype)
        return out

    def bytes_hash(self, owners=None) -> str:
        """sha256 over names and raw little-endian payloads, insertion order."""
        h = hashlib.sha256()
        for name, p in self._params.items():
            if owners is not None and p.owner not in owners:
                continue
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(p.tensor.data).astype("<f4").tobytes())
        return h.hexdigest()


# counting ----------------------------------------------------------------------


@dataclass
class ParamCount:
    total: int
    trainable: int
    by_owner: dict

    @property
    def trainable_fraction(self) -> float:
        return self.trainable / self.total if self.total else 0.0


def count_params(specs) -> ParamCount:
    """Account parameters from (name, shape, owner, trainable) tuples or a store."""
    if isinstance(specs, ParamStore):
        specs = [
            (n, p.tensor.data.shape, p.owner, p.trainable) for n, p in specs.items()
        ]
    total = 0
    trainable = 0
    by_owner = {o: 0 for o in OWNERS}
    for _name, shape, owner, is_trainable in specs:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        total += n
        by_owner[owner] += n
        if is_trainable:
            trainable += n
    return ParamCount(total, trainable, by_owner)


# checkpoint io -------------------------------------------------------------------


def save_store(path: str, store: ParamStore):
    header = bytearray()
    payload = bytearray()
    entries = list(store.items())
    header += MAGIC
    header += struct.pack("<I", len(entries))
    for name, p in entries:
        data = np.ascontiguousarray(p.tensor.data)
        if data.dtype != np.float32:
            raise CheckpointError(f"checkpoint parameters must be float32, {name} is {data.dtype}")
        raw = data.astype("<f4").tobytes()
        nb = name.encode("utf-8")
        header += struct.pack("<I", len(nb)) + nb
        header += struct.pack(
            "<BBBB", 0, 1 if p.trainable else 0, _OWNER_CODE[p.owner], data.ndim
        )
        header += struct.pack(f"<{data.ndim}I", *data.shape)
        header += struct.pack("<Q", len(payload))
        payload += raw
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(bytes(payload))


def _read_entries(path: str):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if blob[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    try:
        (count,) = struct.unpack_from("<I", blob, 5)
        off = 9
        metas = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            dtype, trainable, owner, rank = struct.unpack_from("<BBBB", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            (payload_off,) = struct.unpack_from("<Q", blob, off)
            off += 8
            if dtype != 0:
                raise CheckpointError(f"{path}: {name}: unsupported dtype code {dtype}")
            if owner >= len(OWNERS):
                raise CheckpointError(f"{path}: {name}: unknown owner code {owner}")
            metas.append((name, bool(trainable), OWNERS[owner], shape, payload_off))
        base = off
        out = []
        for name, trainable, owner, shape, payload_off in metas:
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            start = base + payload_off
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=start).reshape(shape)
            out.append((name, owner, trainable, arr.astype(np.float32)))
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint: {e}") from e
    return out


def load_store(path: str) -> ParamStore:
    """Reconstruct a store exactly as serialized (names, flags, values)."""
    store = ParamStore()
    for name, owner, trainable, arr in _read_entries(path):
        if not np.isfinite(arr).all():
            raise CheckpointError(f"{path}: {name}: non-finite values")
        store.add(name, arr, owner, trainable)
    return store


def load_into(path: str, store: ParamStore):
    """Load values into an existing store; any mismatch is a checked error.

    The target's tensors keep their identity (live model views stay valid);
    names must match exactly and shapes must agree, so loading a checkpoint
    into a different preset fails loudly.
    """
    entries = {name: (owner, trainable, arr) for name, owner, trainable, arr in _read_entries(path)}
    have = set(entries)
    want = set(store.names())
    if have != want:
        missing = sorted(want - have)[:4]
        extra = sorted(have - want)[:4]
        raise CheckpointError(
            f"{path}: parameter names do not match the target model "
            f"(missing {missing}, unexpected {extra})"
        )
    for name, p in store.items():
        owner, trainable, arr = entries[name]
        if tuple(arr.shape) != tuple(p.tensor.data.shape):
            raise CheckpointError(
                f"{path}: {name}: shape {arr.shape} does not fit {p.tensor.data.shape} "
                "(checkpoint was written at a different preset)"
            )
        if not np.isfinite(arr).all():
            raise CheckpointError(f"{path}: {name}: non-finite values")
        p.tensor.data = arr.copy()
        p.owner = owner
        p.trainable = trainable
