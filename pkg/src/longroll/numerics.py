"""Dense tensor substrate: contract-checked ops, counter-based RNG streams and
the LVT1 tensor record format.

Tensors are ``torch.Tensor`` (float32); torch supplies the gradient tape.
"""
from __future__ import annotations

import hashlib
import io
import struct
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float32
LVT_MAGIC = b"LVT1"


class ContractError(ValueError):
    """An operation was called outside its precondition."""


class NumericError(FloatingPointError):
    """A value went non-finite where the contract forbids it."""


# ---------------------------------------------------------------------------
# RNG

def _label_key(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{label}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


class Rng:
    """Seeded family of Philox streams, one per labeled purpose.

    ``stream(label, counter)`` is a pure function of ``(seed, label, counter)``,
    so a training loop can re-derive the stream of any iteration without
    carrying generator state around.
    """

    algorithm = "philox4x64"

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ContractError(f"seed must fit in 64 bits, got {seed}")
        self.seed = int(seed)

    def stream(self, label: str, counter: int = 0) -> np.random.Generator:
        bitgen = np.random.Philox(key=_label_key(self.seed, label), counter=[0, 0, 0, int(counter)])
        return np.random.Generator(bitgen)

    def normal(self, label: str, shape: Sequence[int], counter: int = 0) -> torch.Tensor:
        arr = self.stream(label, counter).standard_normal(tuple(shape), dtype=np.float32)
        return torch.from_numpy(arr)

    def state(self) -> dict:
        return {"seed": self.seed, "algorithm": self.algorithm}

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"


def as_generator(rng: Rng | np.random.Generator, label: str = "default") -> np.random.Generator:
    if isinstance(rng, Rng):
        return rng.stream(label)
    return rng


# ---------------------------------------------------------------------------
# elementwise / matmul

def _broadcast_trailing(sa: Sequence[int], sb: Sequence[int]) -> tuple[int, ...]:
    # trailing-dimension broadcasting only: the shorter shape must equal the
    # tail of the longer one (size-1 axes are not stretched).
    long_, short = (sa, sb) if len(sa) >= len(sb) else (sb, sa)
    if tuple(long_[len(long_) - len(short):]) != tuple(short):
        raise ContractError(f"shapes {tuple(sa)} and {tuple(sb)} are not trailing-broadcast compatible")
    return tuple(long_)


_OPS: dict[str, Callable[[torch.Tensor, torch.Tensor], torch.Tensor]] = {
    "add": torch.add,
    "sub": torch.sub,
    "mul": torch.mul,
    "div": torch.div,
    "pow": torch.pow,
    "max": torch.maximum,
    "min": torch.minimum,
}


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.as_tensor(np.asarray(data, dtype=np.float32)).clone().requires_grad_(requires_grad)


def elementwise(op_name: str, a: torch.Tensor, b: torch.Tensor | float) -> torch.Tensor:
    if op_name not in _OPS:
        raise ContractError(f"unknown elementwise op {op_name!r}")
    if not torch.is_tensor(b):
        b = torch.tensor(float(b), dtype=a.dtype)
    else:
        _broadcast_trailing(a.shape, b.shape)
    if op_name == "div" and bool((b == 0).any()):
        raise ContractError("division by a tensor containing zero")
    out = _OPS[op_name](a, b)
    if not torch.isfinite(out).all():
        raise NumericError(f"{op_name} produced a non-finite value")
    return out


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul needs [M,K]x[K,N], got {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


# ---------------------------------------------------------------------------
# image primitives

def box_blur(x: torch.Tensor, k: int) -> torch.Tensor:
    """k x k mean filter over the last two axes with replicate padding."""
    if k < 1 or k % 2 == 0:
        raise ContractError(f"blur kernel must be odd and positive, got {k}")
    if k == 1:
        return x.clone()
    shape = x.shape
    h, w = shape[-2:]
    flat = x.reshape(-1, 1, h, w)
    r = k // 2
    padded = F.pad(flat, (r, r, r, r), mode="replicate")
    out = F.avg_pool2d(padded, k, stride=1)
    return out.reshape(shape)


def resample(x: torch.Tensor, factor: float) -> torch.Tensor:
    """Average-pool down (factor = 1/2^j) or nearest-neighbour up (factor = 2^j)."""
    if factor <= 0:
        raise ContractError(f"resample factor must be positive, got {factor}")
    j = np.log2(factor)
    if abs(j - round(j)) > 1e-9:
        raise ContractError(f"resample factor must be a power of two, got {factor}")
    j = int(round(j))
    if j == 0:
        return x.clone()
    shape = x.shape
    h, w = shape[-2:]
    flat = x.reshape(-1, 1, h, w)
    if j < 0:
        s = 2 ** (-j)
        if h % s or w % s:
            raise ContractError(f"{h}x{w} map is not divisible by {s}")
        out = F.avg_pool2d(flat, s)
    else:
        s = 2**j
        out = flat.repeat_interleave(s, dim=-2).repeat_interleave(s, dim=-1)
    return out.reshape(*shape[:-2], *out.shape[-2:])


# ---------------------------------------------------------------------------
# gradient checking

def finite_diff_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-3) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and
    central differences. Differences are taken in float64.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ContractError(f"eps must lie in [1e-4, 1e-2], got {eps}")
    x64 = x.detach().to(torch.float64).clone().requires_grad_(True)
    y = f(x64)
    if not torch.isfinite(y).all():
        raise NumericError("function value is not finite")
    (grad,) = torch.autograd.grad(y, x64)
    grad = grad.detach()
    num = torch.zeros_like(x64)
    flat = x64.detach().clone().reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            fp = f(flat.view_as(x64)).item()
            flat[i] = old - eps
            fm = f(flat.view_as(x64)).item()
            flat[i] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("function value is not finite")
            num.view(-1)[i] = (fp - fm) / (2 * eps)
    scale = torch.maximum(grad.abs(), num.abs()).clamp_min(1e-6)
    return float(((grad - num).abs() / scale).max())


# ---------------------------------------------------------------------------
# LVT1 records

def write_tensor(fh: BinaryIO, t: torch.Tensor) -> int:
    arr = np.array(t.detach().cpu().numpy(), dtype="<f4", order="C")
    header = LVT_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    fh.write(header)
    fh.write(arr.tobytes())
    return len(header) + arr.nbytes


def read_tensor(fh: BinaryIO) -> torch.Tensor:
    magic = fh.read(4)
    if magic != LVT_MAGIC:
        raise ContractError(f"bad tensor record magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(dims)) if rank else 1
    buf = fh.read(4 * count)
    if len(buf) != 4 * count:
        raise ContractError("truncated tensor record")
    arr = np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(dims)
    return torch.from_numpy(arr.copy())


def tensor_record_size(shape: Sequence[int]) -> int:
    return 8 + 4 * len(shape) + 4 * int(np.prod(shape))


def to_bytes(tensors: Iterable[torch.Tensor]) -> bytes:
    buf = io.BytesIO()
    for t in tensors:
        write_tensor(buf, t)
    return buf.getvalue()


def read_all(path) -> list[torch.Tensor]:
    out = []
    with open(path, "rb") as fh:
        size = fh.seek(0, 2)
        fh.seek(0)
        while fh.tell() < size:
            out.append(read_tensor(fh))
    return out
