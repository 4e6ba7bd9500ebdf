"""Dual-tower toy encoders, learnable scalars and the HMID1 checkpoint format."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import engine as E
from . import lorentz as L
from .engine import ShapeError, Tensor
from .masking import PatchSequence

MAGIC = b"HMID1"
SCALAR_NAMES = ("tau", "curv", "alpha_img", "alpha_txt")


@dataclass
class EncoderConfig:
    """Tower hyperparameters. ``width`` is the transformer width; ``embed_dim``
    is the output (tangent space) dimension shared by student and teacher."""

    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    patch_size: int = 8
    vocab_size: int = 256
    max_text_len: int = 16
    image_size: int = 32
    width: int = 0
    mlp_ratio: int = 4

    def __post_init__(self):
        if not self.width:
            self.width = self.embed_dim
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size ** 2


def sincos_1d(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim // 2))
    ang = pos * freq[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


def sincos_2d(grid: int, dim: int) -> np.ndarray:
    """Row-major 2-D sin-cos table: half the channels encode the row, half the column."""
    rows = sincos_1d(grid, dim // 2)
    cols = sincos_1d(grid, dim // 2)
    table = np.concatenate([np.repeat(rows, grid, axis=0), np.tile(cols, (grid, 1))], axis=1)
    return table.astype(np.float32)


class ModelParams:
    """Named parameter tensors for both towers plus tau, c and the alphas.

    Positional tables are stored as frozen tensors so they travel with
    checkpoints and checksums but are never updated.
    """

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor], frozen: bool = False):
        self.config = config
        self.tensors = tensors
        self.frozen = frozen

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    @property
    def tau(self) -> Tensor:
        return self.tensors["tau"]

    @property
    def curv(self) -> Tensor:
        return self.tensors["curv"]

    def trainable(self) -> list[tuple[str, Tensor]]:
        if self.frozen:
            return []
        return [(k, t) for k, t in self.tensors.items() if not t.frozen]

    def freeze(self) -> "ModelParams":
        self.frozen = True
        for t in self.tensors.values():
            t.frozen = True
            t.requires_grad = False
        return self

    def scalars(self) -> dict[str, float]:
        return {k: float(self.tensors[k].data) for k in SCALAR_NAMES}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name].data).tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelParams":
        tensors = {k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k, frozen=t.frozen)
                   for k, t in self.tensors.items()}
        return ModelParams(EncoderConfig(**asdict(self.config)), tensors, self.frozen)


def _tower_shapes(cfg: EncoderConfig, prefix: str) -> dict[str, tuple[int, ...]]:
    w, hidden = cfg.width, cfg.width * cfg.mlp_ratio
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(cfg.depth):
        b = f"{prefix}.blocks.{i}"
        shapes.update({
            f"{b}.ln1.g": (w,), f"{b}.ln1.b": (w,),
            f"{b}.attn.wq": (w, w), f"{b}.attn.bq": (w,),
            f"{b}.attn.wk": (w, w), f"{b}.attn.bk": (w,),
            f"{b}.attn.wv": (w, w), f"{b}.attn.bv": (w,),
            f"{b}.attn.wo": (w, w), f"{b}.attn.bo": (w,),
            f"{b}.ln2.g": (w,), f"{b}.ln2.b": (w,),
            f"{b}.mlp.w1": (w, hidden), f"{b}.mlp.b1": (hidden,),
            f"{b}.mlp.w2": (hidden, w), f"{b}.mlp.b2": (w,),
        })
    shapes.update({f"{prefix}.ln_f.g": (w,), f"{prefix}.ln_f.b": (w,),
                   f"{prefix}.proj": (w, cfg.embed_dim)})
    return shapes


def init_params(config: EncoderConfig, seed: int = 0, tau_init: float = 0.7,
                c_init: float = 1.0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    w = config.width
    shapes = {"image.patch.w": (config.patch_dim, w), "image.patch.b": (w,),
              "image.cls": (w,), "text.tok_emb": (config.vocab_size, w)}
    shapes.update(_tower_shapes(config, "image"))
    shapes.update(_tower_shapes(config, "text"))
    residual_scale = 1.0 / np.sqrt(2 * config.depth)
    tensors: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif len(shape) == 1 and name != "image.cls":
            arr = np.zeros(shape)
        elif name in ("image.cls", "text.tok_emb"):
            arr = rng.normal(0.0, 0.02, shape)
        else:
            std = 1.0 / np.sqrt(shape[0])
            if leaf in ("wo", "w2"):
                std *= residual_scale
            arr = rng.normal(0.0, std, shape)
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    tensors["image.pos"] = Tensor(sincos_2d(config.grid, w).astype(dtype), name="image.pos",
                                  frozen=True)
    tensors["text.pos"] = Tensor(sincos_1d(config.max_text_len, w).astype(dtype),
                                 name="text.pos", frozen=True)
    for name, value in (("tau", tau_init), ("curv", c_init), ("alpha_img", 1.0),
                        ("alpha_txt", 1.0)):
        tensors[name] = Tensor(np.asarray(value, dtype=dtype), requires_grad=True, name=name)
    return ModelParams(config, tensors)


# -- forward ---------------------------------------------------------------------

def _linear(x, p: ModelParams, w: str, b: str | None = None):
    y = E.matmul(x, p[w])
    return y + p[b] if b is not None else y


def _block(x, p: ModelParams, prefix: str, heads: int, mask: np.ndarray | None):
    bsz, seq, width = E.as_array(x).shape
    dh = width // heads
    h = E.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])

    def split(t):
        return E.transpose(E.reshape(t, (bsz, seq, heads, dh)), (0, 2, 1, 3))

    q = split(_linear(h, p, f"{prefix}.attn.wq", f"{prefix}.attn.bq"))
    k = split(_linear(h, p, f"{prefix}.attn.wk", f"{prefix}.attn.bk"))
    v = split(_linear(h, p, f"{prefix}.attn.wv", f"{prefix}.attn.bv"))
    scores = E.matmul(q, E.transpose(k, (0, 1, 3, 2))) * (1.0 / float(np.sqrt(dh)))
    if mask is not None:
        scores = scores + mask
    ctx = E.matmul(E.softmax_rows(scores), v)
    ctx = E.reshape(E.transpose(ctx, (0, 2, 1, 3)), (bsz, seq, width))
    x = x + _linear(ctx, p, f"{prefix}.attn.wo", f"{prefix}.attn.bo")
    h = E.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    h = E.gelu(_linear(h, p, f"{prefix}.mlp.w1", f"{prefix}.mlp.b1"))
    return x + _linear(h, p, f"{prefix}.mlp.w2", f"{prefix}.mlp.b2")


def encode_image(params: ModelParams, seq: PatchSequence) -> Tensor:
    """Class-token readout over the kept patches of a batch ``[B, k, patch_dim]``."""
    cfg = params.config
    tokens = np.asarray(seq.tokens, dtype=params["image.patch.w"].dtype)
    idx = np.asarray(seq.kept_indices)
    if tokens.ndim == 2:
        tokens, idx = tokens[None], idx[None]
    if tokens.shape[:-1] != idx.shape:
        raise ShapeError(f"tokens {tokens.shape[:-1]} do not match positions {idx.shape}")
    if tokens.shape[1] < 1:
        raise ShapeError("at least one patch token is required")
    if tokens.shape[-1] != cfg.patch_dim:
        raise ShapeError(f"patch dim {tokens.shape[-1]} != {cfg.patch_dim}")
    if idx.min() < 0 or idx.max() >= cfg.num_patches:
        raise ShapeError("patch position out of range")
    bsz = tokens.shape[0]
    x = _linear(tokens, params, "image.patch.w", "image.patch.b")
    x = x + E.as_array(params["image.pos"])[idx]
    cls = np.zeros((bsz, 1, cfg.width), dtype=tokens.dtype) + params["image.cls"]
    x = E.concat([cls, x], axis=1)
    for i in range(cfg.depth):
        x = _block(x, params, f"image.blocks.{i}", cfg.heads, None)
    x = E.layer_norm(x, params["image.ln_f.g"], params["image.ln_f.b"])
    return E.matmul(x[:, 0], params["image.proj"])


_CAUSAL: dict[int, np.ndarray] = {}


def _causal_mask(n: int) -> np.ndarray:
    if n not in _CAUSAL:
        _CAUSAL[n] = np.triu(np.full((n, n), -1e9, dtype=np.float32), k=1)
    return _CAUSAL[n]


def eos_positions(token_ids: np.ndarray) -> np.ndarray:
    from .data import EOS_ID

    ids = np.asarray(token_ids)
    has = (ids == EOS_ID).any(axis=1)
    if not has.all():
        raise ShapeError("every caption needs an EOS token")
    return (ids == EOS_ID).argmax(axis=1)


def encode_text(params: ModelParams, token_ids: np.ndarray) -> Tensor:
    """EOS-token readout of a causal transformer over byte ids ``[B, L]``."""
    cfg = params.config
    ids = np.asarray(token_ids)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ShapeError(f"token id outside vocabulary of {cfg.vocab_size}")
    if ids.shape[1] > cfg.max_text_len:
        raise ShapeError(f"sequence length {ids.shape[1]} > max_text_len {cfg.max_text_len}")
    eos = eos_positions(ids)
    length = int(eos.max()) + 1
    ids = ids[:, :length]  # causal attention: positions after the last EOS never matter
    x = E.embedding_lookup(params["text.tok_emb"], ids) + E.as_array(params["text.pos"])[:length]
    mask = _causal_mask(length)
    for i in range(cfg.depth):
        x = _block(x, params, f"text.blocks.{i}", cfg.heads, mask)
    x = E.layer_norm(x, params["text.ln_f.g"], params["text.ln_f.b"])
    return E.matmul(E.gather_rows(x, eos), params["text.proj"])


def project_to_hyperbolic(v, alpha, c) -> L.LorentzPoint:
    """Scale tangent vectors by ``alpha`` and map them onto the hyperboloid."""
    return L.exp_map_origin(v * alpha, c)


# -- checkpoints -------------------------------------------------------------------

class CheckpointError(IOError):
    pass


def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> None:
    """Write the HMID1 container: magic, u32 header length, JSON manifest, buffers."""
    entries, buffers, offset = [], [], 0
    for name in sorted(params.tensors):
        t = params.tensors[name]
        buf = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "dtype": "float32", "shape": list(t.shape),
                        "offset": offset, "nbytes": len(buf), "frozen": bool(t.frozen)})
        buffers.append(buf)
        offset += len(buf)
    header = json.dumps({
        "version": 1, "config": asdict(params.config), "frozen": params.frozen,
        "scalars": params.scalars(), "meta": meta or {}, "tensors": entries,
    }, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            for buf in buffers:
                fh.write(buf)
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not an HMID1 checkpoint")
        (size,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(size).decode("utf-8"))


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: checkpoint not found")
    raw = path.read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not an HMID1 checkpoint")
    (size,) = struct.unpack("<I", raw[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    header = json.loads(raw[start:start + size].decode("utf-8"))
    base = start + size
    known = {f.name for f in fields(EncoderConfig)}
    config = EncoderConfig(**{k: v for k, v in header["config"].items() if k in known})
    tensors = {}
    for e in header["tensors"]:
        arr = np.frombuffer(raw, dtype="<f4", count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=base + e["offset"]).reshape(e["shape"]).astype(np.float32)
        tensors[e["name"]] = Tensor(arr, requires_grad=not e["frozen"], name=e["name"],
                                    frozen=e["frozen"])
    params = ModelParams(config, tensors, frozen=header["frozen"])
    if params.frozen:
        params.freeze()
    return params, header.get("meta", {})
