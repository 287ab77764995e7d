"""Field-token encoder: embeddings, self-attention blocks, generation and label heads.

Every sample is a row of ``P = N + 1`` positions (the feature fields in schema
order, then the label slot). A position is either *observed* with a weight
``w`` (row ``w * E_k[token] + pos_k``) or *masked* (row ``mask + pos_k``).
All per-field embedding tables live in one concatenated ``embeddings`` tensor
addressed through ``offsets``.

The forward pass is written with torch in float64 so gradients come from
autograd; nothing here depends on a GPU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, ContractError, NumericError
from .schema import FeatureSchema, parse_schema

DTYPE = torch.float64
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    n_layers: int = 2
    n_heads: int = 2
    ff_mult: int = 4
    tau: float = 0.07
    train_tau: bool = False
    learned_mask: bool = False

    def __post_init__(self):
        if self.d < 1 or self.n_layers < 0 or self.n_heads < 1 or self.ff_mult < 1:
            raise ConfigError(f"invalid model dimensions {self}")
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")


class ModelParams:
    """Named float64 tensors plus the schema/config they were built for."""

    def __init__(self, schema: FeatureSchema, config: ModelConfig, tensors: dict):
        self.schema = schema
        self.config = config
        self.tensors = tensors
        vocab = schema.vocab_sizes()
        self.offsets = torch.tensor(np.concatenate([[0], np.cumsum(vocab)[:-1]]), dtype=torch.long)
        self.vocab = torch.tensor(vocab, dtype=torch.long)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def parameters(self):
        return [t for t in self.tensors.values() if t.requires_grad]

    @property
    def tau(self):
        return self.tensors["tau"][0]

    def table(self, position):
        """View of the embedding table for one position."""
        lo = int(self.offsets[position])
        return self.tensors["embeddings"][lo: lo + int(self.vocab[position])]

    def clone(self):
        tensors = {k: v.detach().clone().requires_grad_(v.requires_grad) for k, v in self.tensors.items()}
        return ModelParams(self.schema, self.config, tensors)

    def round_to_float32(self):
        """Copy whose values are exactly representable in the checkpoint precision."""
        out = self.clone()
        with torch.no_grad():
            for t in out.tensors.values():
                t.copy_(t.to(torch.float32).to(DTYPE))
        return out

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None


def _xavier(rng, fan_in, fan_out, shape):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(schema: FeatureSchema, config: ModelConfig = ModelConfig(), seed=0) -> ModelParams:
    """Xavier-uniform initialization; layer norms start at identity."""
    rng = np.random.default_rng(seed)
    d, P = config.d, schema.n_positions
    ff = config.ff_mult * d
    arrays = {}
    arrays["embeddings"] = np.concatenate([_xavier(rng, v, d, (v, d)) for v in schema.vocab_sizes()])
    arrays["mask"] = _xavier(rng, 1, d, (d,)) if config.learned_mask else np.zeros(d)
    arrays["pos"] = _xavier(rng, P, d, (P, d))
    for l in range(config.n_layers):
        p = f"blocks.{l}."
        arrays[p + "ln1.weight"] = np.ones(d)
        arrays[p + "ln1.bias"] = np.zeros(d)
        for w in ("wq", "wk", "wv", "wo"):
            arrays[p + "attn." + w] = _xavier(rng, d, d, (d, d))
        arrays[p + "ln2.weight"] = np.ones(d)
        arrays[p + "ln2.bias"] = np.zeros(d)
        arrays[p + "ff.w1"] = _xavier(rng, d, ff, (d, ff))
        arrays[p + "ff.b1"] = np.zeros(ff)
        arrays[p + "ff.w2"] = _xavier(rng, ff, d, (ff, d))
        arrays[p + "ff.b2"] = np.zeros(d)
    arrays["w_out"] = _xavier(rng, d, d, (d, d))
    arrays["tau"] = np.array([config.tau])
    tensors = {}
    for k, a in arrays.items():
        grad = {"tau": config.train_tau, "mask": config.learned_mask}.get(k, True)
        tensors[k] = torch.tensor(a, dtype=DTYPE, requires_grad=grad)
    return ModelParams(schema, config, tensors)


# ---------------------------------------------------------------- forward

@dataclass
class TokenInput:
    """Batched position states: ``tokens``/``weights``/``masked`` are ``(B, P)``."""

    tokens: torch.Tensor
    weights: torch.Tensor
    masked: torch.Tensor

    @classmethod
    def from_numpy(cls, tokens, weights, masked):
        return cls(torch.tensor(np.asarray(tokens), dtype=torch.long),
                   torch.tensor(np.asarray(weights), dtype=DTYPE),
                   torch.tensor(np.asarray(masked), dtype=torch.bool))


def embed_inputs(inp: TokenInput, params: ModelParams):
    tokens = torch.where(inp.masked, torch.zeros_like(inp.tokens), inp.tokens)
    if (tokens < 0).any() or (tokens >= params.vocab).any():
        bad = torch.nonzero((tokens < 0) | (tokens >= params.vocab))[0].tolist()
        raise IndexError(f"token id out of range at (sample, position) {tuple(bad)}")
    rows = params["embeddings"][tokens + params.offsets]
    rows = inp.weights.unsqueeze(-1) * rows
    x = torch.where(inp.masked.unsqueeze(-1), params["mask"], rows)
    return x + params["pos"]


def _layer_norm(x, weight, bias, eps=1e-5):
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * weight + bias


def _split_heads(t, n_heads):
    B, P, d = t.shape
    return t.reshape(B, P, n_heads, d // n_heads).transpose(1, 2)


def _attend(q, k, v, n_heads):
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(qh.shape[-1])
    out = torch.softmax(scores, dim=-1) @ vh
    B, _, P, _ = out.shape
    return out.transpose(1, 2).reshape(B, P, -1)


def _check_finite(x, where):
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite activation after {where}")


@dataclass
class EncodeOutput:
    """``H`` is ``(B, P, d)``. ``cache`` holds layer-0 projections for reuse."""

    H: torch.Tensor
    cache: "EncodeCache | None" = None


@dataclass
class EncodeCache:
    x: torch.Tensor
    q0: torch.Tensor
    k0: torch.Tensor
    v0: torch.Tensor
    H: torch.Tensor


def _block(x, params, l, qkv=None):
    p = f"blocks.{l}."
    h = _layer_norm(x, params[p + "ln1.weight"], params[p + "ln1.bias"])
    if qkv is None:
        qkv = (h @ params[p + "attn.wq"], h @ params[p + "attn.wk"], h @ params[p + "attn.wv"])
    x = x + _attend(*qkv, params.config.n_heads) @ params[p + "attn.wo"]
    h = _layer_norm(x, params[p + "ln2.weight"], params[p + "ln2.bias"])
    x = x + torch.relu(h @ params[p + "ff.w1"] + params[p + "ff.b1"]) @ params[p + "ff.w2"] + params[p + "ff.b2"]
    return x, qkv


def encode(x, params: ModelParams, keep_cache=False) -> EncodeOutput:
    """Run the encoder blocks over a ``(B, P, d)`` token matrix."""
    _check_finite(x, "embedding")
    x_in, first = x, None
    for l in range(params.config.n_layers):
        x, qkv = _block(x, params, l)
        if l == 0:
            first = qkv
        _check_finite(x, f"block {l}")
    cache = None
    if keep_cache:
        if first is None:
            first = (x_in, x_in, x_in)
        cache = EncodeCache(x_in.detach(), *(t.detach() for t in first), x.detach())
    return EncodeOutput(x, cache)


def encode_cached(x, params: ModelParams, frozen, cache: EncodeCache) -> EncodeOutput:
    """Encode reusing the previous pass's layer-0 projections for frozen positions.

    ``frozen`` is a ``(P,)`` boolean mask of positions whose input rows are
    unchanged since ``cache`` was built. Only the other rows are projected in
    the first block. Deeper blocks are recomputed in full: with bidirectional
    attention their keys and values depend on every position.
    """
    frozen = torch.as_tensor(np.asarray(frozen), dtype=torch.bool)
    if cache.x.shape != x.shape:
        raise ContractError(f"cache built for shape {tuple(cache.x.shape)}, got {tuple(x.shape)}")
    if not torch.equal(cache.x[:, frozen], x[:, frozen]):
        raise ContractError("frozen positions changed since the cache was built")
    if not frozen.any():
        return encode(x, params, keep_cache=True)
    if frozen.all():
        return EncodeOutput(cache.H, cache)
    _check_finite(x, "embedding")
    if params.config.n_layers == 0:
        return EncodeOutput(x, EncodeCache(x.detach(), x, x, x, x.detach()))
    fresh = ~frozen
    p = "blocks.0."
    h = _layer_norm(x[:, fresh], params[p + "ln1.weight"], params[p + "ln1.bias"])
    qkv = []
    for name, old in (("wq", cache.q0), ("wk", cache.k0), ("wv", cache.v0)):
        t = old.clone()
        t[:, fresh] = h @ params[p + "attn." + name]
        qkv.append(t)
    y, _ = _block(x, params, 0, tuple(qkv))
    _check_finite(y, "block 0")
    for l in range(1, params.config.n_layers):
        y, _ = _block(y, params, l)
        _check_finite(y, f"block {l}")
    return EncodeOutput(y, EncodeCache(x.detach(), *(t.detach() for t in qkv), y.detach()))


def _normalize(v, what):
    norm = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
    if (norm == 0).any():
        raise NumericError(f"zero vector in {what}")
    return v / norm


def generate_vectors(H, params: ModelParams):
    """Unit generation vector for every position: ``normalize(H @ W_out)``."""
    return _normalize(H @ params["w_out"], "generation head")


def generate_vector(H, k, params: ModelParams):
    return generate_vectors(H[:, k], params)


def cosine(u, v):
    """Cosine similarity along the last axis (torch or numpy input)."""
    if isinstance(u, torch.Tensor) or isinstance(v, torch.Tensor):
        u, v = torch.as_tensor(u, dtype=DTYPE), torch.as_tensor(v, dtype=DTYPE)
        nu = torch.linalg.vector_norm(u, dim=-1)
        nv = torch.linalg.vector_norm(v, dim=-1)
        if (nu == 0).any() or (nv == 0).any():
            raise NumericError("cosine of a zero-norm vector")
        return (u * v).sum(-1) / (nu * nv)
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    nu, nv = np.linalg.norm(u, axis=-1), np.linalg.norm(v, axis=-1)
    if np.any(nu == 0) or np.any(nv == 0):
        raise NumericError("cosine of a zero-norm vector")
    return np.clip((u * v).sum(-1) / (nu * nv), -1.0, 1.0)


def score_label(H, params: ModelParams):
    """``(s0, s1)``: cosine of the label-slot generation vector with the two label rows, over tau."""
    g = generate_vectors(H[:, params.schema.label_position], params)
    rows = _normalize(params.table(params.schema.label_position)[1:3], "label embedding")
    s = (g @ rows.T) / params.tau
    return s[:, 0], s[:, 1]


def check_gradients(params: ModelParams):
    """Raise if any gradient is non-finite; missing gradients become zeros."""
    for name, t in params.tensors.items():
        if not t.requires_grad:
            continue
        if t.grad is None:
            t.grad = torch.zeros_like(t)
        elif not torch.isfinite(t.grad).all():
            raise NumericError(f"non-finite gradient for parameter {name}")


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(params: ModelParams, directory, extra=None):
    """Write ``meta.txt``, ``manifest.txt``, ``schema.txt`` and one ``.f32`` file per tensor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"version": CHECKPOINT_VERSION, "schema_hash": params.schema.hash(), **asdict(params.config)}
    meta["tau_value"] = repr(float(params.tau))
    meta.update(extra or {})
    (directory / "meta.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    (directory / "schema.txt").write_text(params.schema.to_text())
    lines = []
    for name, t in params.tensors.items():
        fname = name.replace("/", "_") + ".f32"
        arr = t.detach().numpy().astype("<f4")
        arr.tofile(directory / fname)
        lines.append(f"{name} {fname} {','.join(str(s) for s in arr.shape)}\n")
    (directory / "manifest.txt").write_text("".join(lines))


def read_meta(directory):
    meta = {}
    for line in (Path(directory) / "meta.txt").read_text().splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    return meta


def load_checkpoint(directory, schema: FeatureSchema | None = None) -> ModelParams:
    """Load a checkpoint; with ``schema`` given, refuse on a schema-hash mismatch."""
    directory = Path(directory)
    meta = read_meta(directory)
    ck_schema = parse_schema((directory / "schema.txt").read_text())
    if schema is not None and schema.hash() != meta["schema_hash"]:
        raise ConfigError(f"checkpoint schema hash {meta['schema_hash']} != data schema hash {schema.hash()}")
    if ck_schema.hash() != meta["schema_hash"]:
        raise ConfigError("checkpoint schema.txt does not match its recorded hash")
    config = ModelConfig(d=int(meta["d"]), n_layers=int(meta["n_layers"]), n_heads=int(meta["n_heads"]),
                         ff_mult=int(meta["ff_mult"]), tau=float(meta["tau"]),
                         train_tau=meta["train_tau"] == "True", learned_mask=meta["learned_mask"] == "True")
    template = init_params(ck_schema, config)
    tensors = {}
    for line in (directory / "manifest.txt").read_text().splitlines():
        name, fname, shape = line.split()
        shape = tuple(int(s) for s in shape.split(",")) if shape else ()
        if name not in template.tensors:
            raise ConfigError(f"checkpoint has unknown tensor {name}")
        if tuple(template[name].shape) != shape:
            raise ConfigError(f"tensor {name}: shape {shape}, expected {tuple(template[name].shape)}")
        arr = np.fromfile(directory / fname, dtype="<f4")
        if arr.size != int(np.prod(shape)):
            raise ConfigError(f"tensor {name}: file holds {arr.size} values, expected {np.prod(shape)}")
        tensors[name] = torch.tensor(arr.reshape(shape).astype(np.float64), dtype=DTYPE,
                                     requires_grad=template[name].requires_grad)
    missing = set(template.tensors) - set(tensors)
    if missing:
        raise ConfigError(f"checkpoint is missing tensors {sorted(missing)}")
    return ModelParams(ck_schema, config, tensors)
