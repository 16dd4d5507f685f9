"""Byte-level tokenizer and a tiny pre-norm decoder-only transformer."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BOS, EOS, PAD, SEP = 256, 257, 258, 259
SPECIAL = {"<bos>": BOS, "<eos>": EOS, "<pad>": PAD, "<sep>": SEP}
VOCAB_SIZE = 260

ROLES = ("base", "sft", "reward", "ppo")
_ALLOWED_PARENT = {"base": (None, "base"), "sft": ("base",), "reward": ("sft",), "ppo": ("sft",)}


class Tokenizer:
    """Bytes 0..255 map to themselves; BOS/EOS/PAD/SEP sit above them."""

    vocab_size = VOCAB_SIZE
    bos, eos, pad, sep = BOS, EOS, PAD, SEP

    def encode(self, text, bos: bool = False, eos: bool = False) -> list[int]:
        raw = text if isinstance(text, (bytes, bytearray)) else text.encode("utf-8")
        ids = list(raw)
        if bos:
            ids.insert(0, BOS)
        if eos:
            ids.append(EOS)
        return ids

    def decode_bytes(self, ids) -> bytes:
        return bytes(int(i) for i in ids if int(i) < 256)

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")


tokenizer = Tokenizer()


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    context_len: int = 256
    vocab_size: int = VOCAB_SIZE
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.context_len < 16:
            raise ValueError("context_len must be at least 16")
        if self.n_layers < 1:
            raise ValueError("n_layers must be positive")


@dataclass(frozen=True)
class PolicyCheckpoint:
    config: ModelConfig
    params: dict
    role: str = "base"
    provenance: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        expected = param_shapes(self.config)
        for name, shape in expected.items():
            if name not in self.params:
                raise ValueError(f"missing parameter {name}")
            if tuple(self.params[name].shape) != shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    def derive(self, role: str, params: dict | None = None, record: dict | None = None) -> "PolicyCheckpoint":
        """New checkpoint with a role transition and one more provenance record."""
        if self.role not in _ALLOWED_PARENT[role]:
            raise ValueError(f"role transition {self.role} -> {role} not allowed")
        prov = self.provenance + ((record,) if record is not None else ())
        return PolicyCheckpoint(self.config, dict(params if params is not None else self.params), role, prov)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.role.encode())
        h.update(json.dumps(dataclasses.asdict(self.config), sort_keys=True).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, v = cfg.d_model, cfg.vocab_size
    shapes = {"tok_emb": (v, d), "pos_emb": (cfg.context_len, d)}
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.w_qkv": (d, 3 * d), p + "attn.b_qkv": (3 * d,),
            p + "attn.w_out": (d, d), p + "attn.b_out": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w_in": (d, 4 * d), p + "mlp.b_in": (4 * d,),
            p + "mlp.w_out": (4 * d, d), p + "mlp.b_out": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "lm_head": (d, v)})
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    g = ad.Graph(cfg.seed)
    out = {}
    resid_std = 0.02 / np.sqrt(2 * cfg.n_layers)
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            out[name] = np.ones(shape)
        elif name.endswith((".b", "b_qkv", "b_out", "b_in")):
            out[name] = np.zeros(shape)
        elif name.endswith(("attn.w_out", "mlp.w_out")):
            out[name] = g.param(shape, resid_std).data
        else:
            out[name] = g.param(shape, 0.02).data
    return out


def new_base(cfg: ModelConfig | None = None) -> PolicyCheckpoint:
    cfg = cfg or ModelConfig()
    return PolicyCheckpoint(cfg, init_params(cfg), "base",
                            ({"stage": "init", "seed": cfg.seed},))


def block_index(name: str) -> int | None:
    if name.startswith("blocks."):
        return int(name.split(".")[1])
    return None


# ---------------------------------------------------------------- forward

def as_tensors(params: dict) -> dict[str, Tensor]:
    return {k: Tensor(v, name=k) for k, v in params.items()}


def _block(x: Tensor, p: dict[str, Tensor], i: int, cfg: ModelConfig, causal: np.ndarray) -> Tensor:
    B, T, d = x.shape
    H = cfg.n_heads
    dh = d // H
    b = f"blocks.{i}."
    h = ad.layer_norm(x, p[b + "ln1.g"], p[b + "ln1.b"])
    qkv = ad.add(ad.matmul(h, p[b + "attn.w_qkv"]), p[b + "attn.b_qkv"])
    qkv = ad.transpose(ad.reshape(qkv, (B, T, 3, H, dh)), (2, 0, 3, 1, 4))
    q, k, v = (ad.slice_(qkv, j) for j in range(3))
    att = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    att = ad.softmax(ad.masked_fill(att, causal, -1e30), axis=-1)
    y = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, T, d))
    y = ad.add(ad.matmul(y, p[b + "attn.w_out"]), p[b + "attn.b_out"])
    x = ad.add(x, y)
    h = ad.layer_norm(x, p[b + "ln2.g"], p[b + "ln2.b"])
    h = ad.gelu(ad.add(ad.matmul(h, p[b + "mlp.w_in"]), p[b + "mlp.b_in"]))
    h = ad.add(ad.matmul(h, p[b + "mlp.w_out"]), p[b + "mlp.b_out"])
    return ad.add(x, h)


def trunk(p: dict[str, Tensor], cfg: ModelConfig, tokens, frozen_blocks: int = 0) -> Tensor:
    """Final-norm hidden states, shape (B, T, d_model).

    The embeddings and the first ``frozen_blocks`` blocks run without recording
    a graph when ``frozen_blocks > 0`` (their parameters get no gradient).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    B, T = tokens.shape
    if T > cfg.context_len:
        raise ValueError(f"sequence length {T} exceeds context_len {cfg.context_len}")
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)

    def stem():
        x = ad.embedding(p["tok_emb"], tokens)
        x = ad.add(x, ad.embedding(p["pos_emb"], np.broadcast_to(np.arange(T), (B, T))))
        for i in range(frozen_blocks):
            x = _block(x, p, i, cfg, causal)
        return x

    if frozen_blocks > 0:
        with ad.no_grad():
            x = ad.constant(stem().data)
    else:
        x = stem()
    for i in range(frozen_blocks, cfg.n_layers):
        x = _block(x, p, i, cfg, causal)
    return ad.layer_norm(x, p["ln_f.g"], p["ln_f.b"])


def logits_tensor(p: dict[str, Tensor], cfg: ModelConfig, tokens) -> Tensor:
    return ad.matmul(trunk(p, cfg, tokens), p["lm_head"])


@dataclass(frozen=True)
class ScriptedModel:
    """Stand-in policy whose logits come from ``fn(tokens (B, T)) -> (B, T, V)``.

    Lets tests pin exact distributions (uniform, one-hot) through the same
    inference code paths as a trained checkpoint.
    """

    config: ModelConfig
    fn: object
    role: str = "sft"

    def forward_logits(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        return np.asarray(self.fn(tokens), dtype=np.float64)


def logits(model: PolicyCheckpoint, tokens) -> np.ndarray:
    """Next-token logits (B, T, V) without recording a graph."""
    if isinstance(model, ScriptedModel):
        return model.forward_logits(tokens)
    with ad.no_grad():
        return logits_tensor(as_tensors(model.params), model.config, tokens).data


# -------------------------------------------------------------- batching

def pad_batch(seqs, pad: int = PAD) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def lm_loss_tensor(p: dict[str, Tensor], cfg: ModelConfig, batch, loss_mask=None) -> Tensor:
    """Mean next-token NLL. ``loss_mask[i][t]`` marks target positions (t >= 1) that count."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    for s in batch:
        if len(s) > cfg.context_len:
            raise ValueError(f"sequence of length {len(s)} exceeds context_len {cfg.context_len}")
    toks = pad_batch(batch)
    inputs, targets = toks[:, :-1], toks[:, 1:]
    weight = (targets != PAD).astype(np.float64)
    if loss_mask is not None:
        m = np.zeros_like(toks, dtype=np.float64)
        for i, row in enumerate(loss_mask):
            m[i, :len(row)] = row
        weight = weight * m[:, 1:]
    total = weight.sum()
    if total == 0:
        raise ValueError("no supervised positions in batch")
    logp = ad.log_softmax(logits_tensor(p, cfg, inputs), axis=-1)
    picked = ad.gather_last(logp, np.where(targets == PAD, 0, targets))
    return ad.scale(ad.sum_(ad.mul(picked, ad.constant(weight))), -1.0 / total)


def nll_from_logits(z: np.ndarray, targets: np.ndarray, weight: np.ndarray) -> float:
    """Weighted mean of -log softmax(z)[target]."""
    lp = _log_softmax_np(z)
    picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    return float(-(picked * weight).sum() / weight.sum())


def lm_loss(model: PolicyCheckpoint, batch, loss_mask=None) -> float:
    if isinstance(model, ScriptedModel):
        toks = pad_batch(batch)
        targets = toks[:, 1:]
        weight = (targets != PAD).astype(np.float64)
        if loss_mask is not None:
            m = np.zeros_like(toks, dtype=np.float64)
            for i, row in enumerate(loss_mask):
                m[i, :len(row)] = row
            weight = weight * m[:, 1:]
        return nll_from_logits(model.forward_logits(toks[:, :-1]), np.where(targets == PAD, 0, targets), weight)
    with ad.no_grad():
        return lm_loss_tensor(as_tensors(model.params), model.config, batch, loss_mask).item()


# ------------------------------------------------------------- inference

def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    s = x - x.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def generate(model: PolicyCheckpoint, prompt, max_new: int, temperature: float = 1.0,
             seed: int = 0, logits_fn=None) -> list[int]:
    """Sample until EOS or ``max_new`` tokens. Returned tokens exclude the prompt and EOS.

    ``temperature == 0`` is greedy argmax (lowest index wins ties). PAD is never
    emitted. ``logits_fn(tokens) -> (V,)`` overrides the model (used for rigged tests).
    """
    prompt = list(prompt)
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    if not prompt:
        raise ValueError("prompt must be non-empty")
    ctx = model.config.context_len if model is not None else None
    if ctx is not None and len(prompt) > ctx:
        raise ValueError(f"prompt length {len(prompt)} exceeds context_len {ctx}")
    rng = np.random.default_rng(seed)
    seq = list(prompt)
    out: list[int] = []
    for _ in range(max_new):
        if ctx is not None and len(seq) >= ctx:
            break
        if logits_fn is not None:
            z = np.asarray(logits_fn(seq), dtype=np.float64).copy()
        else:
            z = logits(model, np.asarray(seq)[None, :])[0, -1].copy()
        if PAD < len(z):
            z[PAD] = -np.inf
        if temperature == 0:
            nxt = int(np.argmax(z))
        else:
            lp = _log_softmax_np(z / temperature)
            nxt = int(rng.choice(len(lp), p=np.exp(lp)))
        if nxt == EOS:
            break
        out.append(nxt)
        seq.append(nxt)
    return out


def sequence_logprob(model: PolicyCheckpoint, context, continuation) -> tuple[float, int]:
    """Sum of log p(continuation | context) and the continuation token count."""
    context, continuation = list(context), list(continuation)
    if not continuation:
        raise ValueError("empty continuation")
    if not context:
        context = [BOS]
    seq = context + continuation
    if len(seq) > model.config.context_len:
        raise ValueError(f"context+continuation length {len(seq)} exceeds context_len")
    z = logits(model, np.asarray(seq[:-1])[None, :])[0]
    lp = _log_softmax_np(z)
    start = len(context) - 1
    idx = np.arange(start, start + len(continuation))
    return float(lp[idx, continuation].sum()), len(continuation)


def token_logprobs(model: PolicyCheckpoint, seq, start: int) -> np.ndarray:
    """log p(seq[t] | seq[:t]) for t in [start, len(seq))."""
    z = logits(model, np.asarray(seq[:-1])[None, :])[0]
    lp = _log_softmax_np(z)
    t = np.arange(start, len(seq))
    return lp[t - 1, np.asarray(seq)[t]]


# ------------------------------------------------------------ persistence

def save_checkpoint(ckpt: PolicyCheckpoint, path) -> Path:
    """Directory with ``manifest.txt`` plus one little-endian float64 file per parameter."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = ["format=okapi-checkpoint-1", f"role={ckpt.role}"]
    for k, v in dataclasses.asdict(ckpt.config).items():
        lines.append(f"config.{k}={v}")
    for i, rec in enumerate(ckpt.provenance):
        lines.append(f"provenance.{i}={json.dumps(rec, sort_keys=True)}")
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
        fname = name + ".f64"
        (path / fname).write_bytes(arr.tobytes())
        shape = "x".join(str(s) for s in arr.shape)
        lines.append(f"param={name} shape={shape} file={fname} offset=0 dtype=float64-le")
    tmp = path / "manifest.txt.tmp"
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path / "manifest.txt")
    return path


def load_checkpoint(path) -> PolicyCheckpoint:
    path = Path(path)
    cfg_vals, prov, params, role = {}, {}, {}, None
    for line in (path / "manifest.txt").read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("param="):
            fields = dict(part.split("=", 1) for part in line.split(" "))
            shape = tuple(int(s) for s in fields["shape"].split("x") if s)
            raw = (path / fields["file"]).read_bytes()[int(fields["offset"]):]
            params[fields["param"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
            continue
        key, val = line.split("=", 1)
        if key == "role":
            role = val
        elif key.startswith("config."):
            cfg_vals[key[7:]] = int(val)
        elif key.startswith("provenance."):
            prov[int(key.split(".")[1])] = json.loads(val)
    cfg = ModelConfig(**cfg_vals)
    return PolicyCheckpoint(cfg, params, role, tuple(prov[i] for i in sorted(prov)))
