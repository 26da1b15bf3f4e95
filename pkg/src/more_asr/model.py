"""The victim: a small pre-LN transformer encoder-decoder over frontend features.

Parameters live in one flat float64 tensor; every named weight is a view into
it, so checkpoints are a single contiguous dump and training is one SGD update.
Gradients come from torch autograd in double precision.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CheckpointError, InvalidConfig, InvalidInput, NumericalFailure
from .signal import FrontendConfig, Waveform, features_torch, frame_count
from .tokens import BOS, EOS, PAD

log = logging.getLogger(__name__)

DTYPE = torch.float64
NEG_INF = float("-inf")


@dataclass(frozen=True)
class ModelConfig:
    n_enc: int = 2
    n_dec: int = 2
    d_model: int = 32
    heads: int = 2
    d_ff: int = 64
    vocab_size: int = 64
    max_len: int = 256
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    init_seed: int = 0
    stack: int = 4

    def __post_init__(self):
        if min(self.n_enc, self.n_dec, self.d_model, self.heads, self.d_ff) <= 0:
            raise InvalidConfig("layer counts and widths must be positive")
        if self.d_model % self.heads:
            raise InvalidConfig(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.vocab_size < 4:
            raise InvalidConfig("vocab_size must be at least 4 (PAD, BOS, EOS and one word)")
        if self.max_len < 2:
            raise InvalidConfig("max_len must be at least 2")
        if self.stack < 1:
            raise InvalidConfig("stack must be at least 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if isinstance(d.get("frontend"), dict):
            d["frontend"] = FrontendConfig(**d["frontend"])
        return cls(**d)


def param_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Named parameter slices in declaration (and checkpoint) order."""
    d, ff, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    out: list[tuple[str, tuple[int, ...]]] = []

    def ln(prefix):
        out.extend([(f"{prefix}.g", (d,)), (f"{prefix}.b", (d,))])

    def attn(prefix):
        for m in "qkvo":
            out.append((f"{prefix}.w{m}", (d, d)))
            out.append((f"{prefix}.b{m}", (d,)))

    def mlp(prefix):
        out.extend([(f"{prefix}.w1", (ff, d)), (f"{prefix}.b1", (ff,)),
                    (f"{prefix}.w2", (d, ff)), (f"{prefix}.b2", (d,))])

    out.extend([("enc.in.w", (d, cfg.stack * cfg.frontend.d_feat)), ("enc.in.b", (d,))])
    for i in range(cfg.n_enc):
        ln(f"enc.{i}.ln1"); attn(f"enc.{i}.self"); ln(f"enc.{i}.ln2"); mlp(f"enc.{i}.ff")
    ln("enc.ln")
    out.append(("dec.emb", (V, d)))
    for i in range(cfg.n_dec):
        ln(f"dec.{i}.ln1"); attn(f"dec.{i}.self"); ln(f"dec.{i}.ln2"); attn(f"dec.{i}.cross")
        ln(f"dec.{i}.ln3"); mlp(f"dec.{i}.ff")
    ln("dec.ln")
    out.extend([("out.w", (V, d)), ("out.b", (V,))])
    return out


@dataclass(frozen=True, eq=False)
class ModelBundle:
    config: ModelConfig
    flat: torch.Tensor

    def __post_init__(self):
        n = sum(math.prod(s) for _, s in param_layout(self.config))
        if self.flat.ndim != 1 or self.flat.numel() != n:
            raise InvalidConfig(f"parameter vector has {self.flat.numel()} entries, layout needs {n}")

    @property
    def param_count(self) -> int:
        return self.flat.numel()

    def params(self, flat: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
        flat = self.flat if flat is None else flat
        views, off = {}, 0
        for name, shape in param_layout(self.config):
            n = math.prod(shape)
            views[name] = flat[off:off + n].view(shape)
            off += n
        return views

    def with_flat(self, flat: torch.Tensor) -> "ModelBundle":
        return ModelBundle(self.config, flat.detach().clone())

    def digest(self) -> str:
        return hashlib.sha256(self.flat.numpy().tobytes()).hexdigest()[:16]


def init_model(config: ModelConfig) -> ModelBundle:
    """Scaled-uniform init from ``config.init_seed``: U(-sqrt(3/fan_in), +sqrt(3/fan_in))."""
    if not isinstance(config, ModelConfig):
        raise InvalidConfig("init_model expects a ModelConfig")
    rng = np.random.default_rng(config.init_seed)
    chunks = []
    for name, shape in param_layout(config):
        kind = name.rsplit(".", 1)[-1]
        if kind == "g":
            chunks.append(np.ones(shape))
        elif len(shape) == 1:
            chunks.append(np.zeros(shape))
        else:
            fan_in = config.d_model if name == "dec.emb" else shape[1]
            a = math.sqrt(3.0 / fan_in)
            chunks.append(rng.uniform(-a, a, size=shape))
    flat = torch.from_numpy(np.concatenate([c.ravel() for c in chunks]).astype(np.float64))
    return ModelBundle(config, flat)


# ---------------------------------------------------------------- forward pass


class MacCounter(dict):
    """Multiply-accumulate tally per bucket, filled by an instrumented forward pass."""

    def add(self, bucket: str, n: int):
        self[bucket] = self.get(bucket, 0) + int(n)


def _mm(a, b, counter, bucket):
    if counter is not None:
        batch = math.prod(torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])) if a.ndim > 2 or b.ndim > 2 else 1
        counter.add(bucket, batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
    return a @ b


def _linear(x, w, b, counter=None, bucket="proj"):
    if counter is not None:
        counter.add(bucket, math.prod(x.shape[:-1]) * w.shape[0] * w.shape[1])
    return x @ w.T + b


def _layer_norm(x, p, prefix):
    return F.layer_norm(x, x.shape[-1:], p[f"{prefix}.g"], p[f"{prefix}.b"], eps=1e-5)


def sinusoid(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=DTYPE)[:, None]
    i = torch.arange(0, d, 2, dtype=DTYPE)
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=DTYPE), i / d)
    pe = torch.zeros(n, d, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe


def _attention(p, prefix, x, kv, heads, key_mask=None, causal=False, counter=None, bucket="attn"):
    """Multi-head attention; key_mask is (B, S) True for valid keys."""
    B, L, d = x.shape
    S = kv.shape[1]
    dh = d // heads
    q = _linear(x, p[f"{prefix}.wq"], p[f"{prefix}.bq"], counter).view(B, L, heads, dh).transpose(1, 2)
    k = _linear(kv, p[f"{prefix}.wk"], p[f"{prefix}.bk"], counter).view(B, S, heads, dh).transpose(1, 2)
    v = _linear(kv, p[f"{prefix}.wv"], p[f"{prefix}.bv"], counter).view(B, S, heads, dh).transpose(1, 2)
    scores = _mm(q, k.transpose(-1, -2), counter, bucket) / math.sqrt(dh)
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], NEG_INF)
    if causal:
        future = torch.ones(L, S, dtype=torch.bool).triu(1)
        scores = scores.masked_fill(future, NEG_INF)
    att = torch.softmax(scores, dim=-1)
    out = _mm(att, v, counter, bucket).transpose(1, 2).reshape(B, L, d)
    return _linear(out, p[f"{prefix}.wo"], p[f"{prefix}.bo"], counter)


def _mlp(p, prefix, x, counter=None):
    # exact (erf) GELU: a kink here would make finite-difference checks ill-posed
    h = torch.nn.functional.gelu(_linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"], counter, "ff"))
    return _linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"], counter, "ff")


def encoder_steps(n_frames: int, stack: int) -> int:
    return -(-n_frames // stack)


def stack_frames(feats: torch.Tensor, frame_mask: torch.Tensor | None, stack: int):
    """Concatenate groups of ``stack`` consecutive frames; a partial last group is zero-padded."""
    B, n, d = feats.shape
    steps = encoder_steps(n, stack)
    if frame_mask is not None:
        # frames past a row's end straddle padding; zero them so batched == unbatched
        feats = feats.masked_fill(~frame_mask[..., None], 0.0)
    if steps * stack != n:
        feats = F.pad(feats, (0, 0, 0, steps * stack - n))
    if frame_mask is not None:
        if steps * stack != n:
            frame_mask = F.pad(frame_mask, (0, steps * stack - n))
        frame_mask = frame_mask.view(B, steps, stack)[:, :, 0]
    return feats.reshape(B, steps, stack * d), frame_mask


def encode(bundle: ModelBundle, feats: torch.Tensor, frame_mask: torch.Tensor | None = None,
           flat: torch.Tensor | None = None, counter: MacCounter | None = None):
    """(B, F, d_feat) features -> ((B, F', d_model) memory, (B, F') mask), F' = ceil(F / stack)."""
    cfg = bundle.config
    p = bundle.params(flat)
    x, mask = stack_frames(feats, frame_mask, cfg.stack)
    h = _linear(x, p["enc.in.w"], p["enc.in.b"], counter, "enc") + sinusoid(x.shape[1], cfg.d_model)
    for i in range(cfg.n_enc):
        a = _layer_norm(h, p, f"enc.{i}.ln1")
        h = h + _attention(p, f"enc.{i}.self", a, a, cfg.heads, mask, counter=counter, bucket="enc")
        h = h + _mlp(p, f"enc.{i}.ff", _layer_norm(h, p, f"enc.{i}.ln2"))
    return _layer_norm(h, p, "enc.ln"), mask


def decode_logits(bundle: ModelBundle, memory: torch.Tensor, tokens: torch.Tensor,
                  memory_mask: torch.Tensor | None = None, flat: torch.Tensor | None = None,
                  counter: MacCounter | None = None) -> torch.Tensor:
    """(B, L) decoder inputs -> (B, L, V) next-token logits, causally masked."""
    cfg = bundle.config
    p = bundle.params(flat)
    L = tokens.shape[1]
    if L > cfg.max_len:
        raise InvalidInput(f"decoder input of length {L} exceeds max_len={cfg.max_len}")
    pad_mask = tokens != PAD
    h = p["dec.emb"][tokens] * math.sqrt(cfg.d_model) + sinusoid(L, cfg.d_model)
    for i in range(cfg.n_dec):
        a = _layer_norm(h, p, f"dec.{i}.ln1")
        h = h + _attention(p, f"dec.{i}.self", a, a, cfg.heads, pad_mask, causal=True,
                           counter=counter, bucket="self_attn")
        a = _layer_norm(h, p, f"dec.{i}.ln2")
        h = h + _attention(p, f"dec.{i}.cross", a, memory, cfg.heads, memory_mask,
                           counter=counter, bucket="cross_attn")
        h = h + _mlp(p, f"dec.{i}.ff", _layer_norm(h, p, f"dec.{i}.ln3"), counter)
    h = _layer_norm(h, p, "dec.ln")
    return _linear(h, p["out.w"], p["out.b"], counter, "vocab")


def _as_feats(features) -> torch.Tensor:
    f = torch.as_tensor(features, dtype=DTYPE)
    if f.ndim == 2:
        f = f[None]
    return f


def _check_target(bundle, target) -> torch.Tensor:
    t = torch.as_tensor(list(target) if not isinstance(target, torch.Tensor) else target, dtype=torch.long)
    if t.ndim != 1 or t.numel() == 0 or int(t[0]) != BOS:
        raise InvalidInput("teacher-forced target must be a non-empty sequence starting with BOS")
    if t.numel() > bundle.config.max_len:
        raise InvalidInput(f"target length {t.numel()} exceeds max_len={bundle.config.max_len}")
    return t


def forward_teacher_forced(bundle: ModelBundle, features, target: Sequence[int],
                           flat: torch.Tensor | None = None) -> torch.Tensor:
    """Logits (|target| x V); row i scores the token following target[:i+1]."""
    t = _check_target(bundle, target)
    memory, _ = encode(bundle, _as_feats(features), flat=flat)
    return decode_logits(bundle, memory, t[None], flat=flat)[0]


@dataclass
class DecodeResult:
    tokens: list[int]
    prob_rows: np.ndarray
    ended_by_eos: bool

    def __len__(self):
        return len(self.tokens)


class _IncrementalDecoder:
    """Token-at-a-time decoder with cached self-attention keys/values.

    Produces the same logits as :func:`decode_logits` on the growing prefix
    (up to float rounding); rows that already finished keep being fed PAD and
    their outputs are ignored by the caller.
    """

    def __init__(self, bundle: ModelBundle, memory: torch.Tensor, memory_mask: torch.Tensor | None):
        cfg = bundle.config
        self.cfg, self.p = cfg, bundle.params()
        self.B = memory.shape[0]
        self.dh = cfg.d_model // cfg.heads
        self.pos = sinusoid(cfg.max_len, cfg.d_model)
        self.mask = None if memory_mask is None else ~memory_mask[:, None, None, :]
        self.cross = []
        for i in range(cfg.n_dec):
            pre = f"dec.{i}.cross"
            k = self._split(_linear(memory, self.p[f"{pre}.wk"], self.p[f"{pre}.bk"]))
            v = self._split(_linear(memory, self.p[f"{pre}.wv"], self.p[f"{pre}.bv"]))
            self.cross.append((k, v))
        self.cache: list[tuple[torch.Tensor, torch.Tensor] | None] = [None] * cfg.n_dec
        self.t = 0

    def _split(self, x):
        return x.view(x.shape[0], x.shape[1], self.cfg.heads, self.dh).transpose(1, 2)

    def _attend(self, q, k, v, mask=None):
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.dh)
        if mask is not None:
            scores = scores.masked_fill(mask, NEG_INF)
        out = torch.softmax(scores, dim=-1) @ v
        return out.transpose(1, 2).reshape(self.B, 1, self.cfg.d_model)

    def step(self, tokens: torch.Tensor) -> torch.Tensor:
        cfg, p = self.cfg, self.p
        if self.t >= cfg.max_len:
            raise InvalidInput(f"decoder position {self.t} exceeds max_len={cfg.max_len}")
        h = p["dec.emb"][tokens][:, None] * math.sqrt(cfg.d_model) + self.pos[self.t]
        for i in range(cfg.n_dec):
            pre = f"dec.{i}.self"
            a = _layer_norm(h, p, f"dec.{i}.ln1")
            q = self._split(_linear(a, p[f"{pre}.wq"], p[f"{pre}.bq"]))
            k = self._split(_linear(a, p[f"{pre}.wk"], p[f"{pre}.bk"]))
            v = self._split(_linear(a, p[f"{pre}.wv"], p[f"{pre}.bv"]))
            if self.cache[i] is not None:
                k = torch.cat([self.cache[i][0], k], dim=2)
                v = torch.cat([self.cache[i][1], v], dim=2)
            self.cache[i] = (k, v)
            h = h + _linear(self._attend(q, k, v), p[f"{pre}.wo"], p[f"{pre}.bo"])
            pre = f"dec.{i}.cross"
            a = _layer_norm(h, p, f"dec.{i}.ln2")
            q = self._split(_linear(a, p[f"{pre}.wq"], p[f"{pre}.bq"]))
            ck, cv = self.cross[i]
            h = h + _linear(self._attend(q, ck, cv, self.mask), p[f"{pre}.wo"], p[f"{pre}.bo"])
            h = h + _mlp(p, f"dec.{i}.ff", _layer_norm(h, p, f"dec.{i}.ln3"))
        self.t += 1
        h = _layer_norm(h, p, "dec.ln")
        return _linear(h, p["out.w"], p["out.b"])[:, 0]


@torch.no_grad()
def greedy_decode_batch(bundle: ModelBundle, feats: torch.Tensor, frame_mask: torch.Tensor | None,
                        max_len: int | None = None, keep_probs: bool = True) -> list[DecodeResult]:
    """Greedy decoding for a padded batch; each row stops at its own EOS.

    ``max_len`` counts emitted tokens (BOS excluded) and defaults to L_max.
    """
    cfg = bundle.config
    max_len = cfg.max_len if max_len is None else max_len
    if not 0 <= max_len <= cfg.max_len:
        raise InvalidInput(f"max_len={max_len} must lie in [0, L_max={cfg.max_len}]")
    B = feats.shape[0]
    memory, mem_mask = encode(bundle, feats, frame_mask)
    dec = _IncrementalDecoder(bundle, memory, mem_mask)
    tok = torch.full((B,), BOS, dtype=torch.long)
    done = torch.zeros(B, dtype=torch.bool)
    out_tokens: list[list[int]] = [[] for _ in range(B)]
    rows: list[list[torch.Tensor]] = [[] for _ in range(B)]
    for _ in range(max_len):
        probs = torch.softmax(dec.step(tok), dim=-1)
        nxt = probs.argmax(dim=-1)
        alive = (~done).nonzero().flatten().tolist()
        for b in alive:
            out_tokens[b].append(int(nxt[b]))
            if keep_probs:
                rows[b].append(probs[b])
        tok = torch.where(done, torch.full_like(nxt, PAD), nxt)
        done = done | (tok == EOS)
        if bool(done.all()):
            break
    results = []
    for b in range(B):
        pr = torch.stack(rows[b]).numpy() if rows[b] else np.zeros((0, cfg.vocab_size))
        ended = bool(out_tokens[b]) and out_tokens[b][-1] == EOS
        results.append(DecodeResult(out_tokens[b], pr, ended))
    return results


def greedy_decode(bundle: ModelBundle, features, max_len: int | None = None) -> DecodeResult:
    return greedy_decode_batch(bundle, _as_feats(features), None, max_len)[0]


def transcribe(bundle: ModelBundle, waveforms: Sequence, max_len: int | None = None,
               batch_size: int = 32) -> list[DecodeResult]:
    """Greedy-decode a list of waveforms (numpy arrays or Waveform) in padded batches."""
    out = []
    for i in range(0, len(waveforms), batch_size):
        chunk = [torch.tensor(np.asarray(getattr(w, "samples", w)), dtype=DTYPE) for w in waveforms[i:i + batch_size]]
        feats, mask = batch_features(chunk, bundle.config.frontend)
        out.extend(greedy_decode_batch(bundle, feats, mask, max_len))
    return out


def batch_features(samples: Sequence[torch.Tensor], frontend: FrontendConfig):
    """Features for variable-length waveforms, zero-padded, plus a (B, F) validity mask."""
    feats = [features_torch(s, frontend) for s in samples]
    n = [f.shape[0] for f in feats]
    fmax = max(n)
    out = torch.zeros(len(feats), fmax, frontend.d_feat, dtype=DTYPE)
    for i, f in enumerate(feats):
        out[i, : f.shape[0]] = f
    mask = torch.arange(fmax)[None, :] < torch.tensor(n)[:, None]
    return out, mask


# ------------------------------------------------------------------ gradients


def input_gradient(bundle: ModelBundle, waveform, delta, loss_spec: Callable) -> np.ndarray:
    """d loss / d delta through apply -> frontend -> model -> loss.

    ``loss_spec(bundle, features)`` must return a scalar tensor; the bound
    losses in :mod:`more_asr.objectives` have that signature.
    """
    x = torch.tensor(np.asarray(getattr(waveform, "samples", waveform)), dtype=DTYPE)
    d = torch.as_tensor(np.asarray(delta, dtype=np.float64)).clone().requires_grad_(True)
    if x.shape != d.shape:
        raise InvalidInput(f"length mismatch: waveform {x.shape[0]} vs perturbation {d.shape[0]}")
    feats = features_torch(x + d, bundle.config.frontend)
    loss = loss_spec(bundle, feats)
    if not torch.isfinite(loss):
        raise NumericalFailure(f"loss is not finite ({float(loss.detach())})")
    (g,) = torch.autograd.grad(loss, d, allow_unused=True)
    if g is None:
        return np.zeros(d.shape[0])
    return g.numpy()


# ------------------------------------------------------------------- training


@dataclass
class TrainResult:
    bundle: ModelBundle
    losses: list[float]


def _pad_targets(seqs: Sequence[Sequence[int]]) -> torch.Tensor:
    n = max(len(s) for s in seqs)
    out = torch.full((len(seqs), n), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return out


def train(bundle: ModelBundle, corpus: Sequence, epochs: int, learning_rate: float, seed: int = 0,
          batch_size: int = 32, clip_norm: float | None = None,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Teacher-forced cross-entropy by plain mini-batch SGD with a fixed learning rate.

    ``corpus`` items need ``.waveform`` and ``.transcript`` (word ids).  Frontend
    features are fixed, so they are computed once up front.
    """
    if not corpus:
        raise InvalidInput("training corpus is empty")
    if epochs <= 0:
        return TrainResult(bundle, [])
    cfg = bundle.config
    feats = [features_torch(torch.tensor(u.waveform.samples, dtype=DTYPE), cfg.frontend) for u in corpus]
    targets = [[BOS, *u.transcript, EOS] for u in corpus]
    rng = np.random.default_rng(seed)
    flat = bundle.flat.detach().clone().requires_grad_(True)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(corpus))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            fb = [feats[i] for i in idx]
            n = [f.shape[0] for f in fb]
            fpad = torch.zeros(len(fb), max(n), cfg.frontend.d_feat, dtype=DTYPE)
            for j, f in enumerate(fb):
                fpad[j, : f.shape[0]] = f
            mask = torch.arange(max(n))[None, :] < torch.tensor(n)[:, None]
            tgt = _pad_targets([targets[i] for i in idx])
            memory, mem_mask = encode(bundle, fpad, mask, flat=flat)
            logits = decode_logits(bundle, memory, tgt[:, :-1], mem_mask, flat=flat)
            labels = tgt[:, 1:]
            loss = F.cross_entropy(logits.reshape(-1, cfg.vocab_size), labels.reshape(-1), ignore_index=PAD)
            if not torch.isfinite(loss):
                raise NumericalFailure(f"training diverged at epoch {epoch}", partial=losses)
            (g,) = torch.autograd.grad(loss, flat)
            if clip_norm is not None:
                gn = float(g.norm())
                if gn > clip_norm:
                    g = g * (clip_norm / gn)
            with torch.no_grad():
                flat -= learning_rate * g
            tokens = int((labels != PAD).sum())
            total += float(loss.detach()) * tokens
            count += tokens
        losses.append(total / count)
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
        log.info("epoch %d loss %.4f", epoch, losses[-1])
    return TrainResult(bundle.with_flat(flat), losses)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"MOREASR\x00"
VERSION = 1


def save_checkpoint(bundle: ModelBundle, path) -> Path:
    """Header (magic, version, config JSON) then little-endian float64 parameters."""
    path = Path(path)
    header = json.dumps(bundle.config.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(header)))
        f.write(header)
        f.write(struct.pack("<Q", bundle.param_count))
        f.write(bundle.flat.numpy().astype("<f8").tobytes())
    return path


def load_checkpoint(path, expect_frontend: FrontendConfig | None = None) -> ModelBundle:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    try:
        version, hlen = struct.unpack_from("<II", blob, off)
        off += 8
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
        config = ModelConfig.from_dict(json.loads(blob[off:off + hlen].decode()))
        off += hlen
        (count,) = struct.unpack_from("<Q", blob, off)
        off += 8
    except (struct.error, ValueError, TypeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    expected = sum(math.prod(s) for _, s in param_layout(config))
    if count != expected:
        raise CheckpointError(f"{path}: header declares {count} parameters, config implies {expected}")
    if len(blob) - off != 8 * count:
        raise CheckpointError(f"{path}: truncated parameter block ({len(blob) - off} of {8 * count} bytes)")
    if expect_frontend is not None and config.frontend != expect_frontend:
        raise CheckpointError(
            f"{path}: checkpoint frontend {config.frontend} differs from requested {expect_frontend}; "
            "features would not match the trained encoder"
        )
    flat = torch.from_numpy(np.frombuffer(blob, dtype="<f8", offset=off, count=count).astype(np.float64))
    return ModelBundle(config, flat)


def waveform_features(bundle: ModelBundle, waveform) -> np.ndarray:
    frame_count(waveform, bundle.config.frontend)
    x = torch.tensor(np.asarray(getattr(waveform, "samples", waveform)), dtype=DTYPE)
    return features_torch(x, bundle.config.frontend).numpy()
