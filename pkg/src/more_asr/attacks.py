"""MORE (repulsion then anchoring) and the baseline sign-gradient attacks.

Every attack runs on a padded batch of utterances.  Each row's loss depends on
that row alone, so the gradient of the summed loss with respect to a row's
perturbation is exactly that utterance's own gradient; batching only
amortises per-op overhead.  The single-utterance entry points are batches of
one.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import objectives as obj
from .errors import DegenerateHypothesis, InvalidConfig, InvalidInput, NumericalFailure
from .model import DTYPE, ModelBundle, decode_logits, encode, greedy_decode_batch
from .signal import clip_linf, epsilon_for_snr, features_torch
from .tokens import BOS, EOS, PAD

log = logging.getLogger(__name__)

METHODS = ("MORE", "PGD", "MIFGSM", "VMIFGSM", "EOS_ONLY")


@dataclass(frozen=True)
class AttackConfig:
    """Scheduling and budget knobs.

    ``epsilon`` fixes the l-inf radius directly; otherwise it is derived per
    utterance from ``snr_db`` as peak / 10**(dB/20).  ``alpha`` defaults to
    epsilon / 10.  Momentum (MI/VMI) and variance-sampling constants follow
    common practice for those methods.
    """

    method: str = "MORE"
    K: int = 150
    K_a: int = 50
    D: int = 10
    alpha: float | None = None
    epsilon: float | None = None
    snr_db: float | None = 35.0
    momentum: float = 1.0
    n_var: int = 5
    beta: float = 1.5
    use_eos: bool = True
    use_redo: bool = True
    eval_every: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidConfig(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.K < 1:
            raise InvalidConfig("K must be at least 1")
        # K_a only shapes the MORE schedule; baselines ignore it
        if self.method == "MORE" and not 0 <= self.K_a <= self.K:
            raise InvalidConfig(f"need 0 <= K_a <= K (got K_a={self.K_a}, K={self.K})")
        if self.D < 1:
            raise InvalidConfig("doubling period D must be >= 1")
        if self.alpha is not None and self.alpha < 0:
            raise InvalidConfig("alpha must be non-negative")
        if self.epsilon is None and self.snr_db is None:
            raise InvalidConfig("set either epsilon or snr_db")
        if self.epsilon is not None and self.epsilon <= 0:
            raise InvalidConfig("epsilon must be positive")
        if self.snr_db is not None and self.snr_db <= 0:
            raise InvalidConfig("snr_db must be positive")
        if self.method == "VMIFGSM" and (self.n_var < 1 or self.beta <= 0):
            raise InvalidConfig("VMI-FGSM needs n_var >= 1 and beta > 0")
        if self.eval_every is not None and self.eval_every < 1:
            raise InvalidConfig("eval_every must be >= 1")

    def radius(self, waveform) -> float:
        if self.epsilon is not None:
            return float(self.epsilon)
        return epsilon_for_snr(waveform, self.snr_db)

    def step_size(self, epsilon: float) -> float:
        return epsilon / 10.0 if self.alpha is None else float(self.alpha)

    def replace(self, **kw) -> "AttackConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class StepRecord:
    step: int
    stage: str
    losses: dict[str, float]
    linf: float
    target_len: int | None = None


@dataclass
class AttackTrace:
    uid: str
    method: str
    epsilon: float
    alpha: float
    records: list[StepRecord] = field(default_factory=list)
    anchors: list[dict] = field(default_factory=list)
    probes: list[dict] = field(default_factory=list)
    delta: np.ndarray | None = None
    error: str | None = None

    @property
    def block_lengths(self) -> list[int]:
        """Base-segment length L_m of the doubled target used in each block."""
        return [a["base_len"] for a in self.anchors]

    def to_jsonl(self) -> str:
        lines = []
        for r in self.records:
            rec = {"uid": self.uid, "method": self.method, **dataclasses.asdict(r)}
            lines.append(json.dumps(rec, sort_keys=True))
        return "".join(line + "\n" for line in lines)


@dataclass
class AttackOutcome:
    delta: np.ndarray
    trace: AttackTrace

    def __iter__(self):
        return iter((self.delta, self.trace))

    @property
    def failed(self) -> bool:
        return self.trace.error is not None


def sign_step(delta, gradient, alpha: float, epsilon: float):
    """clip(delta - alpha * sign(g), -eps, eps) with sign(0) = 0."""
    is_t = isinstance(delta, torch.Tensor)
    d = delta if is_t else torch.as_tensor(np.asarray(delta, dtype=np.float64))
    g = gradient if isinstance(gradient, torch.Tensor) else torch.as_tensor(np.asarray(gradient, dtype=np.float64))
    if d.shape != g.shape:
        raise InvalidInput(f"shape mismatch: delta {tuple(d.shape)} vs gradient {tuple(g.shape)}")
    if not bool(torch.isfinite(g).all()):
        raise NumericalFailure("gradient contains non-finite values")
    out = clip_linf(d - alpha * torch.sign(g), epsilon)
    return out if is_t else out.numpy()


# ----------------------------------------------------------------- batch state


class _Batch:
    def __init__(self, bundle: ModelBundle, utterances: Sequence, cfg: AttackConfig):
        self.bundle, self.cfg = bundle, cfg
        self.frontend = bundle.config.frontend
        self.utts = list(utterances)
        self.B = len(self.utts)
        self.lengths = [len(u.waveform.samples) for u in self.utts]
        tmax = max(self.lengths)
        self.x = torch.zeros(self.B, tmax, dtype=DTYPE)
        for b, u in enumerate(self.utts):
            self.x[b, : self.lengths[b]] = torch.tensor(u.waveform.samples, dtype=DTYPE)
        self.sample_mask = torch.arange(tmax)[None, :] < torch.tensor(self.lengths)[:, None]
        fl, hop = self.frontend.frame_len, self.frontend.hop
        for n in self.lengths:
            if n < fl:
                raise InvalidInput(f"utterance has {n} samples, shorter than one frame ({fl})")
        n_frames = [(n - fl) // hop + 1 for n in self.lengths]
        fmax = (tmax - fl) // hop + 1
        self.frame_mask = torch.arange(fmax)[None, :] < torch.tensor(n_frames)[:, None]
        eps = [cfg.radius(u.waveform) for u in self.utts]
        self.eps = torch.tensor(eps, dtype=DTYPE)[:, None]
        self.alpha = torch.tensor([cfg.step_size(e) for e in eps], dtype=DTYPE)[:, None]
        self.delta = torch.zeros_like(self.x)
        self.active = torch.ones(self.B, dtype=torch.bool)
        self.traces = [AttackTrace(u.uid, cfg.method, eps[b], float(self.alpha[b])) for b, u in enumerate(self.utts)]
        self.rngs = [np.random.default_rng([cfg.seed, zlib.crc32(u.uid.encode())]) for u in self.utts]

    def memory(self, delta):
        feats = features_torch(self.x + delta, self.frontend)
        return encode(self.bundle, feats, self.frame_mask)

    def rows(self):
        return self.active.nonzero().flatten().tolist()

    def fail(self, b: int, message: str):
        if self.active[b]:
            self.active[b] = False
            self.traces[b].error = message
            log.warning("attack on %s failed: %s", self.utts[b].uid, message)

    def gradient(self, row_losses, delta=None):
        """Per-row losses at ``delta`` (default: current) and d(sum)/d(delta).

        ``row_losses(memory, mem_mask)`` returns {row: {name: scalar tensor}};
        the 'total' entry is differentiated.  Rows whose loss is not finite are
        marked failed and excluded from the sum.
        """
        d = (self.delta if delta is None else delta).detach().clone().requires_grad_(True)
        memory, mem_mask = self.memory(d)
        terms = row_losses(memory, mem_mask)
        total = d.new_zeros(())
        values: dict[int, dict[str, float]] = {}
        for b, parts in terms.items():
            t = parts["total"]
            if not bool(torch.isfinite(t)):
                self.fail(b, f"non-finite loss at step ({float(t.detach())})")
                continue
            total = total + t
            values[b] = {k: float(v.detach()) for k, v in parts.items()}
        if total.requires_grad:
            (g,) = torch.autograd.grad(total, d)
        else:
            g = torch.zeros_like(d)
        g = torch.where(self.sample_mask, g, torch.zeros_like(g))
        bad = ~torch.isfinite(g).all(dim=1)
        for b in bad.nonzero().flatten().tolist():
            self.fail(b, "non-finite gradient")
        g = torch.where(torch.isfinite(g), g, torch.zeros_like(g))
        return g, values

    def step(self, direction):
        """Sign step on active rows; inactive rows keep their last perturbation."""
        upd = self.delta - self.alpha * torch.sign(direction)
        upd = torch.maximum(torch.minimum(upd, self.eps), -self.eps)
        upd = torch.where(self.sample_mask, upd, torch.zeros_like(upd))
        self.delta = torch.where(self.active[:, None], upd, self.delta).detach()

    def linf(self, b) -> float:
        return float(self.delta[b].abs().max())

    def record(self, step, stage, values, target_lens=None):
        for b, v in values.items():
            if not self.active[b]:
                continue
            tl = None if target_lens is None else target_lens.get(b)
            self.traces[b].records.append(StepRecord(step, stage, v, self.linf(b), tl))

    def decode(self, rows=None):
        rows = self.rows() if rows is None else rows
        if not rows:
            return {}
        idx = torch.tensor(rows)
        with torch.no_grad():
            feats = features_torch(self.x[idx] + self.delta[idx], self.frontend)
            res = greedy_decode_batch(self.bundle, feats, self.frame_mask[idx])
        return dict(zip(rows, res))

    def probe(self, step):
        from .metrics import length_tokens, wer
        from .tokens import words_of

        for b, dec in self.decode().items():
            w = wer(list(self.utts[b].transcript), words_of(dec.tokens)).wer_percent
            self.traces[b].probes.append({"step": step, "length": length_tokens(dec), "wer": w})

    def finish(self) -> list[AttackOutcome]:
        out = []
        for b, tr in enumerate(self.traces):
            tr.delta = self.delta[b, : self.lengths[b]].numpy().copy()
            out.append(AttackOutcome(tr.delta, tr))
        return out


def _pad(seqs: dict[int, list[int]]) -> tuple[list[int], torch.Tensor]:
    rows = list(seqs)
    n = max(len(s) for s in seqs.values())
    t = torch.full((len(rows), n), PAD, dtype=torch.long)
    for i, b in enumerate(rows):
        t[i, : len(seqs[b])] = torch.tensor(seqs[b], dtype=torch.long)
    return rows, t


def _teacher_forced(batch: _Batch, memory, mem_mask, seqs: dict[int, list[int]]):
    rows, tokens = _pad(seqs)
    idx = torch.tensor(rows)
    logits = decode_logits(batch.bundle, memory[idx], tokens, mem_mask[idx])
    return {b: logits[i, : len(seqs[b])] for i, b in enumerate(rows)}


def _accuracy_losses(batch: _Batch):
    seqs = {b: [BOS, *batch.utts[b].transcript, EOS] for b in batch.rows()}

    def fn(memory, mem_mask):
        out = {}
        for b, lg in _teacher_forced(batch, memory, mem_mask, seqs).items():
            loss = obj.loss_accuracy(lg, seqs[b])
            out[b] = {"acc": loss, "total": loss}
        return out

    return fn


def _efficiency_losses(batch: _Batch, targets: dict[int, obj.DoubledTarget]):
    cfg = batch.cfg
    seqs = {b: targets[b].decoder_input() for b in batch.rows()}

    def fn(memory, mem_mask):
        out = {}
        for b, lg in _teacher_forced(batch, memory, mem_mask, seqs).items():
            parts = {}
            total = lg.new_zeros(())
            if cfg.use_redo:
                parts["redo"] = obj.loss_redo(lg, targets[b])
                total = total + parts["redo"]
            if cfg.use_eos:
                parts["eos"] = obj.loss_eos(torch.softmax(lg, dim=-1))
                total = total + parts["eos"]
            parts["total"] = total
            out[b] = parts
        return out

    return fn


def _eos_losses(batch: _Batch, prefixes: dict[int, list[int]]):
    seqs = {b: [BOS, *prefixes[b]] for b in batch.rows() if b in prefixes}

    def fn(memory, mem_mask):
        out = {}
        for b, lg in _teacher_forced(batch, memory, mem_mask, seqs).items():
            loss = obj.loss_eos(torch.softmax(lg, dim=-1))
            out[b] = {"eos": loss, "total": loss}
        return out

    return fn


def _l1_normalise(g: torch.Tensor) -> torch.Tensor:
    n = g.abs().sum(dim=1, keepdim=True)
    return torch.where(n > 0, g / torch.where(n > 0, n, torch.ones_like(n)), torch.zeros_like(g))


# -------------------------------------------------------------------- drivers


def _run_more(batch: _Batch) -> None:
    cfg = batch.cfg
    L_max = batch.bundle.config.max_len
    states = {b: obj.ScheduleState(cfg.K, cfg.K_a, cfg.D) for b in range(batch.B)}
    acc = _accuracy_losses(batch)
    for i in range(1, cfg.K + 1):
        for b in states:
            states[b] = obj.advance_schedule(states[b])
        state0 = states[0]
        if state0.stage is obj.Stage.REPULSION:
            g, values = batch.gradient(acc)
            batch.step(g)
            batch.record(i, obj.Stage.REPULSION.value, values)
        else:
            if state0.refresh:
                _refresh(batch, states, i, L_max)
            rows = batch.rows()
            targets = {b: states[b].target for b in rows}
            if not cfg.use_eos and not cfg.use_redo:
                values = {b: {"total": 0.0} for b in rows}
            else:
                g, values = batch.gradient(_efficiency_losses(batch, targets))
                batch.step(g)
            batch.record(i, obj.Stage.ANCHORING.value, values,
                         {b: targets[b].doubled_len for b in rows})
        if cfg.eval_every and i % cfg.eval_every == 0:
            batch.probe(i)


def _refresh(batch: _Batch, states, step: int, L_max: int) -> None:
    """Greedy anchor: decode current X + delta and rebuild each row's doubled target."""
    live = batch.rows()
    frozen = [b for b in live if states[b].target is not None and states[b].target.capped]
    decoded = batch.decode([b for b in live if b not in frozen])
    for b in live:
        s = states[b].anchor_step
        event = {"step": step, "s": s, "block": (s - 1) // states[b].D}
        if b in decoded:
            dec = decoded[b]
            fallback = obj.runner_up(dec.prob_rows[0]) if len(dec.prob_rows) else None
            try:
                states[b] = obj.refresh_target(states[b], dec.tokens, L_max, fallback)
            except DegenerateHypothesis as exc:
                batch.fail(b, str(exc))
                continue
            event["hyp_len"] = len(dec.tokens)
            event["reused"] = False
        else:
            event["hyp_len"] = None
            event["reused"] = True
        t = states[b].target
        event.update(base_len=t.base_len, doubled_len=t.doubled_len, capped=t.capped)
        batch.traces[b].anchors.append(event)


def _run_gradient_baseline(batch: _Batch) -> None:
    """PGD, MI-FGSM and VMI-FGSM on the accuracy loss."""
    cfg = batch.cfg
    acc = _accuracy_losses(batch)
    momentum = torch.zeros_like(batch.x)
    variance = torch.zeros_like(batch.x)
    for i in range(1, cfg.K + 1):
        g, values = batch.gradient(acc)
        if cfg.method == "PGD":
            direction = g
        elif cfg.method == "MIFGSM":
            momentum = cfg.momentum * momentum + _l1_normalise(g)
            direction = momentum
        else:
            momentum = cfg.momentum * momentum + _l1_normalise(g + variance)
            direction = momentum
            variance = _neighbourhood_mean(batch, acc) - g
        batch.step(direction)
        batch.record(i, obj.Stage.REPULSION.value, values)
        if cfg.eval_every and i % cfg.eval_every == 0:
            batch.probe(i)


def _neighbourhood_mean(batch: _Batch, loss_fn) -> torch.Tensor:
    """Mean gradient over n_var uniform samples in the (beta * eps)-box around the current point."""
    cfg = batch.cfg
    total = torch.zeros_like(batch.x)
    radius = (cfg.beta * batch.eps).numpy()[:, 0]
    for _ in range(cfg.n_var):
        noise = torch.zeros_like(batch.x)
        for b in range(batch.B):
            n = batch.lengths[b]
            noise[b, :n] = torch.from_numpy(batch.rngs[b].uniform(-radius[b], radius[b], size=n))
        g, _ = batch.gradient(loss_fn, batch.delta + noise)
        total += g
    return total / cfg.n_var


def _run_eos_only(batch: _Batch) -> None:
    cfg = batch.cfg
    L_max = batch.bundle.config.max_len
    for i in range(1, cfg.K + 1):
        decoded = batch.decode()
        prefixes = {b: obj.strip_hypothesis(d.tokens)[: L_max - 1] for b, d in decoded.items()}
        g, values = batch.gradient(_eos_losses(batch, prefixes))
        batch.step(g)
        batch.record(i, obj.Stage.ANCHORING.value, values, {b: len(p) for b, p in prefixes.items()})
        if cfg.eval_every and i % cfg.eval_every == 0:
            batch.probe(i)


_DRIVERS = {"MORE": _run_more, "PGD": _run_gradient_baseline, "MIFGSM": _run_gradient_baseline,
            "VMIFGSM": _run_gradient_baseline, "EOS_ONLY": _run_eos_only}


def run_attack(bundle: ModelBundle, utterances: Sequence, cfg: AttackConfig) -> list[AttackOutcome]:
    """Attack every utterance with ``cfg.method``; one outcome per utterance, in order.

    A failing utterance ends up with ``trace.error`` set and its perturbation
    frozen at the last good step; the others are unaffected.
    """
    if not utterances:
        return []
    batch = _Batch(bundle, utterances, cfg)
    _DRIVERS[cfg.method](batch)
    return batch.finish()


def _single(bundle, utterance, cfg, method):
    if cfg.method != method:
        raise InvalidConfig(f"config method is {cfg.method}, expected {method}")
    out = run_attack(bundle, [utterance], cfg)[0]
    if out.failed:
        raise NumericalFailure(out.trace.error, partial=out.trace)
    return out.delta, out.trace


def attack_more(bundle, utterance, cfg: AttackConfig):
    return _single(bundle, utterance, cfg, "MORE")


def attack_pgd(bundle, utterance, cfg: AttackConfig):
    return _single(bundle, utterance, cfg, "PGD")


def attack_mifgsm(bundle, utterance, cfg: AttackConfig):
    return _single(bundle, utterance, cfg, "MIFGSM")


def attack_vmifgsm(bundle, utterance, cfg: AttackConfig):
    return _single(bundle, utterance, cfg, "VMIFGSM")


def attack_eos_only(bundle, utterance, cfg: AttackConfig):
    return _single(bundle, utterance, cfg, "EOS_ONLY")
