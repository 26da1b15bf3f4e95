"""Truncated/capped WER, output length, FLOPs estimates and the analytic attack/inference cost model.

The cost formulas are polynomial surrogates of big-O expressions: every term
has coefficient 1 and the vocabulary projection term (ell * V) is reported
separately.  ``measured_macs`` counts the toy model's real multiply-adds so the
surrogates can be checked against an actual forward pass.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

from .errors import InvalidConfig, InvalidInput


# ------------------------------------------------------------------------ WER


def edit_distance(ref: Sequence, hyp: Sequence) -> tuple[int, int, int, int]:
    """Levenshtein distance with unit costs, returned as (distance, S, I, D).

    Deletions are reference words missing from the hypothesis, insertions are
    extra hypothesis words.  Among optimal scripts, the backtrace prefers
    match/substitution, then deletion, then insertion.
    """
    # equal words at either end are matched in some optimal script; drop them
    lo, n, m = 0, len(ref), len(hyp)
    while lo < n and lo < m and ref[lo] == hyp[lo]:
        lo += 1
    while n > lo and m > lo and ref[n - 1] == hyp[m - 1]:
        n, m = n - 1, m - 1
    if lo:
        ref, hyp, n, m = ref[lo:n], hyp[lo:m], n - lo, m - lo
    if not n or not m:
        return n + m, 0, m, n
    w = m + 1
    dp = list(range(w)) + [0] * (n * w)
    for i in range(1, n + 1):
        r = ref[i - 1]
        row, prev = i * w, (i - 1) * w
        dp[row] = left = i
        for j in range(1, w):
            best = dp[prev + j - 1] + (r != hyp[j - 1])
            up = dp[prev + j] + 1
            if up < best:
                best = up
            if left + 1 < best:
                best = left + 1
            dp[row + j] = left = best
    s = ins = dels = 0
    i, j = n, m
    while i or j:
        here = dp[i * w + j]
        if i and j:
            miss = ref[i - 1] != hyp[j - 1]
            if here == dp[(i - 1) * w + j - 1] + miss:
                s += miss
                i, j = i - 1, j - 1
                continue
        if i and here == dp[(i - 1) * w + j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return dp[n * w + m], s, ins, dels


@dataclass(frozen=True)
class WerReport:
    wer_percent: float
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int
    hyp_len_raw: int
    hyp_len_truncated: int


def wer(reference: Sequence, hypothesis: Sequence) -> WerReport:
    """WER in percent after truncating the hypothesis to the reference length, capped at 100."""
    if isinstance(reference, str):
        reference = reference.split()
    if isinstance(hypothesis, str):
        hypothesis = hypothesis.split()
    reference, hypothesis = list(reference), list(hypothesis)
    if not reference:
        raise InvalidInput("reference must contain at least one word")
    truncated = hypothesis[: len(reference)]
    dist, s, i, d = edit_distance(reference, truncated)
    return WerReport(min(100.0, 100.0 * dist / len(reference)), s, i, d,
                     len(reference), len(hypothesis), len(truncated))


def length_tokens(decode) -> int:
    """Emitted tokens excluding BOS, including a terminal EOS."""
    from .tokens import BOS

    tokens = getattr(decode, "tokens", decode)
    return sum(1 for t in tokens if t != BOS)


# ---------------------------------------------------------------------- FLOPs


@dataclass(frozen=True)
class FlopsEstimate:
    n_params: float
    tokens: float
    flops: float


def flops_estimate(n_params: float, tokens: float) -> FlopsEstimate:
    """Per-example decoding FLOPs as tokens * 2 * N (no separate encoder term)."""
    if n_params <= 0 or tokens < 0:
        raise InvalidInput("n_params must be positive and tokens non-negative")
    return FlopsEstimate(n_params, tokens, tokens * 2.0 * n_params)


# Whisper parameter counts (millions) with mean clean / MORE-attacked output
# lengths on LibriSpeech.
WHISPER_FLOPS_ROWS = (
    ("tiny", 39, 22, 296),
    ("base", 74, 22, 300),
    ("small", 244, 22, 214),
    ("medium", 769, 22, 234),
    ("large", 1550, 22, 301),
)


def flops_table(rows=WHISPER_FLOPS_ROWS) -> list[dict]:
    out = []
    for name, params_m, base_tokens, adv_tokens in rows:
        base = flops_estimate(params_m * 1e6, base_tokens).flops / 1e9
        adv = flops_estimate(params_m * 1e6, adv_tokens).flops / 1e9
        out.append({"model": name, "params_m": params_m, "tokens_clean": base_tokens,
                    "tokens_adv": adv_tokens, "gflops_clean": base, "gflops_adv": adv,
                    "increase": adv / base})
    return out


# ----------------------------------------------------------------- cost model


@dataclass
class CostScenario:
    F: int
    N_e: int
    d_e: int
    d_ff_e: int
    h_e: int
    N_d: int
    d_d: int
    d_ff_d: int
    h_d: int
    V: int
    K: int
    K_a: int
    D: int
    kappa: float = 2.0
    L_acc: int = 22
    schedule: list[int] | None = None
    envelope: dict | None = None
    E: int | None = None
    L_eval: int | None = None
    T: int | None = None

    def __post_init__(self):
        problems = []
        for name in ("F", "N_e", "d_e", "d_ff_e", "h_e", "N_d", "d_d", "d_ff_d", "h_d", "V", "D", "L_acc"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or v <= 0:
                problems.append(f"{name} must be positive (got {v!r})")
        if not 0 <= self.K_a <= self.K:
            problems.append(f"need 0 <= K_a <= K (got K_a={self.K_a}, K={self.K})")
        if not 2 <= self.kappa <= 3:
            problems.append(f"kappa must lie in [2, 3] (got {self.kappa})")
        if self.E is not None and self.E <= 0:
            problems.append("E must be positive when given")
        if self.envelope is not None:
            kind = self.envelope.get("kind")
            if kind not in ("geometric", "linear"):
                problems.append(f"envelope kind must be 'geometric' or 'linear' (got {kind!r})")
        if problems:
            raise InvalidConfig("invalid cost scenario: " + "; ".join(problems))

    @property
    def M(self) -> int:
        return math.ceil((self.K - self.K_a) / self.D)

    @classmethod
    def from_dict(cls, d: dict) -> "CostScenario":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        missing = sorted(f.name for f in dataclasses.fields(cls)
                         if f.default is dataclasses.MISSING and f.name not in d)
        if unknown or missing:
            raise InvalidConfig(f"cost scenario fields: missing {missing}, unknown {unknown}")
        return cls(**d)

    def block_lengths(self) -> list[int]:
        """Resolve L_1..L_M from the explicit schedule or the growth envelope."""
        M = self.M
        if self.schedule is not None:
            if len(self.schedule) < M:
                raise InvalidConfig(f"schedule lists {len(self.schedule)} block lengths, need M={M}")
            return [int(x) for x in self.schedule[:M]]
        if self.envelope is not None:
            env = self.envelope
            return envelope_lengths(env["kind"], env["L_0"], env.get("delta", 0), env["L_max"], M)
        if M == 0:
            return []
        raise InvalidConfig("stage-2 cost needs either an explicit schedule or an envelope")


def whisper_tiny_scenario(**overrides) -> CostScenario:
    base = dict(F=1500, N_e=4, d_e=384, d_ff_e=1536, h_e=6, N_d=4, d_d=384, d_ff_d=1536, h_d=6,
                V=51865, K=150, K_a=50, D=10, kappa=2.0, L_acc=22,
                envelope={"kind": "geometric", "L_0": 22, "L_max": 448})
    base.update(overrides)
    return CostScenario(**base)


def cost_enc(scn: CostScenario) -> float:
    return scn.N_e * (scn.F ** 2 * scn.d_e + scn.F * scn.d_e * scn.d_ff_e)


def cost_dec_tf(scn: CostScenario, ell: float) -> float:
    """Teacher-forced decoder cost at length ell (vocabulary term excluded)."""
    return scn.N_d * (ell ** 2 * scn.d_d + ell * scn.F * scn.d_d + ell * scn.d_d * scn.d_ff_d)


def cost_dec_gen(scn: CostScenario, ell: float) -> float:
    """Generation cost; same surrogate as teacher forcing (caching only changes constants)."""
    return cost_dec_tf(scn, ell)


def vocab_cost(scn: CostScenario, ell: float) -> float:
    return ell * scn.V


def cost_eval_stage1(scn: CostScenario) -> float:
    if scn.E is None or scn.K_a == 0:
        return 0.0
    ell = scn.L_eval if scn.L_eval is not None else scn.L_acc
    return math.ceil(scn.K_a / scn.E) * (cost_enc(scn) + cost_dec_gen(scn, ell) + vocab_cost(scn, ell))


def cost_stage1(scn: CostScenario) -> float:
    per_step = scn.kappa * (cost_enc(scn) + cost_dec_tf(scn, scn.L_acc)) + vocab_cost(scn, scn.L_acc)
    return scn.K_a * per_step + cost_eval_stage1(scn)


@dataclass(frozen=True)
class BlockCost:
    block: int
    base_len: int
    steps: float
    greedy: float
    vocab: float

    @property
    def total(self) -> float:
        return self.steps + self.greedy + self.vocab


def stage2_blocks(scn: CostScenario, lengths: Sequence[int], D: int | None = None,
                  gen_lengths: Sequence[int] | None = None) -> list[BlockCost]:
    """Per-block cost: D teacher-forced steps at 2L_m, one greedy anchor at L_gen_m ~ L_m."""
    D = scn.D if D is None else D
    gen_lengths = lengths if gen_lengths is None else gen_lengths
    enc = cost_enc(scn)
    out = []
    for m, (L, Lg) in enumerate(zip(lengths, gen_lengths), start=1):
        steps = D * scn.kappa * (enc + cost_dec_tf(scn, 2 * L))
        greedy = enc + cost_dec_gen(scn, Lg) + vocab_cost(scn, Lg)
        out.append(BlockCost(m, int(L), steps, greedy, D * vocab_cost(scn, 2 * L)))
    return out


def cost_stage2(scn: CostScenario) -> tuple[float, list[BlockCost]]:
    blocks = stage2_blocks(scn, scn.block_lengths())
    return sum(b.total for b in blocks), blocks


def cost_attack(scn: CostScenario) -> float:
    return cost_stage1(scn) + cost_stage2(scn)[0]


def bound_components(scn: CostScenario) -> dict[str, float]:
    """The three separated parts of the attack-time bound.

    encoder: kappa*K*C_enc; decoder: stage-2 teacher-forced decoder terms;
    overhead: greedy anchors plus vocabulary projections.
    """
    lengths = scn.block_lengths()
    enc = scn.kappa * scn.K * cost_enc(scn)
    dec = scn.kappa * scn.N_d * scn.D * sum(
        (2 * L) ** 2 * scn.d_d + 2 * L * (scn.F * scn.d_d + scn.d_d * scn.d_ff_d) for L in lengths)
    greedy = sum(cost_enc(scn) + cost_dec_gen(scn, L) + vocab_cost(scn, L) for L in lengths)
    overhead = greedy + scn.V * scn.D * sum(2 * L for L in lengths)
    return {"encoder": enc, "decoder": dec, "overhead": overhead}


# ------------------------------------------------------------------ envelopes


def envelope_lengths(kind: str, L_0: int, delta: int, L_max: int, M: int) -> list[int]:
    if L_0 < 1:
        raise InvalidConfig("L_0 must be at least 1")
    if L_0 > L_max:
        raise InvalidConfig(f"L_0={L_0} exceeds the cap L_max={L_max}")
    if kind == "geometric":
        return [min(L_0 * 2 ** (m - 1), L_max) for m in range(1, M + 1)]
    if kind == "linear":
        if delta < 0:
            raise InvalidConfig("linear envelope needs delta >= 0")
        return [min(L_0 + (m - 1) * delta, L_max) for m in range(1, M + 1)]
    raise InvalidConfig(f"unknown envelope kind {kind!r}")


def geometric_cap_index(L_0: int, L_max, M: int) -> int:
    """M* = min(M, 1 + floor(log2(L_max / L_0))), computed without floating point."""
    if L_max == math.inf:
        return M
    k = 0
    while k + 1 < M and L_0 * 2 ** (k + 1) <= L_max:
        k += 1
    return min(M, k + 1)


def envelope_sums(kind: str, L_0: int, delta: int, L_max, M: int) -> tuple[int, int]:
    """(sum L_m, sum L_m^2) over M blocks from closed forms.

    Geometric: L_0(2^M* - 1) + (M - M*)L_max and (L_0^2/3)(4^M* - 1) + (M - M*)L_max^2.
    Linear: the uncapped arithmetic-series forms up to the last index below the
    cap, then L_max for every remaining block.
    """
    if L_0 < 1 or M < 1:
        raise InvalidConfig("envelope needs L_0 >= 1 and M >= 1")
    if L_0 > L_max:
        raise InvalidConfig(f"L_0={L_0} exceeds the cap L_max={L_max}")
    if kind == "geometric":
        ms = geometric_cap_index(L_0, L_max, M)
        rest = M - ms
        s1 = L_0 * (2 ** ms - 1) + (rest * L_max if rest else 0)
        # 4^M* - 1 is divisible by 3
        s2 = L_0 ** 2 * ((4 ** ms - 1) // 3) + (rest * L_max ** 2 if rest else 0)
        return s1, s2
    if kind == "linear":
        if delta < 0:
            raise InvalidConfig("linear envelope needs delta >= 0")
        if delta == 0 or L_max == math.inf:
            mc = M
        else:
            mc = min(M, (L_max - L_0) // delta + 1)
        s1 = mc * (2 * L_0 + (mc - 1) * delta) // 2
        s2 = mc * L_0 ** 2 + L_0 * delta * mc * (mc - 1) + delta ** 2 * (mc - 1) * mc * (2 * mc - 1) // 6
        rest = M - mc
        if rest:
            s1 += rest * L_max
            s2 += rest * L_max ** 2
        return s1, s2
    raise InvalidConfig(f"unknown envelope kind {kind!r}")


# -------------------------------------------------------------- victim time


def cost_inference(scn: CostScenario, ell_adv: float) -> float:
    return cost_enc(scn) + cost_dec_gen(scn, ell_adv) + vocab_cost(scn, ell_adv)


def slowdown_ratio(scn: CostScenario, ell_adv: float, ell_clean: float) -> float:
    """Decoder-dominant slowdown (l^2 + lF + l d_ff/d) ratio between adversarial and clean lengths."""
    if ell_adv <= 0 or ell_clean <= 0:
        raise InvalidInput("lengths must be positive")
    r = scn.d_ff_d / scn.d_d

    def g(ell):
        return ell ** 2 + ell * scn.F + ell * r

    return g(ell_adv) / g(ell_clean)


# ---------------------------------------------------------- measured counts


def measured_macs(bundle, ell: int, n_enc_steps: int | None = None) -> dict[str, int]:
    """Decoder multiply-adds for one teacher-forced pass of length ``ell``.

    Buckets: ``self_attn`` (score and mixing products only), ``cross_attn``,
    ``ff``, ``vocab`` and ``proj`` (attention input/output projections).
    """
    import torch

    from .model import DTYPE, MacCounter, decode_logits
    from .tokens import BOS

    cfg = bundle.config
    if not 1 <= ell <= cfg.max_len:
        raise InvalidInput(f"ell must lie in [1, {cfg.max_len}]")
    n_enc_steps = 16 if n_enc_steps is None else n_enc_steps
    memory = torch.zeros(1, n_enc_steps, cfg.d_model, dtype=DTYPE)
    tokens = torch.full((1, ell), BOS, dtype=torch.long)
    counter = MacCounter()
    with torch.no_grad():
        decode_logits(bundle, memory, tokens, counter=counter)
    return dict(counter)
