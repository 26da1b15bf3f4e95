"""End-to-end acceptance suite: one test per criterion, one verdict line each.

The trained victim is cached under ``.acceptance_cache/`` keyed by the
default experiment's config hash, so only the first run pays for training.
Delete the directory to retrain from scratch.
"""
from __future__ import annotations

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from more_asr import harness
from more_asr import objectives as obj
from more_asr.attacks import AttackConfig
from more_asr.metrics import edit_distance, envelope_lengths, envelope_sums, flops_table, wer
from more_asr.model import (MacCounter, decode_logits, encode, forward_teacher_forced, input_gradient,
                            load_checkpoint, waveform_features)
from more_asr.signal import load_wav, snr_db
from more_asr.tokens import BOS, EOS, FIRST_WORD

from .conftest import ACCEPTANCE
from .oracles import restricted_growth_levels, string_space

CACHE = Path(__file__).resolve().parent.parent / ".acceptance_cache"
N_EVAL = 50


def verdict(n: int, title: str, ok: bool, detail: str):
    ACCEPTANCE[n] = (bool(ok), title, detail)
    print(f"criterion {n} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {n} ({title}): {detail}"


# ------------------------------------------------------------------ fixtures


@pytest.fixture(scope="session")
def experiment():
    harness.configure_threads()
    return harness.ExperimentConfig()


@pytest.fixture(scope="session")
def victim(experiment):
    """(bundle, meta) for the default experiment, trained once and cached."""
    key = experiment.digest()
    ck, meta_path = CACHE / f"victim-{key}.bin", CACHE / f"victim-{key}.json"
    if not (ck.exists() and meta_path.exists()):
        CACHE.mkdir(exist_ok=True)
        t0 = time.perf_counter()
        summary = harness.cmd_train(experiment, ck, eval_limit=None)
        meta = {"train_seconds": time.perf_counter() - t0, "epochs": experiment.training.epochs,
                "final_loss": summary.losses[-1]}
        meta_path.write_text(json.dumps(meta, indent=1))
    return load_checkpoint(ck), json.loads(meta_path.read_text())


@pytest.fixture(scope="session")
def eval_set(experiment):
    return harness.dataset_splits(experiment)[1]


def _campaign(experiment, bundle, utts, cells, budgets, out_dir):
    cfg = harness.ExperimentConfig(corpus=experiment.corpus, model=experiment.model, cells=cells,
                                   budgets_db=budgets, n_eval=N_EVAL, out_dir=str(out_dir), save_wav=True)
    return harness.cmd_attack(cfg, bundle=bundle, eval_utts=utts)


@pytest.fixture(scope="session")
def matrix(experiment, victim, eval_set, tmp_path_factory):
    """MORE at 35 and 30 dB, PGD and EOS_ONLY at 35 dB, plus the two ablations, on the same utterances."""
    bundle, _ = victim
    root = tmp_path_factory.mktemp("matrix")
    t0 = time.perf_counter()
    main = [_campaign(experiment, bundle, eval_set, [harness.Cell("MORE", AttackConfig("MORE"))],
                      [35.0, 30.0], root / "more"),
            _campaign(experiment, bundle, eval_set, [harness.Cell("PGD", AttackConfig("PGD")),
                                                     harness.Cell("EOS_ONLY", AttackConfig("EOS_ONLY"))],
                      [35.0], root / "baselines")]
    main_seconds = time.perf_counter() - t0
    t0 = time.perf_counter()
    K = AttackConfig().K
    ablation = _campaign(experiment, bundle, eval_set,
                         [harness.Cell("MORE-Lacc", AttackConfig("MORE", K_a=0)),
                          harness.Cell("MORE-Leff", AttackConfig("MORE", K_a=K))], [35.0], root / "ablation")
    ablation_seconds = time.perf_counter() - t0
    cells = {(c["method"], c["snr_db"]): c for r in (*main, ablation) for c in r.cells}
    traces = {k: v for r in (*main, ablation) for k, v in r.traces.items()}
    return {"cells": cells, "clean": main[0].clean, "traces": traces, "root": root,
            "main_seconds": main_seconds, "ablation_seconds": ablation_seconds}


# ---------------------------------------------------------------- criterion 1


EXPECTED_FLOPS = {"tiny": (1.7, 23.1, 13.5), "base": (3.3, 44.4, 13.6), "small": (10.7, 104.4, 9.7),
               "medium": (33.8, 359.9, 10.6), "large": (68.2, 933.1, 13.7)}


def test_criterion_01_flops_table():
    bad = []
    for row in flops_table():
        want = EXPECTED_FLOPS[row["model"]]
        got = (round(row["gflops_clean"], 1), round(row["gflops_adv"], 1), round(row["increase"], 1))
        if any(abs(g - w) > 0.1 + 1e-9 for g, w in zip(got, want)):
            bad.append((row["model"], got, want))
    verdict(1, "FLOPs table", not bad and len(EXPECTED_FLOPS) == 5,
            f"5/5 rows within 0.1" if not bad else f"mismatches {bad}")


# ---------------------------------------------------------------- criterion 2


def test_criterion_02_envelope_closed_forms():
    rng = np.random.default_rng(2024)
    mismatches = 0
    for t in range(1000):
        kind = "geometric" if t % 2 else "linear"
        L0 = int(rng.integers(1, 500))
        delta = int(rng.integers(0, 300))
        L_max = math.inf if rng.random() < 0.1 else int(rng.integers(L0, 20_000))
        M = int(rng.integers(1, 120))
        direct = [min(L0 * 2 ** m if kind == "geometric" else L0 + m * delta, L_max) for m in range(M)]
        want = (sum(direct), sum(x * x for x in direct))
        got = envelope_sums(kind, L0, delta, L_max, M)
        mismatches += got != want or envelope_lengths(kind, L0, delta, L_max, M) != direct
    verdict(2, "cost-model algebra", mismatches == 0, f"{1000 - mismatches}/1000 tuples exactly equal")


# ---------------------------------------------------------------- criterion 3


def _loss_fns(bundle, utt, rng):
    Y = [BOS, *utt.transcript, EOS]
    base = list(utt.transcript)[: 3] or [FIRST_WORD]
    target = obj.build_doubled_target(base + [EOS], bundle.config.max_len)
    dec_in = target.decoder_input()
    feats0 = torch.tensor(waveform_features(bundle, utt.waveform))
    z_probs = torch.softmax(forward_teacher_forced(bundle, feats0, dec_in), -1)[-1]
    z = obj.runner_up(z_probs)

    def acc(b, f):
        return obj.loss_accuracy(forward_teacher_forced(b, f, Y), Y)

    def eos(b, f):
        # runner-up frozen at its value for the unperturbed input, as during one attack step
        p = torch.softmax(forward_teacher_forced(b, f, dec_in), -1)[-1]
        return p[EOS] - p[z]

    def redo(b, f):
        return obj.loss_redo(forward_teacher_forced(b, f, dec_in), target)

    def eff(b, f):
        lg = forward_teacher_forced(b, f, dec_in)
        p = torch.softmax(lg, -1)[-1]
        return obj.loss_redo(lg, target) + p[EOS] - p[z]

    return {"L_acc": acc, "L_EOS": eos, "L_REDO": redo, "L_eff": eff}


def test_criterion_03_gradients_match_finite_differences(victim, eval_set):
    bundle, _ = victim
    rng = np.random.default_rng(3)
    picks = rng.choice(len(eval_set), 5, replace=False)
    h = 1e-5
    worst = {name: 0.0 for name in ("L_acc", "L_EOS", "L_REDO", "L_eff")}
    relative = floor = bad = 0
    eos_matches_library = True
    for k in picks:
        u = eval_set[int(k)]
        x = u.waveform.samples
        delta = rng.uniform(-1e-3, 1e-3, x.size)
        fns = _loss_fns(bundle, u, rng)
        # the frozen-runner-up loss must agree in value with the library's L_EOS at this point
        dec_in = obj.build_doubled_target(list(u.transcript)[:3] + [EOS], bundle.config.max_len).decoder_input()
        f0 = torch.tensor(waveform_features(bundle, x))
        lib = float(obj.loss_eos(torch.softmax(forward_teacher_forced(bundle, f0, dec_in), -1)))
        eos_matches_library &= abs(lib - float(fns["L_EOS"](bundle, f0))) < 1e-12
        coords = rng.choice(x.size, 100, replace=False)
        for name, fn in fns.items():
            g = input_gradient(bundle, x, delta, fn)
            value = float(fn(bundle, torch.tensor(waveform_features(bundle, x + delta))))
            # roundoff in (L(x+h) - L(x-h)) / 2h: forward error of L, ~1e3 ulps of |L|, divided by h
            roundoff = 1e3 * np.finfo(np.float64).eps * max(1.0, abs(value)) / h
            for i in coords:
                e = np.zeros(x.size)
                e[i] = h
                lp = float(fn(bundle, torch.tensor(waveform_features(bundle, x + delta + e))))
                lm = float(fn(bundle, torch.tensor(waveform_features(bundle, x + delta - e))))
                fd = (lp - lm) / (2 * h)
                err = abs(fd - g[i])
                rel = err / max(abs(fd), abs(g[i]), 1e-300)
                if rel <= 1e-4:
                    relative += 1
                    worst[name] = max(worst[name], rel)
                elif err <= roundoff:
                    floor += 1
                else:
                    bad += 1
                    worst[name] = max(worst[name], rel)
    ok = eos_matches_library and bad == 0
    verdict(3, "gradient correctness", ok,
            f"{relative} coords within rel err 1e-4, {floor} below the finite-difference roundoff floor, "
            f"{bad} mismatched; worst rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
            + " (5 utts x 100 coords x 4 losses)")


# ---------------------------------------------------------------- criterion 4


def test_criterion_04_wer_oracle():
    t0 = time.perf_counter()
    max_len, alphabet = 6, 5
    space = string_space(max_len, alphabet)
    levels = restricted_growth_levels(2 * max_len, alphabet)
    dist_cache: dict[tuple, np.ndarray] = {}
    checked = bad = 0
    index = space.index
    for n in range(max_len + 1):
        for m in range(max_len + 1):
            for seq in levels[n + m]:
                ref, hyp = seq[:n], seq[n:]
                table = dist_cache.get(ref)
                if table is None:
                    # shortest single-edit paths between strings of length <= 6 never need longer
                    # intermediates (deletions can be done first), so the BFS space is complete
                    table = dist_cache[ref] = space.distances_from(ref)
                d, s, i, dl = edit_distance(ref, hyp)
                checked += 1
                if d != table[index[hyp]] or d != s + i + dl or i - dl != m - n:
                    bad += 1
    sweep = time.perf_counter() - t0
    capped = wer(["a", "b", "c"], ["x"] * 300).wer_percent
    clean = wer("he hoped there would be stew for dinner".split(),
                "he hoped there would be stew for dinner".split()).wer_percent
    truncated = wer(["a", "b"], ["a", "b", "c", "d"]).wer_percent
    ok = bad == 0 and capped == 100.0 and clean == 0.0 and truncated == 0.0
    verdict(4, "WER oracle", ok,
            f"{checked - bad}/{checked} equality classes (every pair up to relabelling, len<=6, 5 words) "
            f"agree with BFS edit-script oracle in {sweep:.0f}s; capped={capped:.2f}, clean={clean:.2f}")


# ---------------------------------------------------------------- criterion 5


def test_criterion_05_redo_construction():
    y1, y2, y3 = FIRST_WORD, FIRST_WORD + 1, FIRST_WORD + 2
    example = obj.build_doubled_target([y1, y2, y3, EOS], 256).tokens == (y1, y2, y3, y1, y2, y3)
    rng = np.random.default_rng(5)
    failures = 0
    for _ in range(1000):
        L_max = int(rng.integers(4, 300))
        base = [int(t) for t in rng.integers(FIRST_WORD, 64, size=int(rng.integers(1, 200)))]
        hyp = base + [EOS] if rng.random() < 0.7 else base
        t = obj.build_doubled_target(hyp, L_max)
        cap = L_max - 1
        good = EOS not in t.tokens
        if 2 * len(base) < cap:
            good &= list(t.tokens) == base + base and not t.capped
        else:
            good &= t.capped and list(t.tokens) == (base + base)[:cap]
            st = obj.refresh_target(obj.advance_schedule(obj.ScheduleState(20, 0, 5)), hyp, L_max)
            good &= obj.refresh_target(st, [FIRST_WORD, EOS], L_max).target is st.target
        failures += not good
    verdict(5, "REDO construction", example and failures == 0,
            f"worked example {'ok' if example else 'WRONG'}; {1000 - failures}/1000 random cases")


# ---------------------------------------------------------------- criterion 6


def test_criterion_06_schedule_conformance(matrix):
    bad = []
    n = 0
    for (method, budget, uid), tr in matrix["traces"].items():
        if method != "MORE" or tr.error:
            continue
        n += 1
        stages = [r.stage for r in tr.records]
        anchors = [a["s"] for a in tr.anchors]
        if (stages.count("repulsion"), stages.count("anchoring")) != (50, 100) or anchors != list(range(1, 92, 10)) \
                or stages[:50] != ["repulsion"] * 50:
            bad.append(uid)
    verdict(6, "schedule conformance", n > 0 and not bad,
            f"{n - len(bad)}/{n} MORE traces: 50 repulsion, 100 anchoring, refreshes at s=1,11,...,91")


# ---------------------------------------------------------------- criterion 7


def test_criterion_07_clean_baseline(victim, eval_set):
    bundle, meta = victim
    t0 = time.perf_counter()
    mean_wer, mean_len, _ = harness.clean_metrics(bundle, eval_set)
    eval_seconds = time.perf_counter() - t0
    ok = len(eval_set) == 200 and mean_wer < 10.0 and meta["train_seconds"] <= 600 and eval_seconds < 60
    verdict(7, "clean baseline", ok,
            f"held-out WER {mean_wer:.2f}% on {len(eval_set)} utts (length {mean_len:.2f}); "
            f"training {meta['train_seconds']:.0f}s for {meta['epochs']} epochs; eval {eval_seconds:.0f}s")


# ---------------------------------------------------------------- criterion 8


def test_criterion_08_attack_trends(matrix):
    c, clean = matrix["cells"], matrix["clean"]
    more, pgd, eos = c[("MORE", 35.0)], c[("PGD", 35.0)], c[("EOS_ONLY", 35.0)]
    cl, cw = clean["mean_length"], clean["mean_wer"]
    checks = {
        "a": more["mean_length_adv"] >= 5 * cl,
        "b": more["mean_wer"] >= cw + 60,
        "c": pgd["mean_wer"] >= cw + 50 and pgd["mean_length_adv"] <= 2 * cl,
        "d": cl < eos["mean_length_adv"] < more["mean_length_adv"],
        "e": eos["mean_wer"] < pgd["mean_wer"],
    }
    failed = [k for k, v in checks.items() if not v]
    detail = (f"clean WER {cw:.1f} len {cl:.2f} | MORE WER {more['mean_wer']:.1f} len {more['mean_length_adv']:.1f}"
              f" | PGD WER {pgd['mean_wer']:.1f} len {pgd['mean_length_adv']:.2f}"
              f" | EOS_ONLY WER {eos['mean_wer']:.1f} len {eos['mean_length_adv']:.1f}"
              f" | {matrix['main_seconds']:.0f}s" + (f" | failed parts {failed}" if failed else ""))
    verdict(8, "attack trends at 35 dB", not failed and all(x["failed"] == 0 for x in (more, pgd, eos)), detail)


# ---------------------------------------------------------------- criterion 9


def test_criterion_09_snr_monotonicity(matrix):
    c = matrix["cells"]
    m35, m30 = c[("MORE", 35.0)], c[("MORE", 30.0)]
    ok = m30["mean_wer"] >= m35["mean_wer"] and m30["mean_length_adv"] >= m35["mean_length_adv"]
    verdict(9, "SNR monotonicity", ok,
            f"MORE 30 dB WER {m30['mean_wer']:.1f} len {m30['mean_length_adv']:.1f} vs "
            f"35 dB WER {m35['mean_wer']:.1f} len {m35['mean_length_adv']:.1f}")


# ---------------------------------------------------------------- criterion 10


def test_criterion_10_ablations(matrix):
    c, clean = matrix["cells"], matrix["clean"]
    more, pgd = c[("MORE", 35.0)], c[("PGD", 35.0)]
    no_acc, no_eff = c[("MORE-Lacc", 35.0)], c[("MORE-Leff", 35.0)]
    first = no_acc["mean_wer"] <= 0.5 * more["mean_wer"] and \
        abs(no_acc["mean_length_adv"] - more["mean_length_adv"]) <= 0.25 * more["mean_length_adv"]
    second = no_eff["mean_length_adv"] <= 2 * clean["mean_length"] and abs(no_eff["mean_wer"] - pgd["mean_wer"]) <= 10
    verdict(10, "ablation structure", first and second,
            f"MORE-Lacc WER {no_acc['mean_wer']:.1f} len {no_acc['mean_length_adv']:.1f} "
            f"(MORE {more['mean_wer']:.1f}/{more['mean_length_adv']:.1f}); "
            f"MORE-Leff WER {no_eff['mean_wer']:.1f} len {no_eff['mean_length_adv']:.2f} "
            f"(PGD WER {pgd['mean_wer']:.1f}, clean len {clean['mean_length']:.2f}); {matrix['ablation_seconds']:.0f}s")


# ---------------------------------------------------------------- criterion 11


def test_criterion_11_constraint_invariant(matrix, eval_set):
    records = violations = 0
    for tr in matrix["traces"].values():
        for r in tr.records:
            records += 1
            violations += r.linf > tr.epsilon
        if tr.delta is not None:
            violations += float(np.max(np.abs(tr.delta))) > tr.epsilon
    by_uid = {u.uid: u for u in eval_set}
    offsets = {}
    for wav in sorted(matrix["root"].glob("*/wav/*/*.wav")):
        tag = wav.parent.name
        budget = float(tag.rsplit("_", 1)[1].removesuffix("dB"))
        x = by_uid[wav.stem].waveform
        measured = snr_db(x, load_wav(wav).samples - x.samples)
        offsets.setdefault(tag, []).append(measured - budget)
    means = {tag: float(np.mean(v)) for tag, v in offsets.items()}
    ok = records > 0 and violations == 0 and means and all(abs(m) <= 3.0 for m in means.values())
    verdict(11, "constraint invariant", ok,
            f"{records} step records, {violations} l-inf violations; mean measured-minus-budget SNR per cell "
            + ", ".join(f"{k} {v:+.2f} dB" for k, v in sorted(means.items())))


# ---------------------------------------------------------------- criterion 12


def test_criterion_12_self_attention_macs(victim):
    bundle, _ = victim
    memory, mask = encode(bundle, torch.zeros(1, 40, bundle.config.frontend.d_feat, dtype=torch.float64))

    def macs(length):
        counter = MacCounter()
        decode_logits(bundle, memory, torch.full((1, length), FIRST_WORD), mask, counter=counter)
        return counter["self_attn"]

    ratios = {ell: macs(2 * ell) / macs(ell) for ell in (8, 16, 32, 64)}
    verdict(12, "self-attention MAC scaling", all(r == 4 for r in ratios.values()),
            "MAC(2l)/MAC(l) " + ", ".join(f"l={k}: {v:g}" for k, v in ratios.items()))
