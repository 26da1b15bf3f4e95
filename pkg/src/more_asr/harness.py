"""Experiment orchestration: data generation, victim training, attack campaigns, evaluation and reports."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from . import __version__
from .attacks import METHODS, AttackConfig, AttackOutcome, run_attack
from .corpus import CorpusSpec, Utterance, generate_corpus, read_manifest, split, write_dataset
from .errors import InvalidConfig, InvalidInput
from .metrics import CostScenario, flops_estimate, length_tokens, slowdown_ratio, wer
from .model import (ModelBundle, ModelConfig, encoder_steps, init_model, load_checkpoint, save_checkpoint,
                    train, transcribe)
from .signal import FrontendConfig, Waveform, apply, frame_count, save_wav, snr_db, to_pcm16, PCM_SCALE
from .tokens import Vocabulary, words_of

log = logging.getLogger(__name__)

THREADS_ENV = "MORE_ASR_THREADS"

RESULT_COLUMNS = ("utterance_id", "method", "snr_db", "wer", "length_clean", "length_adv",
                  "flops_clean", "flops_adv", "slowdown", "snr_measured", "status")


def configure_threads() -> int:
    n = os.environ.get(THREADS_ENV)
    if n:
        torch.set_num_threads(int(n))
    return torch.get_num_threads()


# ------------------------------------------------------------------ configs


@dataclass
class TrainSettings:
    epochs: int = 20
    learning_rate: float = 0.5
    batch_size: int = 32
    clip_norm: float | None = None
    seed: int = 0


@dataclass
class Cell:
    name: str
    attack: AttackConfig


def default_cells() -> list[Cell]:
    return [Cell("MORE", AttackConfig("MORE")), Cell("PGD", AttackConfig("PGD")),
            Cell("EOS_ONLY", AttackConfig("EOS_ONLY"))]


@dataclass
class ExperimentConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    manifest: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    checkpoint: str | None = None
    training: TrainSettings = field(default_factory=TrainSettings)
    train_fraction: float = 2000 / 2200
    cells: list[Cell] = field(default_factory=default_cells)
    budgets_db: list[float] = field(default_factory=lambda: [35.0])
    n_eval: int = 50
    out_dir: str = "runs/default"
    seed: int = 0
    chunk_size: int = 50
    save_wav: bool = False
    save_traces: bool = False

    def __post_init__(self):
        if not self.cells:
            raise InvalidConfig("experiment needs at least one attack cell")
        if not self.budgets_db or any(b <= 0 for b in self.budgets_db):
            raise InvalidConfig("budgets_db must list positive SNR values")
        if self.n_eval < 1 or self.chunk_size < 1:
            raise InvalidConfig("n_eval and chunk_size must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["cells"] = [{"name": c.name, **dataclasses.asdict(c.attack)} for c in self.cells]
        return d

    def digest(self) -> str:
        """Hash of everything that can change results; output locations are left out."""
        d = self.to_dict()
        for key in ("out_dir", "save_wav", "save_traces"):
            d.pop(key)
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise InvalidConfig(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise InvalidConfig(f"{where}: unknown fields {unknown}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise InvalidConfig(f"{where}: {exc}") from exc


def experiment_from_dict(data: dict, base_dir: Path | None = None) -> ExperimentConfig:
    data = dict(data)
    kw: dict[str, Any] = {}
    if "corpus" in data:
        c = dict(data.pop("corpus"))
        if "tone_table" in c and c["tone_table"] is not None:
            c["tone_table"] = tuple(c["tone_table"])
        kw["corpus"] = _build(CorpusSpec, c, "corpus")
    if "model" in data:
        m = dict(data.pop("model"))
        if "frontend" in m:
            m["frontend"] = _build(FrontendConfig, m["frontend"], "model.frontend")
        kw["model"] = _build(ModelConfig, m, "model")
    if "training" in data:
        kw["training"] = _build(TrainSettings, data.pop("training"), "training")
    if "cells" in data:
        cells = []
        for i, c in enumerate(data.pop("cells")):
            c = dict(c)
            name = c.pop("name", c.get("method", f"cell{i}"))
            cells.append(Cell(name, _build(AttackConfig, c, f"cells[{i}]")))
        kw["cells"] = cells
    for key in ("manifest", "checkpoint", "out_dir"):
        if data.get(key) is not None and base_dir is not None:
            p = Path(data[key])
            data[key] = str(p if p.is_absolute() else base_dir / p)
    kw.update(data)
    return _build(ExperimentConfig, kw, "experiment")


def load_experiment(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise InvalidConfig(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: invalid JSON ({exc})") from exc
    return experiment_from_dict(data, path.parent)


# --------------------------------------------------------------- data/model


def dataset_splits(cfg: ExperimentConfig) -> tuple[list[Utterance], list[Utterance]]:
    """(train, eval) either from the manifest's split tags or a seeded split of the synthetic corpus."""
    if cfg.manifest:
        items = read_manifest(cfg.manifest, cfg.corpus.vocabulary)
        tags = json.loads(Path(cfg.manifest).read_text())
        tags = tags["items"] if isinstance(tags, dict) else tags
        if all("split" in t for t in tags):
            tr = [u for u, t in zip(items, tags) if t["split"] == "train"]
            ev = [u for u, t in zip(items, tags) if t["split"] == "eval"]
            return tr, ev
        return split(items, cfg.train_fraction, cfg.seed)
    return split(generate_corpus(cfg.corpus), cfg.train_fraction, cfg.seed)


def cmd_gen_data(spec: CorpusSpec, out_dir, train_fraction: float = 2000 / 2200, seed: int = 0) -> Path:
    """Write WAVs, transcripts.txt and manifest.json (records tagged train/eval)."""
    corpus = generate_corpus(spec)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        manifest = write_dataset(corpus, out)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    if len(corpus) >= 2:
        tr, _ = split(corpus, train_fraction, seed)
        train_ids = {u.uid for u in tr}
        doc = json.loads(manifest.read_text())
        for rec in doc["items"]:
            rec["split"] = "train" if rec["id"] in train_ids else "eval"
        manifest.write_text(json.dumps(doc, indent=1))
    (out / "corpus_spec.json").write_text(json.dumps(dataclasses.asdict(spec), indent=1))
    return manifest


@dataclass
class TrainSummary:
    checkpoint: Path
    losses: list[float]
    clean_wer: float | None
    clean_length: float | None


def clean_metrics(bundle: ModelBundle, utts: Sequence[Utterance]) -> tuple[float, float, list]:
    decs = transcribe(bundle, [u.waveform for u in utts])
    wers = [wer(list(u.transcript), words_of(d.tokens)).wer_percent for u, d in zip(utts, decs)]
    lens = [length_tokens(d) for d in decs]
    return float(np.mean(wers)), float(np.mean(lens)), decs


def cmd_train(cfg: ExperimentConfig, out_checkpoint, eval_limit: int | None = 200) -> TrainSummary:
    tr, ev = dataset_splits(cfg)
    if not tr:
        raise InvalidInput("training split is empty")
    bundle = init_model(cfg.model)
    s = cfg.training
    res = train(bundle, tr, s.epochs, s.learning_rate, seed=s.seed, batch_size=s.batch_size,
                clip_norm=s.clip_norm)
    out_checkpoint = Path(out_checkpoint)
    out_checkpoint.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.bundle, out_checkpoint)
    curve = out_checkpoint.with_name(out_checkpoint.stem + "_loss.csv")
    with open(curve, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "mean_loss"])
        for i, loss in enumerate(res.losses):
            w.writerow([i, repr(loss)])
    cw = cl = None
    if ev:
        cw, cl, _ = clean_metrics(res.bundle, ev[:eval_limit] if eval_limit else ev)
    return TrainSummary(out_checkpoint, res.losses, cw, cl)


# ----------------------------------------------------------------- campaign


@dataclass
class ExperimentResult:
    rows: list[dict]
    cells: list[dict]
    clean: dict
    provenance: dict
    traces: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"clean": self.clean, "cells": self.cells, "provenance": self.provenance}


def toy_scenario(bundle: ModelBundle, n_enc_steps: int, attack: AttackConfig) -> CostScenario:
    c = bundle.config
    return CostScenario(F=max(1, n_enc_steps), N_e=c.n_enc, d_e=c.d_model, d_ff_e=c.d_ff, h_e=c.heads,
                        N_d=c.n_dec, d_d=c.d_model, d_ff_d=c.d_ff, h_d=c.heads, V=c.vocab_size,
                        K=attack.K, K_a=attack.K_a if attack.method == "MORE" else attack.K, D=attack.D)


def _run_chunked(bundle, utts, attack: AttackConfig, chunk_size: int) -> list[AttackOutcome | Exception]:
    """Attack in chunks; a chunk that raises is retried one utterance at a time."""
    out: list[AttackOutcome | Exception] = []
    for i in range(0, len(utts), chunk_size):
        chunk = utts[i:i + chunk_size]
        try:
            out.extend(run_attack(bundle, chunk, attack))
        except Exception:
            for u in chunk:
                try:
                    out.extend(run_attack(bundle, [u], attack))
                except Exception as exc:  # recorded per utterance; the campaign continues
                    log.warning("utterance %s failed: %s", u.uid, exc)
                    out.append(exc)
    return out


def aggregate(rows: Sequence[dict]) -> list[dict]:
    """Per-(method, budget) means over successful rows, in first-seen order."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["method"], r["snr_db"]), []).append(r)
    cells = []
    for (method, budget), rs in groups.items():
        ok = [r for r in rs if r["status"] == "ok"]
        cell = {"method": method, "snr_db": budget, "n": len(ok), "failed": len(rs) - len(ok)}
        for key in ("wer", "length_adv", "flops_adv", "slowdown", "snr_measured"):
            vals = [r[key] for r in ok if r[key] is not None]
            cell[f"mean_{key}"] = float(np.mean(vals)) if vals else None
        cells.append(cell)
    return cells


def cmd_attack(cfg: ExperimentConfig, bundle: ModelBundle | None = None,
               eval_utts: Sequence[Utterance] | None = None, write: bool = True) -> ExperimentResult:
    if bundle is None:
        if not cfg.checkpoint:
            raise InvalidConfig("attack needs a checkpoint path (or a bundle)")
        bundle = load_checkpoint(cfg.checkpoint, expect_frontend=cfg.model.frontend)
    if eval_utts is None:
        _, eval_utts = dataset_splits(cfg)
    utts = list(eval_utts)[: cfg.n_eval]
    if not utts:
        raise InvalidInput("no evaluation utterances")
    n_params = bundle.param_count
    clean_decs = transcribe(bundle, [u.waveform for u in utts])
    clean_len = {u.uid: length_tokens(d) for u, d in zip(utts, clean_decs)}
    clean_wer = {u.uid: wer(list(u.transcript), words_of(d.tokens)).wer_percent for u, d in zip(utts, clean_decs)}
    out_dir = Path(cfg.out_dir)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
    rows, traces = [], {}
    for cell in cfg.cells:
        for budget in cfg.budgets_db:
            attack = cell.attack.replace(snr_db=budget, epsilon=None, seed=cfg.seed)
            outcomes = _run_chunked(bundle, utts, attack, cfg.chunk_size)
            ok_pairs = [(u, o) for u, o in zip(utts, outcomes) if isinstance(o, AttackOutcome) and not o.failed]
            adv = dict(zip((u.uid for u, _ in ok_pairs),
                           transcribe(bundle, [apply(u.waveform, o.delta) for u, o in ok_pairs])))
            for u, o in sorted(zip(utts, outcomes), key=lambda p: p[0].uid):
                rows.append(_result_row(bundle, u, o, adv.get(u.uid), cell.name, budget,
                                        clean_len[u.uid], n_params, attack))
                if isinstance(o, AttackOutcome):
                    traces[(cell.name, budget, u.uid)] = o.trace
                    if write:
                        _export(out_dir, cfg, cell.name, budget, u, o)
    clean = {"mean_wer": float(np.mean(list(clean_wer.values()))),
             "mean_length": float(np.mean(list(clean_len.values()))),
             "mean_flops": float(np.mean([flops_estimate(n_params, n).flops for n in clean_len.values()])),
             "n": len(utts)}
    provenance = {"seed": cfg.seed, "config_hash": cfg.digest(), "model_digest": bundle.digest(),
                  "version": __version__, "n_params": n_params}
    result = ExperimentResult(rows, aggregate(rows), clean, provenance, traces)
    if write:
        write_results(result, out_dir)
    failed = sum(r["status"] != "ok" for r in rows)
    if rows and failed == len(rows):
        raise RuntimeError("every utterance in the campaign failed")
    return result


def _result_row(bundle, u, outcome, adv_dec, method, budget, len_clean, n_params, attack) -> dict:
    row = {"utterance_id": u.uid, "method": method, "snr_db": budget, "wer": None, "length_clean": len_clean,
           "length_adv": None, "flops_clean": flops_estimate(n_params, len_clean).flops, "flops_adv": None,
           "slowdown": None, "snr_measured": None, "status": "ok"}
    if not isinstance(outcome, AttackOutcome) or outcome.failed or adv_dec is None:
        err = outcome.trace.error if isinstance(outcome, AttackOutcome) else str(outcome)
        row["status"] = f"failed: {err}"
        return row
    n_adv = length_tokens(adv_dec)
    steps = encoder_steps(frame_count(u.waveform, bundle.config.frontend), bundle.config.stack)
    row.update(
        wer=wer(list(u.transcript), words_of(adv_dec.tokens)).wer_percent,
        length_adv=n_adv,
        flops_adv=flops_estimate(n_params, n_adv).flops,
        slowdown=slowdown_ratio(toy_scenario(bundle, steps, attack), max(n_adv, 1), max(len_clean, 1)),
        snr_measured=exported_snr(u.waveform, outcome.delta),
    )
    return row


def exported_snr(x: Waveform, delta: np.ndarray) -> float | None:
    """SNR of the 16-bit WAV export of x + delta against x."""
    exported = to_pcm16(apply(x, delta).samples).astype(np.float64) / PCM_SCALE
    noise = exported - x.samples
    if not np.any(noise):
        return None
    return snr_db(x, noise)


def _export(out_dir: Path, cfg: ExperimentConfig, method: str, budget: float, u: Utterance, o: AttackOutcome):
    tag = f"{method}_{budget:g}dB"
    if cfg.save_traces:
        d = out_dir / "traces" / tag
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{u.uid}.jsonl").write_text(o.trace.to_jsonl())
        (d / f"{u.uid}.delta.f64").write_bytes(o.delta.astype("<f8").tobytes())
    if cfg.save_wav and not o.failed:
        d = out_dir / "wav" / tag
        d.mkdir(parents=True, exist_ok=True)
        save_wav(d / f"{u.uid}.wav", apply(u.waveform, o.delta))


def write_results(result: ExperimentResult, out_dir) -> None:
    out_dir = Path(out_dir)
    with open(out_dir / "results.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=RESULT_COLUMNS)
        w.writeheader()
        for r in result.rows:
            w.writerow(r)
    (out_dir / "summary.json").write_text(json.dumps(result.summary(), indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------- eval


def cmd_eval(references: Sequence[str], hypotheses: Sequence[str]) -> tuple[list[dict], dict]:
    """Per-utterance truncated WER and hypothesis length for aligned text lines."""
    if len(references) != len(hypotheses):
        raise InvalidInput(f"{len(references)} references but {len(hypotheses)} hypotheses")
    rows = []
    for i, (ref, hyp) in enumerate(zip(references, hypotheses)):
        rep = wer(ref.split(), hyp.split())
        rows.append({"index": i, "wer": rep.wer_percent, "length": rep.hyp_len_raw, "ref_len": rep.ref_len})
    summary = {"n": len(rows),
               "mean_wer": float(np.mean([r["wer"] for r in rows])) if rows else None,
               "mean_length": float(np.mean([r["length"] for r in rows])) if rows else None}
    return rows, summary
