"""Command-line entry point: ``more-asr {gen-data,train,attack,eval,cost-model}``.

Exit status is 0 on success, 1 when the run itself fails and 2 for bad
configuration or arguments.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import harness
from .errors import CheckpointError, FormatError, InvalidConfig, InvalidInput
from .metrics import (CostScenario, bound_components, cost_attack, cost_stage1, cost_stage2, envelope_sums,
                      flops_table, whisper_tiny_scenario)

log = logging.getLogger("more_asr")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _experiment(args) -> harness.ExperimentConfig:
    cfg = harness.load_experiment(args.config) if args.config else harness.ExperimentConfig()
    if getattr(args, "manifest", None):
        cfg.manifest = args.manifest
    if getattr(args, "checkpoint", None):
        cfg.checkpoint = args.checkpoint
    return cfg


def _gen_data(args) -> int:
    cfg = _experiment(args)
    spec = cfg.corpus
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    if args.n is not None:
        spec = dataclasses.replace(spec, n_utterances=args.n)
    manifest = harness.cmd_gen_data(spec, args.out, cfg.train_fraction, cfg.seed)
    print(f"wrote {spec.n_utterances} utterances; manifest {manifest}")
    return EXIT_OK


def _train(args) -> int:
    cfg = _experiment(args)
    if args.seed is not None:
        cfg.training = dataclasses.replace(cfg.training, seed=args.seed)
    if args.epochs is not None:
        cfg.training = dataclasses.replace(cfg.training, epochs=args.epochs)
    res = harness.cmd_train(cfg, args.out)
    print(f"checkpoint {res.checkpoint}; final loss {res.losses[-1] if res.losses else float('nan'):.4f}")
    if res.clean_wer is not None:
        print(f"held-out clean WER {res.clean_wer:.2f}%  mean length {res.clean_length:.2f}")
    return EXIT_OK


def _attack(args) -> int:
    cfg = _experiment(args)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.out_dir = args.out
    if args.methods:
        cells = {c.name: c for c in cfg.cells}
        chosen = []
        for m in args.methods.split(","):
            cell = cells.get(m) or harness.Cell(m, harness.AttackConfig(m))
            chosen.append(cell)
        cfg.cells = chosen
    if args.budgets:
        cfg.budgets_db = [float(b) for b in args.budgets.split(",")]
    if args.n_eval is not None:
        cfg.n_eval = args.n_eval
    if args.K is not None:
        cfg.cells = [harness.Cell(c.name, c.attack.replace(K=args.K, K_a=min(c.attack.K_a, args.K)))
                     for c in cfg.cells]
    cfg.save_wav = cfg.save_wav or args.save_wav
    cfg.save_traces = cfg.save_traces or args.save_traces
    harness.ExperimentConfig.__post_init__(cfg)
    res = harness.cmd_attack(cfg)
    print(f"clean: WER {res.clean['mean_wer']:.2f}%  length {res.clean['mean_length']:.2f}")
    for c in res.cells:
        wer = "n/a" if c["mean_wer"] is None else f"{c['mean_wer']:.2f}%"
        length = "n/a" if c["mean_length_adv"] is None else f"{c['mean_length_adv']:.2f}"
        print(f"{c['method']:>9} @ {c['snr_db']:g} dB: WER {wer}  length {length}  "
              f"ok {c['n']}  failed {c['failed']}")
    return EXIT_OK


def _read_lines(path) -> list[str]:
    try:
        return Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


def _eval(args) -> int:
    if args.hyps:
        if not args.refs:
            raise InvalidConfig("--hyps needs --refs")
        rows, summary = harness.cmd_eval(_read_lines(args.refs), _read_lines(args.hyps))
    else:
        cfg = _experiment(args)
        if not cfg.checkpoint:
            raise InvalidConfig("eval needs --hyps/--refs or a checkpoint")
        from .model import load_checkpoint

        bundle = load_checkpoint(cfg.checkpoint, expect_frontend=cfg.model.frontend)
        _, ev = harness.dataset_splits(cfg)
        ev = ev[: cfg.n_eval]
        mean_wer, mean_len, decs = harness.clean_metrics(bundle, ev)
        from .metrics import length_tokens, wer
        from .tokens import words_of

        rows = [{"utterance_id": u.uid, "wer": wer(list(u.transcript), words_of(d.tokens)).wer_percent,
                 "length": length_tokens(d)} for u, d in zip(ev, decs)]
        summary = {"n": len(rows), "mean_wer": mean_wer, "mean_length": mean_len}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]) if rows else ["index"])
        w.writeheader()
        w.writerows(rows)
    (out / "eval_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


def _cost_model(args) -> int:
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"cannot read scenario {args.config}: {exc}") from exc
        scn = CostScenario.from_dict(data)
    else:
        scn = whisper_tiny_scenario()
    stage2, blocks = cost_stage2(scn)
    report = {
        "scenario": dataclasses.asdict(scn),
        "M": scn.M,
        "stage1": cost_stage1(scn),
        "stage2": stage2,
        "total": cost_attack(scn),
        "blocks": [dataclasses.asdict(b) for b in blocks],
        "bound": bound_components(scn),
        "flops_table": flops_table(),
    }
    if scn.envelope is not None and scn.M > 0:
        env = scn.envelope
        s1, s2 = envelope_sums(env["kind"], env["L_0"], env.get("delta", 0), env["L_max"], scn.M)
        report["envelope_sums"] = {"kind": env["kind"], "sum_L": s1, "sum_L_sq": s2}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=1, default=float) + "\n")
    print(f"stage1 {report['stage1']:.4g}  stage2 {report['stage2']:.4g}  total {report['total']:.4g} MACs")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="more-asr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="experiment JSON (defaults are used when omitted)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=True, help=out_help)

    g = sub.add_parser("gen-data", help="synthesise the tone-word corpus")
    common(g, "output directory")
    g.add_argument("--n", type=int, default=None, help="number of utterances")
    g.set_defaults(func=_gen_data)

    t = sub.add_parser("train", help="train the victim recogniser")
    common(t, "checkpoint path")
    t.add_argument("--manifest")
    t.add_argument("--epochs", type=int, default=None)
    t.set_defaults(func=_train)

    a = sub.add_parser("attack", help="run an attack campaign")
    common(a, "results directory")
    a.add_argument("--manifest")
    a.add_argument("--checkpoint")
    a.add_argument("--methods", help="comma-separated, e.g. MORE,PGD")
    a.add_argument("--budgets", help="comma-separated SNR budgets in dB")
    a.add_argument("--n-eval", type=int, default=None)
    a.add_argument("--K", type=int, default=None, help="override the step budget of every cell")
    a.add_argument("--save-wav", action="store_true")
    a.add_argument("--save-traces", action="store_true")
    a.set_defaults(func=_attack)

    e = sub.add_parser("eval", help="WER/length for text pairs or a checkpoint's clean transcripts")
    common(e, "output directory")
    e.add_argument("--refs")
    e.add_argument("--hyps")
    e.add_argument("--manifest")
    e.add_argument("--checkpoint")
    e.set_defaults(func=_eval)

    c = sub.add_parser("cost-model", help="analytic attack cost for a scenario")
    common(c, "report JSON path")
    c.set_defaults(func=_cost_model)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    harness.configure_threads()
    try:
        return args.func(args)
    except (InvalidConfig, InvalidInput, CheckpointError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return 130
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
