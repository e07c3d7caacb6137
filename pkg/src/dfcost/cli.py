"""Command-line entry point: synth, train, predict, calibrate, eval, ablate."""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from dataclasses import fields, replace
from pathlib import Path

import torch


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _apply(dc, overrides: dict):
    known = {f.name for f in fields(dc)}
    bad = set(overrides) - known
    if bad:
        raise ValueError(f"unknown {type(dc).__name__} keys: {sorted(bad)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()}
    return replace(dc, **kw)


def _write_text(path, text: str) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, conf) -> None:
    from dfcost.synth import GenConfig, build_dataset, write_jsonl

    gen = _apply(GenConfig(), conf.get("synth", {}))
    over = {"seed": args.seed}
    if args.mix:
        over["mix"] = tuple(float(x) for x in args.mix.split(","))
    if args.format:
        over["format"] = args.format
    gen = replace(gen, **over)
    n = write_jsonl(build_dataset(gen, args.n), args.out)
    print(json.dumps({"records": n, "out": str(args.out)}))


def _model_and_train_configs(args, conf):
    from dfcost.model import make_config
    from dfcost.train import TrainConfig

    mconf = dict(conf.get("model", {}))
    isolate = mconf.pop("isolate", True)
    if args.embed_dim:
        mconf["embed_dim"] = args.embed_dim
        mconf.setdefault("ff_dim", 2 * args.embed_dim)
    mcfg = make_config(isolate=isolate, **{k: tuple(v) if isinstance(v, list) else v for k, v in mconf.items()})
    tcfg = _apply(TrainConfig(), conf.get("train", {}))
    over = {"seed": args.seed}
    if args.epochs is not None:
        over["epochs"] = args.epochs
    if args.time_budget is not None:
        over["time_budget_s"] = args.time_budget
    return mcfg, replace(tcfg, **over)


def cmd_train(args, conf) -> None:
    from dfcost.model import init_model, parameter_count
    from dfcost.synth import read_jsonl
    from dfcost.train import save_checkpoint, train_static

    records = read_jsonl(args.data)
    mcfg, tcfg = _model_and_train_configs(args, conf)
    model = init_model(mcfg, args.seed)
    model, result = train_static(model, records, tcfg)
    save_checkpoint(model, args.out)
    print(json.dumps({"checkpoint": str(args.out), "parameters": parameter_count(model),
                      "epoch_losses": result.epoch_losses, "steps": result.steps}))


def cmd_predict(args, conf) -> None:
    from dfcost.synth import read_jsonl
    from dfcost.train import load_checkpoint, predict

    model = load_checkpoint(args.checkpoint)
    lines = []
    for rec in read_jsonl(args.data):
        preds = predict(model, rec.workload, beam_width=args.beam_width, samples=args.samples, seed=args.seed)
        row = {"id": rec.id}
        for m, p in preds.items():
            row[m] = {"value": p.value, "confidence": p.confidence, "regression": p.regression}
            if p.samples:
                row[m]["samples"] = p.samples
        lines.append(json.dumps(row, sort_keys=True))
    _write_text(args.out, "".join(line + "\n" for line in lines))


def cmd_calibrate(args, conf) -> None:
    from dfcost.calibrate import CalibConfig, calibrate_loop
    from dfcost.evaluate import shifted_states
    from dfcost.synth import read_jsonl
    from dfcost.train import load_checkpoint, save_checkpoint

    model = load_checkpoint(args.checkpoint)
    ccfg = _apply(CalibConfig(), conf.get("calibrate", {}))
    over = {"seed": args.seed}
    if args.iterations is not None:
        over["iterations"] = args.iterations
    ccfg = replace(ccfg, **over)
    records = read_jsonl(args.data)
    if args.shift:
        lo, hi = (float(x) for x in args.shift.split(","))
        stream = [(w, i) for w, i, _ in shifted_states(records, lo, hi, args.input_base, args.seed, per_workload=4)]
    else:
        stream = [(r.workload, r.workload.input) for r in records if r.workload.input_symbols]
    held = None
    if args.eval_data:
        ev = read_jsonl(args.eval_data)
        held = [(r.workload, r.workload.input, r.labels.cycles) for r in ev]
    model, trace = calibrate_loop(model, stream, cfg=ccfg, eval_set=held, trace_path=args.trace)
    save_checkpoint(model, args.out)
    print(json.dumps({"checkpoint": str(args.out), "iterations": len(trace) - 1,
                      "final_mape": trace[-1].mape}))


def cmd_eval(args, conf) -> None:
    from dfcost.evaluate import evaluate_model, validate_report
    from dfcost.synth import read_jsonl
    from dfcost.train import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    test = read_jsonl(args.data)
    train = read_jsonl(args.train_data) if args.train_data else test
    report = evaluate_model(model, test, train, samples=args.samples, seed=args.seed)
    report.meta["checkpoint"] = Path(args.checkpoint).name
    validate_report(report)
    _write_text(args.out, report.to_json())


def cmd_ablate(args, conf) -> None:
    from dfcost.evaluate import AblationConfig, run_ablation

    acfg = _apply(AblationConfig(), conf.get("ablate", {}))
    acfg = replace(acfg, seed=args.seed, model=conf.get("model", acfg.model),
                   train=conf.get("train", acfg.train), calibrate=conf.get("calibrate", acfg.calibrate))
    if args.n is not None:
        acfg = replace(acfg, n_records=args.n)
    if args.arms:
        acfg = replace(acfg, arms=tuple(args.arms.split(",")))
    _write_text(args.out, run_ablation(acfg).to_json())


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", type=Path, default=None, help="JSON file with synth/model/train/calibrate/ablate sections")
    common.add_argument("--out", default=None)

    p = argparse.ArgumentParser(prog="dfcost", description="Dataflow accelerator cost modelling toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a labelled dataset (JSON Lines)")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--mix", default=None, help="ast,dataflow,mutation fractions, e.g. 0.3,0.5,0.2")
    s.add_argument("--format", choices=("direct", "reasoning", "both"), default=None)
    s.set_defaults(func=cmd_synth, out_required=True)

    t = sub.add_parser("train", parents=[common], help="train a model on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--embed-dim", type=int, default=None)
    t.add_argument("--time-budget", type=float, default=None, help="seconds")
    t.set_defaults(func=cmd_train, out_required=True)

    pr = sub.add_parser("predict", parents=[common], help="predict metrics for dataset records")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--beam-width", type=int, default=1)
    pr.add_argument("--samples", type=int, default=1)
    pr.set_defaults(func=cmd_predict, out_required=False)

    c = sub.add_parser("calibrate", parents=[common], help="DPO calibration of the cycles head")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True, help="records whose workloads feed the calibration stream")
    c.add_argument("--eval-data", default=None, help="held-out records for the error trace")
    c.add_argument("--trace", default=None, help="JSON Lines calibration trace")
    c.add_argument("--iterations", type=int, default=None)
    c.add_argument("--shift", default=None, help="lo,hi multiples of the input base for stream inputs")
    c.add_argument("--input-base", type=int, default=32)
    c.set_defaults(func=cmd_calibrate, out_required=True)

    e = sub.add_parser("eval", parents=[common], help="write an evaluation report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--train-data", default=None, help="training records for edge-bin percentiles")
    e.add_argument("--samples", type=int, default=0, help="pass@k sample count (0 = skip)")
    e.set_defaults(func=cmd_eval, out_required=False)

    a = sub.add_parser("ablate", parents=[common], help="train and compare ablation arms")
    a.add_argument("--n", type=int, default=None)
    a.add_argument("--arms", default=None, help="comma list of encoding,head,dpo,mask")
    a.set_defaults(func=cmd_ablate, out_required=False)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.out_required and args.out is None:
            raise ValueError(f"{args.command}: --out is required")
        torch.manual_seed(args.seed)
        args.func(args, _load_config(args.config))
    except Exception as exc:  # noqa: BLE001 - reported as a structured record
        record = {"command": args.command, "error": type(exc).__name__, "message": str(exc),
                  "where": traceback.extract_tb(exc.__traceback__)[-1].name if exc.__traceback__ else None}
        sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
