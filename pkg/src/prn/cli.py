"""Command-line interface: ``prn generate | train | eval | reconstruct | gradcheck``.

Exit codes: 0 success, 1 verification failure, 2 input error.
"""

import argparse
import json
import logging
import os
import sys


from .data import SyntheticSpec, generate, load_dataset, save_dataset
from .errors import PRNError, SchemaError
from .gradcheck import run_gradcheck
from .network import load_checkpoint
from .train import TrainConfig, evaluate, reconstruct, train

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


def _emit(record):
    sys.stdout.write(json.dumps(record) + "\n")
    sys.stdout.flush()


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc


def cmd_generate(args):
    spec = SyntheticSpec(**_read_json(args.spec))
    ds = generate(spec)
    save_dataset(ds, args.out)
    _emit({"event": "generated", "frames": len(ds), "n_p": ds.n_p, "out": args.out})
    return EXIT_OK


def cmd_train(args):
    datasets = [load_dataset(p) for p in args.data]
    n_p = datasets[0].n_p
    if any(ds.n_p != n_p for ds in datasets):
        raise SchemaError("all datasets must share n_p")
    cfg = TrainConfig.from_dict(_read_json(args.config), n_p=n_p)
    if cfg.network.n_p != n_p:
        raise SchemaError(f"config n_p {cfg.network.n_p} does not match data n_p {n_p}")
    train(cfg, datasets if len(datasets) > 1 else datasets[0], checkpoint_dir=args.out,
          on_record=_emit)
    _emit({"event": "done", "checkpoint": os.path.join(args.out, "model.ckpt")})
    return EXIT_OK


def cmd_eval(args):
    params, net = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    report = evaluate(params, net, ds)
    with open(args.report, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh)
    _emit({"event": "eval", "mpjpe": report.mpjpe, "ne": report.ne, "frames": len(ds)})
    return EXIT_OK


def cmd_reconstruct(args):
    params, net = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    shapes = reconstruct(params, net, ds)
    doc = {
        "format": "prn-shapes-v1",
        "n_p": net.n_p,
        "shapes": [
            {"camera_id": fr.camera_id, "time": fr.time, "x3d": s.tolist()}
            for fr, s in zip(ds.frames, shapes)
        ],
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    _emit({"event": "reconstructed", "frames": len(ds), "out": args.out})
    return EXIT_OK


def cmd_gradcheck(args):
    def report(res):
        _emit({"event": "batch", **res})

    summary = run_gradcheck(n_batches=args.batches, n_f=args.nf, n_p=args.np, lam=args.lam,
                            seed=args.seed, tol=args.tol, h=args.h, on_result=report)
    _emit({"event": "gradcheck", **{k: v for k, v in summary.items() if k != "results"}})
    return EXIT_OK if summary["passed"] else EXIT_FAIL


def build_parser():
    p = argparse.ArgumentParser(prog="prn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic sequence dataset")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a regressor")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, action="append")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("reconstruct", help="export reconstructed shapes")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reconstruct)

    c = sub.add_parser("gradcheck", help="finite-difference check of the loss gradient")
    c.add_argument("--nf", type=int, default=6)
    c.add_argument("--np", type=int, default=8)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--lam", type=float, default=0.05)
    c.add_argument("--h", type=float, default=1e-5)
    c.add_argument("--batches", type=int, default=20)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (OSError, ValueError, TypeError, KeyError, PRNError) as exc:
        sys.stderr.write(f"prn {args.command}: {exc}\n")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
