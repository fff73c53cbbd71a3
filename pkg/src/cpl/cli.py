"""Command line: gen-data, train, eval, gate-report, grad-check.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, default_seed, load_run_config, write_effective_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("cpl")

MANIFEST_VERSION = 1


def _run_config(args) -> RunConfig:
    run = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    if args.seed is not None:
        run.train.seed = args.seed
    elif not getattr(args, "config", None):
        run.train.seed = default_seed()
    return run


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---- gen-data --------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .fileio import write_tensor
    from .synth import TASKS, derive_seed, make_sample

    run = _run_config(args)
    cfg = run.train
    tasks = args.tasks.split(",") if args.tasks else (cfg.tasks if args.config else list(TASKS))
    bad = [t for t in tasks if t not in TASKS]
    if bad:
        raise ConfigError(f"unknown tasks {bad}")
    if args.count < 0:
        raise ConfigError("--count must be non-negative")
    out = Path(args.out)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(args.count):
        task = tasks[i % len(tasks)]
        s = make_sample(task, derive_seed(cfg.seed, 7, i), cfg.crop, cfg.gen_size, cfg.ranges, augment_data=False)
        deg = f"tensors/{i:06d}_{task}_degraded.tensor"
        cln = f"tensors/{i:06d}_{task}_clean.tensor"
        write_tensor(out / deg, s.degraded.data)
        write_tensor(out / cln, s.clean.data)
        lines.append(_dump({"version": MANIFEST_VERSION, "index": i, "task": task, "degraded": deg, "clean": cln, "spec": s.spec.to_json()}))
    (out / "manifest.jsonl").write_text("".join(line + "\n" for line in lines))
    print(f"wrote {args.count} samples to {out}")
    return EXIT_OK


def read_manifest(path) -> dict[str, list]:
    """SampleTriples grouped by task from a gen-data manifest."""
    from .fileio import read_tensor
    from .numerics import Tensor
    from .synth import DegradationSpec, SampleTriple, Task

    path = Path(path)
    root = path.parent
    out: dict[str, list] = {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {rec.get('version')!r}")
        triple = SampleTriple(
            Tensor(read_tensor(root / rec["degraded"])),
            Tensor(read_tensor(root / rec["clean"])),
            Task(rec["task"]),
            DegradationSpec.from_json(rec["spec"]),
        )
        out.setdefault(rec["task"], []).append(triple)
    return out


# ---- train -----------------------------------------------------------------


def cmd_train(args) -> int:
    from .trainer import train_loop

    run = _run_config(args)
    if args.steps is not None:
        if args.steps < 0:
            raise ConfigError("--steps must be non-negative")
        run.train.steps = args.steps
    if args.out_dir:
        run.out_dir = args.out_dir
    run.train.validate()
    out = Path(run.out_dir)
    write_effective_config(run, out / "effective_config.json")

    def report(rec):
        if rec["step"] % max(1, run.train.log_every * 50) == 0:
            log.info("step %d total %.5f entropy %.3f", rec["step"], rec["total"], rec["mean_entropy_bits"])

    state, _ = train_loop(run.train, out_dir=out, resume=args.resume, on_step=report)
    print(f"trained to step {state.step}; checkpoint {out / 'final.ckpt'}")
    return EXIT_OK


# ---- eval / gate-report ----------------------------------------------------


def heldout_samples(config, per_task: int, seed: int | None = None) -> dict[str, list]:
    """Held-out synthetic samples drawn from a stream disjoint from training."""
    from .synth import make_batch
    from .trainer import eval_seed

    base = eval_seed(config) if seed is None else seed
    return {
        t: make_batch([t], per_task, config.crop, seed=base + i, gen_size=config.gen_size, ranges=config.ranges, augment_data=False)
        for i, t in enumerate(config.tasks)
    }


def _load_state(path):
    from .checkpoint import load_checkpoint, state_from_checkpoint

    return state_from_checkpoint(load_checkpoint(path))


def cmd_eval(args) -> int:
    from .analysis import residual_analysis

    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    state = _load_state(args.checkpoint)
    if args.data:
        samples = read_manifest(args.data)
    else:
        samples = heldout_samples(state.config, args.samples_per_task, args.seed)
    residual_dir = args.residual_dir if args.mismatch else None
    report = residual_analysis(state, samples, mismatch=args.mismatch, residual_dir=residual_dir)
    text = report.dumps()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def gate_log_of(state, samples: dict[str, list]) -> list[dict]:
    from . import numerics as nx
    from .numerics import Tensor
    from .spm import gate

    recs = []
    dtype = np.dtype(state.config.dtype)
    with nx.no_grad():
        for task, triples in samples.items():
            deg = np.stack([s.degraded.data for s in triples]).astype(dtype)
            _, x = state.backbone.encode(Tensor(deg))
            dec = gate(x, state.bank, state.config.k)
            for i in range(len(triples)):
                rec = {"step": state.step, "sample": i, "task": task}
                rec.update(dec.sample(i).to_json())
                recs.append(rec)
    return recs


def cmd_gate_report(args) -> int:
    from .analysis import AnalysisError, entropy_csv, entropy_report, read_jsonl, selection_map
    from .fileio import write_pixmap

    if args.log:
        records = read_jsonl(args.log)
    elif args.checkpoint:
        state = _load_state(args.checkpoint)
        records = gate_log_of(state, heldout_samples(state.config, args.samples_per_task, args.seed))
    else:
        raise ConfigError("gate-report needs --log or --checkpoint")
    if not records:
        raise AnalysisError("empty gate log")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep = entropy_report(records)
    (out / "entropy.csv").write_text(entropy_csv(rep))
    summary = {"entropy": rep}
    try:
        smap = selection_map(records, args.samples_per_task)
    except AnalysisError as exc:
        summary["selection_map"] = {"error": str(exc)}
    else:
        write_pixmap(out / "selection_map.pgm", smap.pixmap())
        summary["selection_map"] = {
            "tasks": smap.tasks,
            "assignment": smap.assignment.tolist(),
            "dominant": {t: {"expert": e, "freq": f} for t, (e, f) in smap.dominant().items()},
        }
    (out / "gate_report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(entropy_csv(rep), end="")
    return EXIT_OK


# ---- grad-check ------------------------------------------------------------


def cmd_grad_check(args) -> int:
    from .diagnostics import LINEAR_TOLERANCE, SUITES, TOLERANCE, corrupted_rule

    seed = default_seed() if args.seed is None else args.seed
    suite = SUITES[args.scope]
    if args.corrupt:
        with corrupted_rule(args.corrupt):
            res = suite(trials=args.trials, seed=seed)
    else:
        res = suite(trials=args.trials, seed=seed)
    tol = LINEAR_TOLERANCE if args.scope == "linear" else TOLERANCE
    for name in sorted(res.worst):
        print(f"{name:32s} {res.worst[name]:.3e}")
    ok = res.passed(tol)
    print(f"{'PASS' if ok else 'FAIL'} scope={args.scope} worst={res.max_error:.3e} tol={tol:.0e} checked={res.checked} skipped={res.skipped}")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---- entry -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cpl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed and $CPL_SEED")

    g = sub.add_parser("gen-data", help="write synthetic degraded/clean pairs and a manifest")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--tasks", help="comma-separated task list (default: all five, or the config's)")
    common(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--config")
    t.add_argument("--resume")
    t.add_argument("--steps", type=int)
    t.add_argument("--out-dir")
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    src = e.add_mutually_exclusive_group()
    src.add_argument("--data", help="gen-data manifest")
    src.add_argument("--synthetic", action="store_true", help="held-out synthetic samples (default)")
    e.add_argument("--mismatch", action="store_true", help="add forced-override PSNR and residual maps")
    e.add_argument("--samples-per-task", type=int, default=100)
    e.add_argument("--residual-dir")
    e.add_argument("--out")
    common(e)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("gate-report", help="entropy tables and selection maps")
    r.add_argument("--log", help="gate log (JSON lines)")
    r.add_argument("--checkpoint", help="build the log from held-out samples instead")
    r.add_argument("--out", required=True)
    r.add_argument("--samples-per-task", type=int, default=100)
    common(r)
    r.set_defaults(func=cmd_gate_report)

    c = sub.add_parser("grad-check", help="finite-difference gradient checks")
    c.add_argument("--scope", choices=["op", "end2end", "linear"], default="op")
    c.add_argument("--trials", type=int, default=20)
    c.add_argument("--corrupt", help=argparse.SUPPRESS)
    common(c)
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    from .analysis import AnalysisError
    from .checkpoint import CheckpointError
    from .fileio import TensorFileError
    from .numerics import NonFiniteError
    from .trainer import NonFiniteLoss

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLoss, NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, TensorFileError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (AnalysisError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
