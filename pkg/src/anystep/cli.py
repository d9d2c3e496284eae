"""Command-line driver: ``anystep {train,sample,verify,bench}``.

Runs are described by a config document (see ``anystep.config``); flags of
the form ``--set section.key=value`` override single keys.  Relative output
directories resolve under ``$ANYSTEP_RUN_ROOT`` (default ``./runs``).

Exit codes: 0 success, 1 failed verification, 2 configuration or input
error, 3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import config as cfgmod
from . import sampler, verify
from .errors import DomainError, NumericAbort
from .trainer import Trainer, run

RUN_ROOT_ENV = "ANYSTEP_RUN_ROOT"
EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def run_root():
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def _resolve(path):
    p = Path(path)
    return p if p.is_absolute() else run_root() / p


def _load_config(path, overrides):
    cfg = cfgmod.load(path) if path else cfgmod.defaults()
    for item in overrides or ():
        if "=" not in item:
            raise cfgmod.ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        cfgmod.set_value(cfg, key.strip(), value)
    cfgmod.validate(cfg)
    return cfg


def _build(cfg):
    spec = cfgmod.build_transport(cfg)
    ds = cfgmod.build_dataset(cfg).fit()
    return spec, ds, cfgmod.build_network(cfg, ds), cfgmod.build_train(cfg)


# -- checkpoint <-> trainer ------------------------------------------------------

def to_checkpoint(tr: Trainer, cfg):
    return ckpt_io.Checkpoint(
        spec=tr.spec, net_cfg=tr.net_cfg, train_cfg=tr.cfg.to_dict(), params=tr.params, ema=tr.ema,
        opt_m=tr.m, opt_v=tr.v, rng_state=tr.rng.bit_generator.state, step=tr.step_count,
        data_stats={"shift": tr.dataset.shift.tolist(), "scale": tr.dataset.scale.tolist()},
        run_config=cfgmod.dumps(cfg))


def restore_trainer(ck, spec, train_cfg, net_cfg, dataset):
    if ck.spec != spec or ck.net_cfg != net_cfg:
        raise cfgmod.ConfigError("checkpoint transport/network differ from the config; cannot resume")
    dataset.shift = np.asarray(ck.data_stats["shift"])
    dataset.scale = np.asarray(ck.data_stats["scale"])
    tr = Trainer(spec, train_cfg, net_cfg, dataset, params=ck.params)
    tr.ema, tr.m, tr.v = ck.ema.copy(), ck.opt_m.copy(), ck.opt_v.copy()
    tr.step_count = ck.step
    tr.rng.bit_generator.state = ck.rng_state
    return tr


# -- train -------------------------------------------------------------------------

def cmd_train(args):
    try:
        cfg = _load_config(args.config, args.set)
        spec, ds, net_cfg, train_cfg = _build(cfg)
        out = _resolve(args.out or cfg["run"]["name"])
        out.mkdir(parents=True, exist_ok=True)
        tr = None
        if args.resume:
            tr = restore_trainer(ckpt_io.load(args.resume), spec, train_cfg, net_cfg, ds)
    except (DomainError, ckpt_io.CheckpointError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    (out / "config.ini").write_text(cfgmod.dumps(cfg))
    every = cfg["run"]["checkpoint_every"]

    def on_step(t):
        if every and t.step_count % every == 0 and t.step_count < train_cfg.iterations:
            ckpt_io.save(out / f"step_{t.step_count:08d}.tim", to_checkpoint(t, cfg))

    tr = tr or Trainer(spec, train_cfg, net_cfg, ds)
    try:
        report = run(spec, train_cfg, net_cfg, ds, trainer=tr, metrics_path=out / "metrics.jsonl", on_step=on_step)
    except NumericAbort as exc:
        (out / "abort.json").write_text(json.dumps({"message": str(exc), **exc.diagnostics}))
        print(f"numeric abort: {exc}; dt histogram {exc.diagnostics.get('dt_hist')}", file=sys.stderr)
        return EXIT_NUMERIC
    final = out / "final.tim"
    ckpt_io.save(final, to_checkpoint(tr, cfg))
    last = report.losses[-1] if report.losses else float("nan")
    print(f"trained {len(report.losses)} steps (total {tr.step_count}) in {report.wall_clock:.1f}s; "
          f"last loss {last:.4g}; checkpoint {final}")
    return EXIT_OK


# -- sample ------------------------------------------------------------------------

def write_ppm(path, pts, size=256, lim=None):
    """Binary portable pixel map scatter of 2-D points (black on white)."""
    pts = np.asarray(pts, dtype=np.float64)[:, :2]
    lim = lim or float(np.max(np.abs(pts))) * 1.05 or 1.0
    img = np.full((size, size, 3), 255, dtype=np.uint8)
    ij = np.floor((pts + lim) / (2 * lim) * (size - 1)).astype(int)
    ok = np.all((ij >= 0) & (ij < size), axis=1)
    img[size - 1 - ij[ok, 1], ij[ok, 0]] = 0
    with open(path, "wb") as fh:
        fh.write(f"P6 {size} {size} 255\n".encode())
        fh.write(img.tobytes())


def cmd_sample(args):
    try:
        ck = ckpt_io.load(args.checkpoint)
        cfg = cfgmod.parse(ck.run_config) if ck.run_config else cfgmod.defaults()
        for key in ("steps", "n", "rho", "omega", "class_id"):
            value = getattr(args, key)
            if value is not None:
                cfg["sampler"][key] = value
        if args.ema is not None:
            cfg["sampler"]["use_ema"] = args.ema
        seed = args.seed if args.seed is not None else cfg["run"]["seed"]
        s = cfg["sampler"]
        sched = cfgmod.build_sample_schedule(cfg, ck.spec)
        sched.seed = seed
    except (DomainError, ckpt_io.CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    params = ck.ema if s["use_ema"] else ck.params
    model = sampler.network_model(params, ck.net_cfg, ck.spec)
    start = time.perf_counter()
    try:
        x = sampler.sample(model, ck.spec, sched, s["n"], class_id=s["class_id"], rng=np.random.default_rng(seed))
    except (DomainError, NumericAbort) as exc:
        print(f"sampling failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(exc, NumericAbort) else EXIT_CONFIG
    wall = time.perf_counter() - start
    shift, scale = np.asarray(ck.data_stats["shift"]), np.asarray(ck.data_stats["scale"])
    x = x / scale + shift
    nfe = sampler.nfe_count(sched)
    meta = {"checkpoint": str(args.checkpoint), "step": ck.step, "steps": sched.steps, "n": s["n"],
            "rho": sched.rho, "omega": sched.cfg_omega, "seed": seed, "use_ema": s["use_ema"],
            "class_id": s["class_id"], "nfe": nfe, "times": sched.times.tolist(), "transport": ck.spec.kind.value}
    sampler.write_samples_csv(args.out, x, meta)
    if args.ppm:
        write_ppm(args.ppm, x)
    print(f"NFE: {nfe}")
    print(f"wall-clock: {wall:.4f}s")
    return EXIT_OK


# -- verify ------------------------------------------------------------------------

def cmd_verify(args):
    start = time.perf_counter()
    results = verify.run_checks(args.level, corrupt_db_dt=args.corrupt_db_dt)
    print(verify.format_table(results))
    failed = [c.name for c in results if not c.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - start:.1f}s")
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# -- bench -------------------------------------------------------------------------

def bench(spec, train_cfg, net_cfg, ds, steps, repeats=3):
    """Per-step wall clock with the slope estimate on and off (df/dt = 0).

    Both variants start from the same seeded state for every repetition.
    Returns an empty dict when ``steps`` is 0.
    """
    if steps == 0:
        return {}
    timings = {"dde": [], "no_dde": []}
    rows = {}
    for _ in range(repeats):
        for name, enabled in (("dde", True), ("no_dde", False)):
            tr = Trainer(spec, train_cfg, net_cfg, ds)
            tr.dde_enabled = enabled
            start = time.perf_counter()
            for _ in range(steps):
                tr.step()
            timings[name].append((time.perf_counter() - start) / steps)
            rows[name] = dict(tr.forward_rows)
    med = {k: statistics.median(v) for k, v in timings.items()}
    return {
        "steps": steps,
        "repeats": repeats,
        "sec_per_step_dde": med["dde"],
        "sec_per_step_no_dde": med["no_dde"],
        "overhead_ratio": med["dde"] / med["no_dde"],
        "extra_forwards_per_sample": rows["dde"]["dde"] / rows["dde"]["train"],
        "extra_forwards_per_sample_disabled": rows["no_dde"]["dde"] / rows["no_dde"]["train"],
        "timings": timings,
    }


def cmd_bench(args):
    try:
        cfg = _load_config(args.config, args.set)
        spec, ds, net_cfg, train_cfg = _build(cfg)
    except (DomainError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    steps = args.steps if args.steps is not None else train_cfg.iterations
    report = bench(spec, train_cfg, net_cfg, ds, steps, args.repeats)
    if report:
        print(f"steps per repetition: {report['steps']}, repetitions: {report['repeats']} (median)")
        print(f"sec/step with DDE:    {report['sec_per_step_dde']:.5f}")
        print(f"sec/step without DDE: {report['sec_per_step_no_dde']:.5f}")
        print(f"overhead ratio:       {report['overhead_ratio']:.3f}")
        print(f"extra forward evaluations per sample: {report['extra_forwards_per_sample']:g}")
    else:
        print("zero iterations: empty report")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    return EXIT_OK


# -- entry ---------------------------------------------------------------------------

def _bool_flag(p, name, help_):
    p.add_argument(f"--{name}", dest=name, action="store_true", default=None, help=help_)
    p.add_argument(f"--no-{name}", dest=name, action="store_false")


def build_parser():
    ap = argparse.ArgumentParser(prog="anystep", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a transition model")
    p.add_argument("config", nargs="?", help="config document (defaults used if omitted)")
    p.add_argument("--out", help="run directory (relative paths resolve under $ANYSTEP_RUN_ROOT)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True, help="CSV path; metadata goes to <out>.json")
    p.add_argument("--steps", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--omega", type=float)
    p.add_argument("--class-id", dest="class_id", type=int)
    p.add_argument("--seed", type=int)
    _bool_flag(p, "ema", "use EMA parameters (default from config)")
    p.add_argument("--ppm", help="also write a scatter image (portable pixel map)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("verify", help="run the numerical self-check battery")
    p.add_argument("--level", choices=("fast", "full"), default="fast")
    p.add_argument("--corrupt-db-dt", dest="corrupt_db_dt", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="time training steps with and without the slope estimate")
    p.add_argument("config", nargs="?")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--steps", type=int, help="steps per repetition (default: trainer.iterations)")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", help="write the report as JSON")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
