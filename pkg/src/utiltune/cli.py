"""``utiltune`` command line: gen-config, collect, train, eval, report, ablate.

Each command prints one ``key=value`` summary line on stdout and writes its
artifacts to files. Failures print a category-prefixed message on stderr and
exit 1 (runtime) or 2 (bad input).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .config import load_config, write_preset
from .errors import ConfigError, IOFailure, UtilTuneError
from .evaluation import BUCKET_KEYS, ablation_run, gate, policy_quality, population_report
from .logfile import read_log, write_log
from .policy import load
from .simenv import collect
from .train import train


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def summary(**fields) -> str:
    return " ".join(f"{k}={_fmt(v)}" for k, v in fields.items())


def _ensure_parent(path) -> Path:
    p = Path(path)
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {p.parent}: {exc}") from exc
    return p


def _variants(text: str) -> list[str]:
    out = [v.strip() for v in text.split(",") if v.strip()]
    if not out:
        raise ConfigError("--variants needs at least one name")
    return out


# --- commands ------------------------------------------------------------


def cmd_gen_config(args) -> str:
    write_preset(args.preset, _ensure_parent(args.out))
    return summary(command="gen-config", preset=args.preset, path=args.out)


def cmd_collect(args) -> str:
    cfg = load_config(args.config)
    sim, grid = cfg.sim_config(), cfg.action_grid()
    policy = cfg.behavior_policy(args.policy)
    triplets = collect(sim, grid, policy, args.count)
    n = write_log(_ensure_parent(args.out), triplets, sim.schema(), grid,
                  extra={"behavior": args.policy, "seed": cfg.seed, "requests": args.count})
    return summary(command="collect", records=n, requests=args.count, policy=args.policy,
                   schema_hash=sim.schema().hash(), path=args.out)


def cmd_train(args) -> str:
    cfg = load_config(args.config)
    sim, grid = cfg.sim_config(), cfg.action_grid()
    tc = cfg.train_config(args.variant)
    metrics = args.metrics or str(Path(args.out).with_suffix(".metrics.jsonl"))
    _, report = train(args.log, grid, sim.schema(), tc, _ensure_parent(args.out), _ensure_parent(metrics))
    return summary(command="train", steps=report.n_steps, variant=tc.reward_config.variant,
                   first_reward=report.mean_reward_window(True), last_reward=report.mean_reward_window(False),
                   checkpoint=args.out, metrics=metrics)


def cmd_eval(args) -> str:
    cfg = load_config(args.config)
    sim, grid = cfg.sim_config(), cfg.action_grid()
    schema = sim.schema()
    net = load(args.checkpoint, schema)
    data = read_log(args.log, schema)
    rc = cfg.reward_config(args.variant)
    ratio = None
    if args.simulate:
        ratio = policy_quality(net, sim, grid, rc, cfg.eval.n_requests, cfg.eval.n_oracle).oracle_ratio
    report = gate(net, data, cfg.eval.diversity_threshold, rc, ratio)
    if args.out:
        _ensure_parent(args.out).write_text(report.summary() + "\n", encoding="utf-8")
    return report.summary()


def cmd_report(args) -> str:
    cfg = load_config(args.config)
    sim, grid = cfg.sim_config(), cfg.action_grid()
    net = load(args.checkpoint, sim.schema())
    out_dir = Path(args.out_dir or cfg.paths.out_dir)
    keys = list(BUCKET_KEYS) if args.key == "all" else [args.key]
    written = []
    for key in keys:
        rep = population_report(net, sim, grid, key, cfg.eval.bucket_population, cfg.eval.n_buckets)
        csv_path = _ensure_parent(out_dir / f"buckets_{key}.csv")
        rep.write_csv(csv_path)
        rep.write_svg(out_dir / f"buckets_{key}.svg")
        written.append(f"{key}:" + ",".join(f"{w:.6g}" for w in rep.column("w_click")))
    return summary(command="report", keys=",".join(keys), w_click=";".join(written), out_dir=str(out_dir))


def cmd_ablate(args) -> str:
    cfg = load_config(args.config)
    sim, grid = cfg.sim_config(), cfg.action_grid()
    schema = sim.schema()
    if args.log:
        data = read_log(args.log, schema)
    else:
        # collect the shared log in memory through the same on-disk format
        tmp = _ensure_parent(Path(cfg.paths.out_dir) / "ablation_log.jsonl")
        write_log(tmp, collect(sim, grid, cfg.behavior_policy("uniform"), args.count), schema, grid)
        data = read_log(tmp, schema)
    variants = [cfg.reward_config(v) for v in _variants(args.variants)]
    result = ablation_run(variants, data, sim, grid, schema, cfg.train_config(), cfg.eval.n_requests)
    out = args.out or str(Path(cfg.paths.out_dir) / "ablation.csv")
    result.write_csv(_ensure_parent(out))
    parts = [f"{d['variant']}:revenue={d['revenue']:+.6f},ctr={d['ctr']:+.6f}" for d in result.deltas()]
    errors = [r.variant for r in result.rows if r.error]
    line = summary(command="ablate", base=result.rows[0].variant, deltas=";".join(parts) or "-", table=out)
    if errors:
        line += " failed=" + ",".join(errors)
    return line


# --- entry point ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="utiltune", description="Learn per-user ranking-utility hyperparameters.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-config", help="write a commented preset configuration")
    g.add_argument("--preset", choices=("desk", "paperlike"), default="desk")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_config)

    c = sub.add_parser("collect", help="simulate exploration traffic and write a log")
    c.add_argument("--config", required=True)
    c.add_argument("--policy", choices=("uniform", "gaussian"), default="uniform")
    c.add_argument("--count", type=int, required=True, help="simulated requests before the exploration split")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_collect)

    t = sub.add_parser("train", help="train a policy on a log")
    t.add_argument("--config", required=True)
    t.add_argument("--log", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--metrics", help="per-step metrics file (default: next to the checkpoint)")
    t.add_argument("--variant", help="override reward.variant")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="offline Diversity / Relative_Gain gate")
    e.add_argument("--config", required=True)
    e.add_argument("--log", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--variant", help="override reward.variant")
    e.add_argument("--simulate", action="store_true", help="also report the oracle ratio on fresh requests")
    e.add_argument("--out", help="also write the summary line here")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="bucket report of learned parameters")
    r.add_argument("--config", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--key", choices=(*BUCKET_KEYS, "all"), default="ctr")
    r.add_argument("--out-dir")
    r.set_defaults(func=cmd_report)

    a = sub.add_parser("ablate", help="train one policy per reward variant and compare simulated metrics")
    a.add_argument("--config", required=True)
    a.add_argument("--variants", default="R0,R1,R2,R3,R4")
    a.add_argument("--log", help="shared log; collected from the config when omitted")
    a.add_argument("--count", type=int, default=50_000, help="requests to collect when --log is omitted")
    a.add_argument("--out", help="delta table CSV")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        line = args.func(args)
    except UtilTuneError as exc:
        print(str(exc), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"IO/ {exc}", file=sys.stderr)
        return 1
    print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
