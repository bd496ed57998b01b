"""Command-line front end.

Subcommands: train (run distributed SGD, write metrics/model/run
manifest), fuzz (hammer the aggregation protocol with faults and check
exactly-once semantics), latency (compare in-switch vs endhost
AllReduce), predict (cost-model throughput sweep), compare (closed-form
iteration-time comparison of the training strategies).

Exit codes: 0 success, 1 property violation (lost liveness, corrupted
sums, failed fuzz seed), 2 usage or configuration error.

Config files are flat `key = value` lines; `#` starts a comment. Keys
mirror the TrainingConfig, FaultModel, and TimingParams field names,
plus dataset selection (`dataset` for a LIBSVM path, or `samples`,
`features`, `margin`, `data_seed` for synthetic blobs) and `mode`
(mp or dp). All randomness derives from the single `seed` key.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .costmodel import CostParams, th_all, th_comp, th_engine, th_mem
from .ingest import (
    DataError,
    ParseError,
    PartitionError,
    make_blobs,
    normalize_quantize,
    parse_libsvm,
    quantize_dense,
)
from .netsim import (
    EndhostTopology,
    FaultModel,
    GroundTruthViolation,
    LivenessFailure,
    PumpWorkload,
    Simulator,
    StarTopology,
    measure_allreduce_latency,
)
from .trainer import (
    ConfigError,
    TimingParams,
    TrainingConfig,
    simulate_iteration_time,
    train_data_parallel,
    train_model_parallel,
)

USAGE_ERROR = 2
VIOLATION = 1

_FAULT_KEYS = {"drop_prob", "dup_prob", "latency_ns", "jitter_ns", "seed"}
_TIMING_KEYS = {f.name for f in dataclasses.fields(TimingParams)}
_TRAIN_KEYS = {
    f.name for f in dataclasses.fields(TrainingConfig) if f.name not in ("fault", "timing")
}
_DATA_KEYS = {"dataset", "samples", "features", "margin", "data_seed"}
_KNOWN_KEYS = _FAULT_KEYS | _TIMING_KEYS | _TRAIN_KEYS | _DATA_KEYS | {"mode"}


def _coerce(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def load_config(path: str) -> dict:
    cfg = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        cfg[key] = _coerce(value.strip())
    return cfg


def resolve_config(cfg: dict, seed_override=None) -> dict:
    out = dict(cfg)
    if seed_override is not None:
        out["seed"] = seed_override
    out.setdefault("mode", "mp")
    out.setdefault("seed", 0)
    if out["mode"] not in ("mp", "dp"):
        raise ConfigError(f"mode must be mp or dp, got {out['mode']!r}")
    return out


def build_training_config(cfg: dict) -> TrainingConfig:
    fault = FaultModel(**{k: cfg[k] for k in _FAULT_KEYS if k in cfg})
    timing = TimingParams(**{k: cfg[k] for k in _TIMING_KEYS if k in cfg})
    fields = {k: cfg[k] for k in _TRAIN_KEYS if k in cfg}
    return TrainingConfig(fault=fault, timing=timing, **fields)


def build_dataset(cfg: dict):
    loss_kind = cfg.get("loss_kind", "squared")
    if "dataset" in cfg:
        path = Path(cfg["dataset"])
        if not path.exists():
            raise ConfigError(f"dataset not found: {path}")
        return normalize_quantize(parse_libsvm(path), loss_kind)
    labels, feats = make_blobs(
        int(cfg.get("samples", 1024)),
        int(cfg.get("features", 256)),
        margin=float(cfg.get("margin", 0.5)),
        seed=int(cfg.get("data_seed", cfg.get("seed", 0))),
    )
    return quantize_dense(labels, feats, loss_kind)


def _write_run_manifest(out_dir: Path, subcommand: str, cfg: dict) -> None:
    manifest = {
        "subcommand": subcommand,
        "config": cfg,
        "versions": {
            "switchsgd": __version__,
            "numpy": np.__version__,
            "python": ".".join(map(str, sys.version_info[:3])),
        },
    }
    (out_dir / "run.json").write_text(json.dumps(manifest, indent=2) + "\n")


def cmd_train(args) -> int:
    cfg = resolve_config(load_config(args.config), args.seed)
    if args.mode:
        cfg["mode"] = args.mode
    dataset = build_dataset(cfg)
    tc = build_training_config(cfg)
    train = train_data_parallel if cfg["mode"] == "dp" else train_model_parallel
    model, metrics = train(dataset, tc, horizon_ns=args.horizon_ns)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as f:
        metrics.write_csv(f)
    (out / "model.bin").write_bytes(model.astype("<i4").tobytes())
    _write_run_manifest(out, "train", cfg)
    final = metrics.losses[-1]
    print(
        f"mode={cfg['mode']} epochs={tc.epochs} loss {metrics.initial_loss:.6f}"
        f" -> {final:.6f} bytes={metrics.total_bytes}"
        f" retx={metrics.counters['retransmits']} virtual_ns={metrics.epoch_rows[-1]['virtual_time_ns']}"
    )
    return 0


def _fuzz_one(args, seed: int, out: Path):
    topo = StarTopology(args.workers, args.slots, args.payload)
    fault = FaultModel(
        drop_prob=args.drop,
        dup_prob=args.dup,
        latency_ns=args.latency_ns,
        jitter_ns=args.jitter_ns,
        seed=seed,
    )
    sim = Simulator(
        topo,
        fault,
        PumpWorkload(args.rounds),
        collect_events=True,
        wire_check=True,
        switch_mutate=args.mutate,
        horizon_ns=args.horizon_ns,
    )
    try:
        trace = sim.run()
    except (LivenessFailure, GroundTruthViolation) as e:
        trace = e.trace if isinstance(e, LivenessFailure) else sim._trace(False)
        path = out / f"fuzz_seed{seed}_trace.csv"
        out.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            trace.write_csv(f)
        return e, path
    if trace.incomplete_rounds:
        return RuntimeError(f"{trace.incomplete_rounds} rounds never completed"), None
    return trace, None


def cmd_fuzz(args) -> int:
    out = Path(args.out)
    failures = 0
    detected = 0
    for seed in range(args.seeds):
        result, trace_path = _fuzz_one(args, seed, out)
        if isinstance(result, Exception):
            kind = type(result).__name__
            where = f" trace={trace_path}" if trace_path else ""
            if args.mutate:
                detected += 1
                print(f"seed {seed}: corruption detected ({kind}){where}")
            else:
                failures += 1
                print(f"seed {seed}: FAIL {kind}: {result}{where}")
            continue
        c = result.counters
        print(
            f"seed {seed}: ok rounds={args.rounds}"
            f" retx={c['retransmits']} dropped={c['dropped']}"
            f" duplicated={c['duplicated']} stale_confirms={c['stale_confirms']}"
        )
    if args.mutate:
        # self-test mode: the checker must notice the corrupted switch
        if detected == args.seeds:
            print(f"mutation {args.mutate!r} detected on all {args.seeds} seeds")
            return 0
        print(f"mutation {args.mutate!r} escaped detection on {args.seeds - detected} seeds")
        return VIOLATION
    if failures:
        print(f"{failures}/{args.seeds} seeds failed")
        return VIOLATION
    print(f"all {args.seeds} seeds passed")
    return 0


def cmd_latency(args) -> int:
    fault = FaultModel(
        drop_prob=args.drop,
        dup_prob=args.dup,
        latency_ns=args.latency_ns,
        jitter_ns=args.jitter_ns,
        seed=args.seed,
    )
    common = dict(n_workers=args.workers, n_slots=args.slots, payload_len=args.payload)
    topos = {
        "in_switch": StarTopology(proc_ns=args.proc_ns, **common),
        "endhost": EndhostTopology(
            proc_ns=args.proc_ns, host_proc_ns=args.host_proc_ns, **common
        ),
    }
    rows = []
    for name, topo in topos.items():
        sim = Simulator(topo, fault, PumpWorkload(args.rounds), collect_events=False)
        stats = measure_allreduce_latency(sim.run())
        rows.append({"topology": name, **{k: stats[k] for k in ("p50", "p99", "min", "max", "mean", "count")}})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "latency.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    ratio = rows[1]["p50"] / rows[0]["p50"]
    for r in rows:
        print(f"{r['topology']}: p50={r['p50']}ns p99={r['p99']}ns over {r['count']} rounds")
    print(f"endhost/in_switch p50 ratio: {ratio:.2f}")
    return 0


def cmd_predict(args) -> int:
    precisions = args.precision or [1, 2, 3, 4, 5, 6, 7, 8]
    fpgas = args.fpgas or [1, 2, 4, 8]
    rows = []
    for f_count in fpgas:
        for s in precisions:
            p = CostParams(
                n_fpgas=f_count,
                n_engines=args.engines,
                n_features=args.features,
                minibatch=args.minibatch,
                precision=s,
            )
            rows.append(
                {
                    "n_fpgas": f_count,
                    "n_engines": args.engines,
                    "precision": s,
                    "th_comp_gbps": round(th_comp(p), 4),
                    "th_mem_gbps": th_mem(s),
                    "th_engine_gbps": round(th_engine(p), 4),
                    "th_all_gbps": round(th_all(p), 4),
                }
            )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predict.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {out / 'predict.csv'}")
    return 0


def cmd_compare(args) -> int:
    rows = []
    for b in args.minibatch:
        for mb in args.microbatch:
            if mb > b:
                continue
            t = simulate_iteration_time(
                forward_dp_ns=args.forward_dp_ns,
                backward_dp_ns=args.backward_dp_ns,
                forward_mp_ns=args.forward_mp_ns * b / args.minibatch[0],
                backward_mp_ns=args.backward_mp_ns * b / args.minibatch[0],
                dim=args.features,
                minibatch=b,
                microbatch=mb,
                bandwidth=args.bandwidth,
                latency_ns=args.latency_ns,
            )
            rows.append(
                {
                    "minibatch": b,
                    "microbatch": mb,
                    "dp_ns": round(t["dp"], 3),
                    "vanilla_mp_ns": round(t["vanilla_mp"], 3),
                    "pipelined_mp_ns": round(t["pipelined_mp"], 3),
                    "speedup_vs_vanilla": round(t["vanilla_mp"] / t["pipelined_mp"], 4),
                }
            )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "compare.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(
            f"B={r['minibatch']} MB={r['microbatch']}:"
            f" pipelined={r['pipelined_mp_ns']}ns vanilla={r['vanilla_mp_ns']}ns"
            f" dp={r['dp_ns']}ns speedup={r['speedup_vs_vanilla']}"
        )
    return 0


def _int_list(text: str):
    return [int(x) for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="switchsgd", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="subcommand", required=True)

    t = sub.add_parser("train", help="run distributed SGD in the network simulator")
    t.add_argument("--config", required=True, help="flat key=value config file")
    t.add_argument("--seed", type=int, default=None, help="override the config seed")
    t.add_argument("--mode", choices=("mp", "dp"), default=None, help="override mode")
    t.add_argument("--out", default=".", help="output directory")
    t.add_argument("--horizon-ns", type=int, default=None, help="abort wall on virtual time")
    t.set_defaults(fn=cmd_train)

    f = sub.add_parser("fuzz", help="fault-injection check of the aggregation protocol")
    f.add_argument("--rounds", type=int, default=1000)
    f.add_argument("--workers", type=int, default=8)
    f.add_argument("--slots", type=int, default=16)
    f.add_argument("--payload", type=int, default=8)
    f.add_argument("--drop", type=float, default=0.1)
    f.add_argument("--dup", type=float, default=0.05)
    f.add_argument("--latency-ns", type=int, default=500)
    f.add_argument("--jitter-ns", type=int, default=400)
    f.add_argument("--seeds", type=int, default=10, help="run seeds 0..N-1")
    f.add_argument("--mutate", default=None, help="corrupt the switch (checker self-test)")
    f.add_argument("--horizon-ns", type=int, default=None)
    f.add_argument("--out", default=".", help="directory for failure traces")
    f.set_defaults(fn=cmd_fuzz)

    l = sub.add_parser("latency", help="in-switch vs endhost AllReduce latency")
    l.add_argument("--rounds", type=int, default=1000)
    l.add_argument("--workers", type=int, default=8)
    l.add_argument("--slots", type=int, default=16)
    l.add_argument("--payload", type=int, default=8)
    l.add_argument("--latency-ns", type=int, default=500)
    l.add_argument("--proc-ns", type=int, default=100)
    l.add_argument("--host-proc-ns", type=int, default=2000)
    l.add_argument("--drop", type=float, default=0.0)
    l.add_argument("--dup", type=float, default=0.0)
    l.add_argument("--jitter-ns", type=int, default=0)
    l.add_argument("--seed", type=int, default=0)
    l.add_argument("--out", default=".")
    l.set_defaults(fn=cmd_latency)

    pr = sub.add_parser("predict", help="cost-model throughput sweep")
    pr.add_argument("--features", type=int, default=1_000_000)
    pr.add_argument("--minibatch", type=int, default=16)
    pr.add_argument("--engines", type=int, default=1)
    pr.add_argument("--precision", type=_int_list, default=None, help="comma list")
    pr.add_argument("--fpgas", type=_int_list, default=None, help="comma list")
    pr.add_argument("--out", default=".")
    pr.set_defaults(fn=cmd_predict)

    c = sub.add_parser("compare", help="closed-form iteration-time comparison")
    c.add_argument("--minibatch", type=_int_list, default=[32, 64, 128])
    c.add_argument("--microbatch", type=_int_list, default=[4, 8, 16])
    c.add_argument("--forward-mp-ns", type=float, default=100.0, help="at the smallest B")
    c.add_argument("--backward-mp-ns", type=float, default=100.0, help="at the smallest B")
    c.add_argument("--forward-dp-ns", type=float, default=100.0)
    c.add_argument("--backward-dp-ns", type=float, default=6400.0)
    c.add_argument("--features", type=int, default=4096)
    c.add_argument("--bandwidth", type=float, default=1.0, help="payload words per ns")
    c.add_argument("--latency-ns", type=float, default=1100.0)
    c.add_argument("--out", default=".")
    c.set_defaults(fn=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DataError, ParseError, PartitionError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except (LivenessFailure, GroundTruthViolation) as e:
        print(f"property violation: {e}", file=sys.stderr)
        return VIOLATION


if __name__ == "__main__":
    sys.exit(main())
