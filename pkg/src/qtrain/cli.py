"""Command-line entry point: ``qtrain {train,plan,simulate-comms,report-flops,report-memory}``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from . import comms, memplan
from .model import ModelConfig
from .numerics import NonFiniteError
from .train import SyntheticCorpus, TrainConfig, Trainer, write_metrics_csv

__all__ = ["RunManifest", "load_manifest", "main", "build_parser"]


@dataclass
class RunManifest:
    """Everything a training run depends on. ``seed`` is the only entropy source."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: dict = field(default_factory=lambda: {"kind": "successor", "seed": 0})
    hardware: str | None = None
    seed: int = 1
    output: dict = field(default_factory=lambda: {"metrics": "metrics.csv", "checkpoint": "model.ckpt"})

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown manifest keys: {', '.join(sorted(unknown))}")
        model = _build(ModelConfig, d.get("model", {}), "model")
        seed = int(d.get("seed", 1))
        train = _build(TrainConfig, dict(d.get("train", {}), seed=seed), "train")
        data = dict({"kind": "successor", "seed": 0}, **(d.get("data") or {}))
        if data["kind"] != "successor":
            raise ValueError(f"unknown data kind {data['kind']!r}; only 'successor' is available")
        output = dict({"metrics": "metrics.csv", "checkpoint": "model.ckpt"}, **(d.get("output") or {}))
        return cls(model, train, data, d.get("hardware"), seed, output)

    def to_dict(self) -> dict:
        return {"model": asdict(self.model), "train": asdict(self.train), "data": self.data,
                "hardware": self.hardware, "seed": self.seed, "output": self.output}


def _build(cls, d: dict, section: str):
    names = {f.name for f in fields(cls)}
    bad = set(d) - names
    if bad:
        raise ValueError(f"unknown keys in '{section}': {', '.join(sorted(bad))}")
    return cls(**d)


def load_manifest(path) -> RunManifest:
    with open(path) as fh:
        return RunManifest.from_dict(yaml.safe_load(fh))


def _model_arg(name: str) -> ModelConfig:
    if os.path.exists(name):
        with open(name) as fh:
            return ModelConfig(**yaml.safe_load(fh))
    return memplan.arch(name)


def _profile(name: str):
    try:
        return memplan.load_profile(name)
    except KeyError as exc:
        raise SystemExit(f"error: {exc.args[0]}") from None


def _emit_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True, default=str)
    if path == "-":
        print(text)
    elif path:
        with open(path, "w") as fh:
            fh.write(text + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    try:
        m = load_manifest(args.manifest)
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: bad manifest {args.manifest}: {exc}", file=sys.stderr)
        return 1
    if args.seed is not None:
        m.seed = args.seed
        m.train.seed = args.seed
    if args.steps is not None:
        m.train.steps = args.steps
    if args.precision is not None:
        m.train.precision = args.precision
    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.manifest))
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, m.output["metrics"])
    ckpt_path = os.path.join(out_dir, m.output["checkpoint"])
    hw = memplan.load_profile(m.hardware) if m.hardware else None
    corpus = SyntheticCorpus(m.model.vocab, m.model.seq_len, seed=int(m.data.get("seed", 0)))
    trainer = Trainer(m.model, m.train, corpus, hw)

    def progress(row):
        if not args.quiet and (row["step"] % max(1, m.train.eval_every) == 0 or row["step"] == 1):
            print(f"step {row['step']:5d}  loss {row['train_loss']:.4f}  grad_norm {row['grad_norm']:.3f}",
                  file=sys.stderr)

    status = 0
    try:
        trainer.run(progress)
    except NonFiniteError as exc:
        print(f"error: training diverged at step {trainer.step}: {exc}", file=sys.stderr)
        status = 2
    with open(metrics_path, "w", newline="") as fh:
        write_metrics_csv(trainer.rows, fh)
    if status == 0:
        trainer.save(ckpt_path)
        first, last = trainer.rows[0]["train_loss"], trainer.rows[-1]["train_loss"]
        if not np.isfinite(last):
            print("error: final loss is not finite", file=sys.stderr)
            return 2
        print(f"trained {trainer.step} steps: loss {first:.4f} -> {last:.4f}; metrics {metrics_path}; "
              f"checkpoint {ckpt_path}")
    return status


def _plan_table(result: memplan.SearchResult, top: int) -> str:
    lines = [f"{'rank':>4} {'tps':>10} {'mb':>3} {'ga':>4} {'recompute':<16} {'offload':<22} "
             f"{'shard w/g':<9} {'device GB':>9} {'host GB':>8}"]
    for i, (tps, p, mem) in enumerate(result.plans[:top]):
        rc = ",".join(sorted(r.value for r in p.recompute)) or "---"
        sh = f"{int(p.shard_weights)}/{int(p.shard_grads)}"
        lines.append(f"{i + 1:>4} {tps:>10.0f} {p.micro_batch:>3} {p.ga_steps:>4} {rc:<16} "
                     f"{memplan.format_offload(p.offload):<22} {sh:<9} {mem.device_total / memplan.GB:>9.2f} "
                     f"{mem.host_total / memplan.GB:>8.2f}")
    return "\n".join(lines)


def cmd_plan(args) -> int:
    hw = _profile(args.hardware)
    cfg = _model_arg(args.model)
    res = memplan.search_plan(cfg, hw, args.workers, args.batch_tokens, args.precision, args.moments,
                              exhaustive=args.exhaustive, seq_len=args.seq_len)
    if not res.plans:
        print(f"model does not fit: {res.binding_constraint}")
        _emit_json(res.to_dict(), args.json)
        return 1
    print(f"{len(res.plans)} feasible plans ({res.explored} explored) for {args.model} on "
          f"{args.workers}x {hw.name}, {args.precision}")
    print(_plan_table(res, args.top))
    for w in res.best.warnings():
        print(f"warning: {w}")
    _emit_json(res.to_dict(args.top), args.json)
    return 0


def cmd_simulate_comms(args) -> int:
    W = args.workers
    topo = comms.Topology(p2p=args.p2p, link_bandwidth=args.link_bandwidth)
    rng = np.random.default_rng(args.seed)
    report = {"workers": W, "p2p": args.p2p}
    if args.deadlock:
        schedule = args.schedule or ["CKK", "KC"]
        cap = None if args.capacity <= 0 else args.capacity
        rep = comms.barrier_protocol(schedule, cap, barrier=args.barrier)
        report["deadlock"] = {"schedule": schedule, "capacity": cap, "barrier": args.barrier,
                              "deadlocked": rep.deadlock, "states_explored": rep.states_explored,
                              "witness": rep.witness}
        print(rep.summary())
    else:
        n = args.size // 4 // W * W  # f32 elements, divisible by W
        if n == 0:
            raise SystemExit("error: --size too small for the worker count")
        group = comms.WorkerGroup(W, topo, rng=rng)
        if args.collective == "reduce-scatter":
            chunks = [[rng.standard_normal(n // W).astype(np.float32) for _ in range(W)] for _ in range(W)]
            comms.reduce_scatter_copy(group, chunks, seed=args.seed)
        else:
            shards = [rng.standard_normal(n // W).astype(np.float32) for _ in range(W)]
            comms.all_gather_copy(group, shards)
        total = n * 4
        sent = group.trace.bytes_sent()
        report.update({
            "collective": args.collective,
            "bytes": total,
            "bytes_sent_per_worker": sent / W,
            "closed_form_per_worker": (W - 1) / W * total,
            "link_traversals": group.trace.link_traversals,
            "arith_ops": group.trace.arith_ops,
            "seconds_per_round": topo.copy_seconds(total // W),
        })
        print(f"{args.collective} W={W}: {sent / W:.0f} bytes sent per worker "
              f"(closed form {(W - 1) / W * total:.0f}), {group.trace.link_traversals} link traversals")
        if args.trace:
            group.trace.write_jsonl(args.trace)
    _emit_json(report, args.json)
    return 1 if args.deadlock and report["deadlock"]["deadlocked"] and args.fail_on_deadlock else 0


def cmd_report_flops(args) -> int:
    cfg = _model_arg(args.model)
    fb = memplan.flop_breakdown(cfg, args.precision, args.seq_len)
    out = {"model": args.model, "precision": args.precision, "seq_len": args.seq_len,
           "per_token": fb.to_dict()}
    print(f"{'class':<16} {'ops/token':>12}")
    for k, v in fb.to_dict().items():
        print(f"{k:<16} {v:>12.4g}")
    if args.hardware:
        hw = _profile(args.hardware)
        out["hardware"] = hw.name
        out["fp8_speedup_ceiling"] = memplan.fp8_speedup_ceiling(cfg, hw, args.seq_len)
        print(f"FP8 speed-up ceiling on {hw.name}: {out['fp8_speedup_ceiling']:.1%}")
        if args.tps:
            out["tps"] = args.tps
            out["mfu"] = memplan.mfu(args.tps, fb, args.precision, hw)
            print(f"MFU at {args.tps:.0f} tokens/s: {out['mfu']:.1%}")
    _emit_json(out, args.json)
    return 0


def cmd_report_memory(args) -> int:
    cfg = _model_arg(args.model)
    counts = memplan.ParamCounts.nominal(args.params) if args.params else None
    plan = memplan.RunPlan(args.micro_batch, 1, args.recompute, args.offload, args.shard_weights,
                           args.shard_grads, args.precision, args.moments, args.seq_len)
    mb = memplan.memory_breakdown(cfg, plan, args.workers, counts, tokens_in_flight=args.tokens_in_flight)
    print(f"{'category':<20} {'device GB':>10} {'host GB':>10}")
    for k in mb.device:
        print(f"{k:<20} {mb.device[k] / memplan.GB:>10.3f} {mb.host[k] / memplan.GB:>10.3f}")
    print(f"{'total':<20} {mb.device_total / memplan.GB:>10.3f} {mb.host_total / memplan.GB:>10.3f}")
    out = mb.to_dict()
    out["plan"] = plan.to_dict()
    if args.hardware:
        hw = _profile(args.hardware)
        ok = mb.device_total <= hw.device_bytes and mb.host_total <= hw.host_bytes
        out["feasible"] = ok
        print(f"fits on {hw.name}: {'yes' if ok else 'no'}")
    _emit_json(out, args.json)
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qtrain", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the toy model from a YAML manifest")
    p.add_argument("manifest")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--precision", choices=["bf16", "fp8", "fp8-e4m3", "fp8-e5m2", "f32"])
    p.add_argument("--out-dir", help="directory for outputs (default: next to the manifest)")
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("plan", help="search micro-batch/recompute/offload plans")
    p.add_argument("--model", required=True, help=f"one of {', '.join(memplan.ARCHS)} or a YAML file")
    p.add_argument("--hardware", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--batch-tokens", type=int, default=500_000)
    p.add_argument("--precision", default="fp8", choices=["fp8", "bf16"])
    p.add_argument("--moments", default="bf16", choices=["bf16", "f32"])
    p.add_argument("--seq-len", type=int, default=512)
    p.add_argument("--exhaustive", action="store_true")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--json", help="write JSON report here ('-' for stdout)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate-comms", help="run a simulated collective or the deadlock checker")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--size", type=int, default=1 << 20, help="total bytes of the reduced tensor")
    p.add_argument("--collective", choices=["reduce-scatter", "all-gather"], default="reduce-scatter")
    p.add_argument("--p2p", action="store_true")
    p.add_argument("--link-bandwidth", type=float, default=32e9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", help="write JSON-lines trace here")
    p.add_argument("--deadlock", action="store_true", help="run the issue-queue model checker instead")
    p.add_argument("--capacity", type=int, default=2, help="shared queue slots (<= 0: unbounded)")
    p.add_argument("--barrier", action="store_true", help="CPU-side barrier after each collective launch")
    p.add_argument("--schedule", nargs="+", help="per-worker op strings, e.g. CKK KC")
    p.add_argument("--fail-on-deadlock", action="store_true")
    p.add_argument("--json")
    p.set_defaults(func=cmd_simulate_comms)

    p = sub.add_parser("report-flops", help="per-token FLOPs, MFU and FP8 ceiling")
    p.add_argument("--model", required=True)
    p.add_argument("--precision", default="fp8", choices=["fp8", "bf16"])
    p.add_argument("--seq-len", type=int, default=512)
    p.add_argument("--hardware")
    p.add_argument("--tps", type=float)
    p.add_argument("--json")
    p.set_defaults(func=cmd_report_flops)

    p = sub.add_parser("report-memory", help="memory breakdown for one plan")
    p.add_argument("--model", required=True)
    p.add_argument("--micro-batch", type=int, default=1)
    p.add_argument("--recompute", default="")
    p.add_argument("--offload", default="")
    p.add_argument("--precision", default="fp8", choices=["fp8", "bf16"])
    p.add_argument("--moments", default="bf16", choices=["bf16", "f32"])
    p.add_argument("--seq-len", type=int, default=512)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--shard-weights", action="store_true")
    p.add_argument("--shard-grads", action="store_true")
    p.add_argument("--params", type=float, help="nominal parameter count override")
    p.add_argument("--tokens-in-flight", type=float, help="tokens whose residuals sit on the host")
    p.add_argument("--hardware")
    p.add_argument("--json")
    p.set_defaults(func=cmd_report_memory)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
