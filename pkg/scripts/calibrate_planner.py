"""Check the planner's memory model against the published configuration table.

Prints one line per fixture and, with --sweep, scans the reserve constant for
values that satisfy every fixture.
"""

import argparse
import csv
from dataclasses import replace
from pathlib import Path

from qtrain.memplan import CONSTANTS, GB, RunPlan, arch, load_profile, max_micro_batch, plan_feasible
from qtrain.offload import parse_offload

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "planner_configs.csv"


def load_fixtures(path=FIXTURES):
    """Rows of (gpu, size, precision, micro-batch, recompute, offload); '---' means none."""
    with open(path, newline="") as fh:
        return [(r["gpu"], r["size"], r["precision"], int(r["micro_batch"]),
                 "" if r["recompute"] == "---" else r["recompute"],
                 "" if r["offload"] == "---" else r["offload"]) for r in csv.DictReader(fh)]


FIXTURE_ROWS = load_fixtures()


def check(constants, verbose=True):
    ok_all = True
    for gpu, size, dt, mb, rc, off in FIXTURE_ROWS:
        hw = load_profile(gpu)
        plan = RunPlan(mb, 1, rc, off, precision=dt)
        ok, mem = plan_feasible(arch(size), plan, hw, constants=constants)
        empty_ok, _ = plan_feasible(arch(size), RunPlan(mb, 1, "", "", precision=dt), hw, constants=constants)
        needs = bool(rc or off)
        good = ok and (empty_ok != needs)
        ok_all &= good
        if verbose:
            print(f"{'ok ' if good else 'BAD'} {gpu:6s} {size:4s} {dt:4s} mb={mb:2d} {rc or '---':14s} "
                  f"{off or '---':22s} dev={mem.device_total / GB:6.2f} GB  empty-plan feasible={empty_ok}")
    # 7B FP8 on 16 GB needs every offload class and Block recompute at its batch size
    hw = load_profile("5060Ti")
    full = parse_offload("x,m,v,g,theta,theta*")
    for o in full:
        p = RunPlan(32, 1, "block", full - {o}, precision="fp8")
        bad = plan_feasible(arch("7B"), p, hw, constants=constants)[0]
        ok_all &= not bad
        if verbose and bad:
            print("BAD 7B fp8 feasible without", o)
    for rc in ["qkv,ffn", "ffn,attention", "swiglu", ""]:
        p = RunPlan(32, 1, rc, full, precision="fp8")
        bad = plan_feasible(arch("7B"), p, hw, constants=constants)[0]
        ok_all &= not bad
        if verbose and bad:
            print("BAD 7B fp8 feasible with recompute", rc)
    # 3B narrative: no chunking, block recompute, m/v/master offloaded -> 8; + residuals -> 10
    base = RunPlan(1, 1, "block", "m,v,theta*", precision="fp8", chunk_logits=False, chunk_attention=False)
    b0 = max_micro_batch(arch("3B"), base, hw, constants=constants)
    b1 = max_micro_batch(arch("3B"), replace(base, offload=parse_offload("x,m,v,theta*")), hw, constants=constants)
    b2 = max_micro_batch(arch("3B"), replace(base, offload=parse_offload("x,m,v,theta*"), chunk_logits=True,
                                             chunk_attention=True), hw, constants=constants)
    ok_all &= (b0, b1) == (8, 10)
    if verbose:
        print(f"3B max batch: {b0} -> {b1} with x offload, {b2} with chunking")
    # 32B on 4x24 GB
    hw4 = load_profile("4090")
    c32 = arch("32B")
    no = plan_feasible(c32, RunPlan(1, 1, "", "", precision="bf16"), hw4, W=4, constants=constants)[0]
    yes = plan_feasible(c32, RunPlan(4, 1, "block", "x,m,v,g,theta", True, True, precision="bf16"), hw4, W=4,
                        constants=constants)[0]
    ok_all &= (not no) and yes
    if verbose:
        print(f"32B on 4x4090: unsharded feasible={no}, sharded+offloaded feasible={yes}")
    return ok_all


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sweep", action="store_true")
    args = ap.parse_args()
    if args.sweep:
        for r in [x * 0.05e9 for x in range(0, 61)]:
            for lc in [256, 512, 1024, 2048]:
                c = replace(CONSTANTS, reserve_bytes=r, logit_chunk_tokens=lc)
                if check(c, verbose=False):
                    print(f"reserve={r / GB:.2f} GB logit_chunk={lc}: all fixtures pass")
    else:
        print("all fixtures pass" if check(CONSTANTS) else "FIXTURE MISMATCH")


if __name__ == "__main__":
    main()
