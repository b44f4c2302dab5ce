"""Simulated multi-worker runtime over one shared address space.

Workers are generator functions. Each ``yield`` is a barrier: no worker
resumes until every worker has reached it. Two executors run the same
programs:

* ``lockstep``: single thread; within each phase the workers are stepped in a
  (optionally shuffled) order. Used for exhaustive/random interleaving tests.
* ``threads``: one OS thread per worker, ``threading.Barrier`` at each yield.

Collectives are built from copies only, the way copy engines would run them.
All arithmetic is confined to well-defined phases and counted, so tests can
prove the copy rounds do no math.
"""

from __future__ import annotations

import json
import threading
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import RngKey, ScaledQuant, dequantize, stochastic_round_bf16, stream_id

__all__ = [
    "Topology",
    "TraceEvent",
    "Trace",
    "WorkerGroup",
    "GatheredQuant",
    "all_gather_copy",
    "reduce_scatter_copy",
    "reduce_scatter_oracle",
    "HostWeightCache",
    "host_weight_cache",
    "CommVolume",
    "comm_volume",
    "DeadlockReport",
    "barrier_protocol",
]


@dataclass(frozen=True)
class Topology:
    p2p: bool = False
    link_bandwidth: float = 64e9  # bytes/s
    copy_engines: int = 1

    @property
    def traversals_per_copy(self) -> int:
        # without peer access every copy bounces through host memory
        return 1 if self.p2p else 2

    def copy_seconds(self, nbytes: int) -> float:
        return self.traversals_per_copy * nbytes / self.link_bandwidth


@dataclass(frozen=True)
class TraceEvent:
    time: float
    worker: int
    stream: str
    op: str
    bytes: int


class Trace:
    """Protocol trace plus instrumentation counters. Thread-safe."""

    def __init__(self):
        self.events: list = []
        self.arith_ops: dict = {}
        self.link_traversals = 0
        self.free_slots: list = []  # (round, worker, free slot count)
        self._lock = threading.Lock()

    def add(self, event: TraceEvent) -> None:
        with self._lock:
            self.events.append(event)

    def count_arith(self, phase: str, n: int) -> None:
        with self._lock:
            self.arith_ops[phase] = self.arith_ops.get(phase, 0) + int(n)

    def count_link(self, n: int) -> None:
        with self._lock:
            self.link_traversals += n

    def note_free(self, rnd: int, worker: int, n_free: int) -> None:
        with self._lock:
            self.free_slots.append((rnd, worker, n_free))

    def sorted_events(self) -> list:
        return sorted(self.events, key=lambda e: (e.time, e.worker, e.stream, e.op))

    def bytes_sent(self, op_prefix: str = "") -> int:
        return sum(e.bytes for e in self.events if e.stream == "copy" and e.op.startswith(op_prefix))

    def to_jsonl(self, fh) -> None:
        for e in self.sorted_events():
            fh.write(json.dumps(asdict(e), sort_keys=True) + "\n")

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            self.to_jsonl(fh)


class WorkerGroup:
    """W simulated workers sharing one address space."""

    def __init__(self, W: int, topology: Topology | None = None, mode: str = "lockstep", rng=None):
        if W < 1:
            raise ValueError("W must be >= 1")
        if mode not in ("lockstep", "threads"):
            raise ValueError(f"unknown executor mode {mode!r}")
        self.W = W
        self.topology = topology or Topology()
        self.mode = mode
        self.rng = rng  # shuffles lockstep order when set
        self.trace = Trace()
        self.buffers: list = [dict() for _ in range(W)]

    def run(self, program) -> list:
        """Run ``program(worker_id)`` (a generator function) on every worker.

        Returns the per-worker return values.
        """
        if self.mode == "threads":
            return self._run_threads(program)
        return self._run_lockstep(program)

    def _run_lockstep(self, program) -> list:
        gens = [program(i) for i in range(self.W)]
        results = [None] * self.W
        active = list(range(self.W))
        while active:
            order = list(active)
            if self.rng is not None:
                self.rng.shuffle(order)
            finished = []
            for i in order:
                try:
                    next(gens[i])
                except StopIteration as stop:
                    results[i] = stop.value
                    finished.append(i)
            if finished and len(finished) != len(active):
                raise RuntimeError("workers disagree on the number of barriers")
            active = [i for i in active if i not in finished]
        return results

    def _run_threads(self, program) -> list:
        barrier = threading.Barrier(self.W)
        results = [None] * self.W
        errors = []

        def body(i):
            try:
                gen = program(i)
                while True:
                    try:
                        next(gen)
                    except StopIteration as stop:
                        results[i] = stop.value
                        return
                    barrier.wait()
            except threading.BrokenBarrierError:
                pass
            except BaseException as exc:  # surfaced in the caller
                errors.append(exc)
                barrier.abort()

        threads = [threading.Thread(target=body, args=(i,)) for i in range(self.W)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
        return results


def _copy(group: WorkerGroup, dst: np.ndarray, src: np.ndarray, worker: int, rnd: int, op: str) -> None:
    np.copyto(dst, src)
    group.trace.count_link(group.topology.traversals_per_copy)
    t = rnd * group.topology.copy_seconds(src.nbytes)
    group.trace.add(TraceEvent(t, worker, "copy", op, int(src.nbytes)))


@dataclass(frozen=True)
class GatheredQuant:
    """Concatenated FP8 codes with one scale per source shard."""

    codes: np.ndarray
    scales: np.ndarray
    kind: object
    shard_len: int

    def dequantize(self) -> np.ndarray:
        parts = [ScaledQuant(self.codes[i * self.shard_len:(i + 1) * self.shard_len], self.kind,
                             np.float32(s), np.float32(0)) for i, s in enumerate(self.scales)]
        return np.concatenate([dequantize(p) for p in parts])


def all_gather_copy(group: WorkerGroup, shards: list) -> list:
    """Every worker ends with the concatenation of all shards in shard order.

    ``shards`` holds 1-D arrays or ``ScaledQuant`` objects (gathered as raw
    codes plus per-shard scales). Only copies happen.
    """
    W = group.W
    if len(shards) != W:
        raise ValueError(f"expected {W} shards, got {len(shards)}")
    quant = isinstance(shards[0], ScaledQuant)
    raw = [np.ravel(s.codes if quant else s) for s in shards]
    n = raw[0].size
    if any(r.size != n or r.dtype != raw[0].dtype for r in raw):
        raise ValueError("all shards must have the same size and dtype")
    outs = [np.empty(W * n, dtype=raw[0].dtype) for _ in range(W)]
    scales = [np.empty(W, dtype=np.float32) for _ in range(W)] if quant else None

    def program(i):
        for r in range(W):
            src = (i + r) % W
            if r == 0:
                np.copyto(outs[i][src * n:(src + 1) * n], raw[src])
            else:
                _copy(group, outs[i][src * n:(src + 1) * n], raw[src], i, r, "all_gather")
            if quant:
                scales[i][src] = shards[src].scale
            yield

    group.run(program)
    if quant:
        return [GatheredQuant(outs[i], scales[i], shards[0].kind, n) for i in range(W)]
    return outs


def _sr_key(seed: int, step: int, layer: int, src: int) -> RngKey:
    return RngKey(seed, stream_id("reduce_scatter", step, layer, src), 0)


def _sr_add(acc: np.ndarray, x: np.ndarray, bf16: bool, key: RngKey) -> np.ndarray:
    total = acc + x
    return stochastic_round_bf16(total, key) if bf16 else total


def reduce_scatter_copy(group: WorkerGroup, chunks: list, seed: int = 0, step: int = 0, layer: int = 0,
                        bf16: bool = True) -> list:
    """Three-phase copy-based reduce-scatter.

    ``chunks[i][j]`` is chunk ``j`` held by worker ``i``. Worker ``i`` ends with
    ``G_i^i + sum_{j != i, ascending} G_i^j``, each addition stochastically
    rounded to bf16 with a key from (seed, step, layer, source, index).

    1. local aggregation: the own chunk goes into the accumulator, freeing slot i
    2. W-1 copy rounds: in round r worker i pulls chunk i from worker
       (i - r) mod W into its free slot, and its own slot (i + r) mod W becomes
       free once the peer has pulled from it
    3. final reduction of the received chunks in ascending source order
    """
    W = group.W
    if len(chunks) != W or any(len(c) != W for c in chunks):
        raise ValueError(f"each of the {W} workers must hold exactly {W} chunks")
    shape = np.shape(chunks[0][0])
    if any(np.shape(c) != shape for row in chunks for c in row):
        raise ValueError("all chunks must have the same shape")
    slots = [[np.array(c, dtype=np.float32, copy=True) for c in row] for row in chunks]
    free = [set() for _ in range(W)]
    source_of = [dict() for _ in range(W)]  # slot -> source worker of the data there
    acc = [None] * W

    def program(i):
        # phase 1
        acc[i] = slots[i][i] + np.float32(0)
        group.trace.count_arith("phase1", slots[i][i].size)
        free[i].add(i)
        group.trace.add(TraceEvent(0.0, i, "main", "rs_local_add", 0))
        yield
        group.trace.note_free(0, i, len(free[i]))
        # phase 2: copies only
        for r in range(1, W):
            src = (i - r) % W
            dst_slot = (i + r - 1) % W
            assert dst_slot in free[i], "destination slot still in use"
            _copy(group, slots[i][dst_slot], slots[src][i], i, r, "reduce_scatter")
            free[i].discard(dst_slot)
            source_of[i][dst_slot] = src
            yield
            # the peer (i + r) has now pulled our slot (i + r)
            free[i].add((i + r) % W)
            group.trace.note_free(r, i, len(free[i]))
            yield
        # phase 3
        received = sorted((s, slot) for slot, s in source_of[i].items())
        out = acc[i]
        for src, slot in received:
            out = _sr_add(out, slots[i][slot], bf16, _sr_key(seed, step, layer, src))
            group.trace.count_arith("phase3", out.size)
        group.trace.add(TraceEvent(float(W), i, "main", "rs_final_reduce", 0))
        return out

    out = group.run(program)
    group.trace.count_arith("phase2", 0)
    return out


def reduce_scatter_oracle(chunks: list, seed: int = 0, step: int = 0, layer: int = 0, bf16: bool = True) -> list:
    """Direct per-shard summation in the documented order and rounding."""
    W = len(chunks)
    out = []
    for i in range(W):
        acc = np.asarray(chunks[i][i], dtype=np.float32) + np.float32(0)
        for j in range(W):
            if j != i:
                acc = _sr_add(acc, np.asarray(chunks[j][i], dtype=np.float32), bf16, _sr_key(seed, step, layer, j))
        out.append(acc)
    return out


class HostWeightCache:
    """Weights published to host once per optimizer step, then read from there."""

    def __init__(self, W: int):
        self.W = W
        self.version: int | None = None
        self.events: list = []

    def publish(self, step: int, nbytes: int) -> None:
        self.version = step
        self.events.append(("publish", step, nbytes))

    def read(self, step: int, what: str) -> None:
        if self.version != step:
            raise RuntimeError(f"host weight cache read at step {step} before publish")
        self.events.append(("cache_read", step, what))


def weight_bytes(n_params: int, fp8: bool, n_tensors: int = 1) -> int:
    """FP8 weights: one byte per parameter plus an f32 scale per tensor; BF16: two bytes."""
    return n_params + 4 * n_tensors if fp8 else 2 * n_params


def host_weight_cache(W: int, ga_steps: int, n_params: int, fp8: bool, n_tensors: int = 1,
                      n_steps: int = 1) -> dict:
    """Replay the weight access pattern of ``n_steps`` optimizer steps.

    The first forward after each optimizer step gathers the weights and
    publishes them to the host; every later forward/backward of the same
    accumulation window is served from the cache. Traffic counts
    device-to-host sends.
    """
    if ga_steps < 1 or n_steps < 1:
        raise ValueError("ga_steps and n_steps must be >= 1")
    cache = HostWeightCache(W)
    per_pass = []
    for step in range(n_steps):
        for micro in range(ga_steps):
            for direction in ("fwd", "bwd"):
                if micro == 0 and direction == "fwd":
                    nbytes = weight_bytes(n_params, fp8, n_tensors)
                    cache.publish(step, nbytes)
                    per_pass.append(nbytes)
                else:
                    cache.read(step, f"{direction}{micro}")
                    per_pass.append(0)
    publishes = [e for e in cache.events if e[0] == "publish"]
    return {
        "events": list(cache.events),
        "publishes": len(publishes),
        "cache_served_passes": len(cache.events) - len(publishes),
        "weight_bytes_per_step": sum(e[2] for e in publishes) / n_steps,
        "per_pass_bytes": per_pass,
    }


@dataclass(frozen=True)
class CommVolume:
    weights: float
    grads: float
    link_traversal_factor: int

    @property
    def total(self) -> float:
        return self.weights + self.grads

    @property
    def link_bytes(self) -> float:
        return self.total * self.link_traversal_factor


def comm_volume(n_params: int, W: int, ga_steps: int, shard_weights: bool, shard_grads: bool,
                fp8: bool = True, p2p: bool = False, host_cache: bool = True) -> CommVolume:
    """Bytes sent per worker per optimizer step.

    * weights: with sharded weights and the host cache, each worker publishes
      its shard once; without the cache every forward and backward pass
      re-gathers. Unsharded weights need one all-gather after the step.
    * grads: sharded gradients are reduce-scattered after every micro-step;
      replicated gradients accumulate locally and are reduce-scattered once.
    """
    if W < 1 or ga_steps < 1:
        raise ValueError("W and ga_steps must be >= 1")
    wb = 1 if fp8 else 2
    frac = (W - 1) / W
    if shard_weights:
        weights = n_params / W * wb if host_cache else 2 * ga_steps * frac * n_params * wb
    else:
        weights = frac * n_params * wb
    grads = (ga_steps if shard_grads else 1) * frac * n_params * 2
    return CommVolume(weights, grads, 1 if p2p else 2)


# --------------------------------------------------------------------------
# issue-queue deadlock model


@dataclass
class DeadlockReport:
    deadlock: bool
    states_explored: int
    witness: list = field(default_factory=list)  # transitions leading to the stuck state
    stuck_state: object = None

    def summary(self) -> str:
        if not self.deadlock:
            return f"no deadlock ({self.states_explored} states explored)"
        return f"deadlock after {len(self.witness)} transitions: " + " -> ".join(self.witness)


def _parse_programs(schedule) -> list:
    progs = []
    for prog in schedule:
        ops = list(prog) if not isinstance(prog, str) else [c for c in prog.upper() if c not in " ,"]
        if any(op not in ("C", "K") for op in ops):
            raise ValueError("programs consist of 'C' (collective) and 'K' (kernel) ops")
        progs.append(tuple(ops))
    return progs


def barrier_protocol(schedule, capacity: int | None = 2, barrier: bool = False,
                     max_states: int = 2_000_000) -> DeadlockReport:
    """Exhaustively explore every interleaving of a launch schedule.

    Model (a hypothesis, not a confirmed mechanism): all workers of a process
    share a pool of ``capacity`` pending-operation slots. A worker's launch
    blocks while the pool is full. Each worker's ops execute in order; a
    kernel at the head of its stream completes, a collective completes only
    when it is at the head of every worker's stream. With ``barrier`` each
    worker's CPU thread waits after launching a collective until all workers
    have launched it.

    ``schedule`` is one sequence of 'C'/'K' per worker; the n-th 'C' of every
    worker is the same collective.
    """
    progs = _parse_programs(schedule)
    W = len(progs)
    n_coll = [p.count("C") for p in progs]
    if len(set(n_coll)) > 1:
        raise ValueError("every worker must launch the same number of collectives")
    cap = float("inf") if capacity is None else capacity

    def coll_index(w, pc):
        return progs[w][:pc].count("C")

    # state: (pcs, queues) where queues hold (op, collective index or -1)
    start = (tuple([0] * W), tuple(() for _ in range(W)))
    seen = {start: None}
    frontier = deque([start])
    while frontier:
        state = frontier.popleft()
        pcs, queues = state
        succ = []
        pending = sum(len(q) for q in queues)
        for w in range(W):
            pc = pcs[w]
            if pc >= len(progs[w]) or pending >= cap:
                continue
            if barrier and pc > 0 and progs[w][pc - 1] == "C":
                c = coll_index(w, pc) - 1
                # everyone must have launched collective c
                if any(coll_index(v, pcs[v]) <= c for v in range(W)):
                    continue
            op = progs[w][pc]
            tag = coll_index(w, pc) if op == "C" else -1
            new_pcs = pcs[:w] + (pc + 1,) + pcs[w + 1:]
            new_q = queues[:w] + (queues[w] + ((op, tag),),) + queues[w + 1:]
            succ.append((f"w{w}:launch {op}", (new_pcs, new_q)))
        for w in range(W):
            if queues[w] and queues[w][0][0] == "K":
                new_q = queues[:w] + (queues[w][1:],) + queues[w + 1:]
                succ.append((f"w{w}:run K", (pcs, new_q)))
        heads = [q[0] if q else None for q in queues]
        if all(h is not None and h[0] == "C" for h in heads) and len({h[1] for h in heads}) == 1:
            succ.append(("all:run C", (pcs, tuple(q[1:] for q in queues))))
        done = all(pcs[w] == len(progs[w]) for w in range(W)) and pending == 0
        if not succ and not done:
            witness = []
            s = state
            while seen[s] is not None:
                label, s = seen[s]
                witness.append(label)
            return DeadlockReport(True, len(seen), witness[::-1], state)
        for label, nxt in succ:
            if nxt not in seen:
                seen[nxt] = (label, state)
                if len(seen) > max_states:
                    raise RuntimeError("state space too large for exhaustive search")
                frontier.append(nxt)
    return DeadlockReport(False, len(seen))
