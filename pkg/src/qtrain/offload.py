"""Two-tier (device/host) placement with a double-buffered layer schedule.

The host tier is a bookkeeping construct: tensors never actually move, so the
numerical results of training are independent of placement by design. What
this module produces is the event schedule and the residency it implies.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass

__all__ = [
    "Offload",
    "parse_offload",
    "format_offload",
    "TransferPolicy",
    "TierBudget",
    "transfer_time",
    "DEFAULT_LATENCY",
    "ResidencyEvent",
    "ResidencyPlan",
    "LayerSizes",
    "plan_residency",
]

DEFAULT_LATENCY = 20e-6


class Offload(enum.Enum):
    X = "x"  # residual stream
    M = "m"
    V = "v"
    MASTER = "theta*"  # bf16 master parameters
    PARAMS = "theta"  # working (quantized) parameters
    GRADS = "g"


_OFFLOAD_ALIASES = {"θ": "theta", "θ*": "theta*", "master": "theta*", "params": "theta", "grads": "g",
                    "residual": "x", "residuals": "x"}
_OFFLOAD_ORDER = [Offload.X, Offload.M, Offload.V, Offload.GRADS, Offload.PARAMS, Offload.MASTER]


def parse_offload(spec) -> frozenset:
    """``"x, m, v, theta*"`` -> {X, M, V, MASTER}; empty, ``"---"`` or None -> empty set."""
    if spec is None:
        return frozenset()
    if isinstance(spec, (set, frozenset, list, tuple)):
        items = [s.value if isinstance(s, Offload) else str(s) for s in spec]
    else:
        items = str(spec).split(",")
    out = set()
    for item in items:
        item = item.strip().lower().replace("$", "").replace("\\", "")
        if item in ("", "---", "-", "none"):
            continue
        out.add(Offload(_OFFLOAD_ALIASES.get(item, item)))
    return frozenset(out)


def format_offload(s) -> str:
    items = [o.value for o in _OFFLOAD_ORDER if o in s]
    return ",".join(items) if items else "---"


class TransferPolicy(enum.Enum):
    ZERO_COPY = "zero_copy"
    DOUBLE_BUFFER = "double_buffer"


@dataclass(frozen=True)
class TierBudget:
    device_bytes: float
    host_bytes: float
    transfer_policy: TransferPolicy = TransferPolicy.DOUBLE_BUFFER
    zero_copy_efficiency: float = 1.0
    double_buffer_efficiency: float = 1.0

    @classmethod
    def from_profile(cls, hw, policy: TransferPolicy = TransferPolicy.DOUBLE_BUFFER) -> "TierBudget":
        return cls(hw.device_bytes, hw.host_bytes, policy, hw.zero_copy_efficiency, hw.double_buffer_efficiency)


def transfer_time(nbytes: float, budget: TierBudget, topology, latency: float = DEFAULT_LATENCY) -> float:
    """Seconds to move ``nbytes`` over ``topology.link_bandwidth`` under the budget's policy."""
    bw = topology.link_bandwidth
    if nbytes == 0:
        return latency
    if bw <= 0:
        return float("inf")
    if budget.transfer_policy is TransferPolicy.ZERO_COPY:
        eff = budget.zero_copy_efficiency
    else:
        eff = budget.double_buffer_efficiency
    return latency + nbytes / (bw * eff)


@dataclass(frozen=True)
class LayerSizes:
    """Per-layer byte sizes of the streamed tensor classes."""

    n_layers: int
    weights: float  # working weights of one block
    grads: float  # gradient buffer of one block
    residual: float  # residual stream of one block for the current micro-batch
    static_device: float = 0.0  # everything not streamed (from memory_breakdown)


@dataclass(frozen=True)
class ResidencyEvent:
    time: int  # logical step; compute of layer l in a pass happens at one tick
    stream: str  # "main" or "copy"
    op: str
    tensor: str
    layer: int
    buffer: str
    bytes: float


@dataclass
class ResidencyPlan:
    events: list
    high_water: dict  # category -> max resident bytes
    high_water_total: float
    max_buffers: dict  # category -> max simultaneously resident layer buffers
    feasible: bool
    device_bytes: float

    def to_jsonl(self, fh) -> None:
        for e in self.events:
            fh.write(json.dumps(asdict(e), sort_keys=True) + "\n")

    def transfer_events(self) -> list:
        return [e for e in self.events if e.stream == "copy"]


def plan_residency(sizes: LayerSizes, offload, budget: TierBudget, ga_steps: int = 1) -> ResidencyPlan:
    """Forward then backward over ``sizes.n_layers`` blocks, ``ga_steps`` times.

    Streamed classes live in two alternating buffers (A/B): the layer being
    computed and the one being transferred. Prefetches are issued one layer
    ahead, on the copy stream, while the previous layer computes.
    """
    offload = parse_offload(offload)
    L = sizes.n_layers
    events: list = []
    live: dict = {}  # (category, layer) -> bytes
    high = {"weights": 0.0, "grads": 0.0, "residual": 0.0}
    max_buf = {"weights": 0, "grads": 0, "residual": 0}
    peak_total = [0.0]
    t = [0]

    stream_w = Offload.PARAMS in offload
    stream_g = Offload.GRADS in offload
    stream_x = Offload.X in offload

    def track():
        for cat in high:
            cur = sum(b for (c, _), b in live.items() if c == cat)
            high[cat] = max(high[cat], cur)
            max_buf[cat] = max(max_buf[cat], sum(1 for (c, _) in live if c == cat))
        total = sizes.static_device + sum(live.values())
        peak_total[0] = max(peak_total[0], total)

    def emit(stream, op, tensor, layer, nbytes):
        buf = "AB"[layer % 2] if layer >= 0 else "-"
        events.append(ResidencyEvent(t[0], stream, op, tensor, layer, buf, nbytes))

    def load(cat, layer, nbytes, tensor):
        if (cat, layer) not in live:
            live[(cat, layer)] = nbytes
            emit("copy", "prefetch", tensor, layer, nbytes)
            track()

    def evict(cat, layer, tensor, write_back):
        if (cat, layer) in live:
            nbytes = live.pop((cat, layer))
            if write_back:
                emit("copy", "evict", tensor, layer, nbytes)

    # resident (non-streamed) classes count once, as a whole
    if not stream_w:
        for layer in range(L):
            live[("weights", layer)] = sizes.weights
    if not stream_g:
        for layer in range(L):
            live[("grads", layer)] = sizes.grads
    track()

    for _micro in range(ga_steps):
        # forward
        if stream_w:
            load("weights", 0, sizes.weights, "theta")
        for layer in range(L):
            if stream_w and layer + 1 < L:
                load("weights", layer + 1, sizes.weights, "theta")
            live[("residual", layer)] = sizes.residual
            track()
            emit("main", "forward", "block", layer, 0)
            t[0] += 1
            if stream_w and layer + 1 < L:
                evict("weights", layer, "theta", False)
            if stream_x:
                evict("residual", layer, "x", True)
        # backward
        for layer in reversed(range(L)):
            if stream_w:
                load("weights", layer, sizes.weights, "theta")
                if layer - 1 >= 0:
                    load("weights", layer - 1, sizes.weights, "theta")
            if stream_x:
                load("residual", layer, sizes.residual, "x")
                if layer - 1 >= 0:
                    load("residual", layer - 1, sizes.residual, "x")
            if stream_g:
                load("grads", layer, sizes.grads, "g")
                if layer - 1 >= 0:
                    load("grads", layer - 1, sizes.grads, "g")
            emit("main", "backward", "block", layer, 0)
            t[0] += 1
            evict("residual", layer, "x", False)
            if stream_w:
                evict("weights", layer, "theta", False)
            if stream_g:
                evict("grads", layer, "g", True)
        track()

    high_total = peak_total[0]
    return ResidencyPlan(events, high, high_total, max_buf, high_total <= budget.device_bytes,
                         budget.device_bytes)
