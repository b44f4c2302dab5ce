"""Toy training loop: synthetic corpus, gradient accumulation, AdamW, metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from .checkpoint import save_checkpoint
from .memplan import HardwareProfile, RunPlan, estimate_step_time, layer_sizes, memory_breakdown
from .model import GradBuffers, ModelConfig, PrecisionMap, backward, forward, init_params, parse_recompute
from .offload import TierBudget, parse_offload, plan_residency
from .optim import AdamWConfig, adamw_step, clip_grads, init_state

__all__ = ["SyntheticCorpus", "TrainConfig", "Trainer", "METRIC_FIELDS", "write_metrics_csv"]

METRIC_FIELDS = ("step", "tokens", "train_loss", "val_loss", "grad_norm", "simulated_time")


class SyntheticCorpus:
    """Memorizable sequences: a fixed random successor map over the vocabulary.

    Every sequence starts at a random token and then follows the map, so a
    model that has learned the map predicts every position after the first.
    """

    def __init__(self, vocab: int, seq_len: int, seed: int = 0):
        self.vocab, self.seq_len, self.seed = vocab, seq_len, seed
        self.successor = np.random.default_rng([seed, 0]).permutation(vocab)

    def batch(self, index: int, size: int, split: str = "train") -> np.ndarray:
        """Batch ``index`` of ``size`` sequences, each ``seq_len + 1`` tokens."""
        stream = 1 if split == "train" else 2
        rng = np.random.default_rng([self.seed, stream, index])
        out = np.empty((size, self.seq_len + 1), dtype=np.int64)
        out[:, 0] = rng.integers(0, self.vocab, size)
        for t in range(self.seq_len):
            out[:, t + 1] = self.successor[out[:, t]]
        return out


@dataclass
class TrainConfig:
    steps: int = 500
    micro_batch: int = 2
    ga_steps: int = 1
    lr: float = 3e-3
    warmup: int = 20
    weight_decay: float = 0.0
    max_grad_norm: float | None = 1.0
    precision: str = "bf16"
    recompute: str = ""
    offload: str = ""
    moments: str = "f32"
    seed: int = 1
    eval_every: int = 50
    ce_chunk: int | None = None
    attn_chunk: int | None = None

    def __post_init__(self):
        if self.steps < 1 or self.micro_batch < 1 or self.ga_steps < 1:
            raise ValueError("steps, micro_batch and ga_steps must be >= 1")
        PrecisionMap.parse(self.precision)
        parse_recompute(self.recompute)
        parse_offload(self.offload)


class Trainer:
    def __init__(self, cfg: ModelConfig, tc: TrainConfig, corpus: SyntheticCorpus | None = None,
                 hardware: HardwareProfile | None = None):
        self.cfg, self.tc = cfg, tc
        self.prec = PrecisionMap.parse(tc.precision)
        self.recompute = parse_recompute(tc.recompute)
        self.corpus = corpus or SyntheticCorpus(cfg.vocab, cfg.seq_len, seed=tc.seed)
        self.params = init_params(cfg, tc.seed, bf16=self.prec.bf16_storage)
        master = "bf16" if self.prec.bf16_storage else "f32"
        self.state = init_state(self.params, AdamWConfig(tc.lr, weight_decay=tc.weight_decay), tc.moments,
                                master, seed=tc.seed)
        self.grads = GradBuffers(self.params, self.prec, seed=tc.seed)
        self.hardware = hardware
        self.step = 0
        self.tokens = 0
        self.sim_time = 0.0
        self.rows: list = []

    def run_plan(self) -> RunPlan:
        tc = self.tc
        return RunPlan(tc.micro_batch, tc.ga_steps, self.recompute, tc.offload, precision=self.prec,
                       moments="f32" if tc.moments == "f32" else "bf16", seq_len=self.cfg.seq_len)

    def residency(self):
        """Simulated device residency of this run's plan (placement only, no numerics)."""
        hw = self.hardware
        plan = self.run_plan()
        sizes = layer_sizes(self.cfg, plan)
        budget = TierBudget.from_profile(hw) if hw else TierBudget(float("inf"), float("inf"))
        return plan_residency(sizes, plan.offload, budget, plan.ga_steps), memory_breakdown(self.cfg, plan)

    def _lr(self, step: int) -> float:
        return self.tc.lr * min(1.0, step / max(1, self.tc.warmup))

    def val_loss(self) -> float:
        batch = self.corpus.batch(0, self.tc.micro_batch, "val")
        loss, _ = forward(self.cfg, self.params, batch, frozenset(), self.prec, self.tc.attn_chunk,
                          self.tc.ce_chunk)
        return loss

    def train_step(self) -> dict:
        tc = self.tc
        self.step += 1
        self.grads.zero()
        n_tok = tc.micro_batch * self.cfg.seq_len
        normalizer = n_tok * tc.ga_steps
        loss = 0.0
        for micro in range(tc.ga_steps):
            batch = self.corpus.batch((self.step - 1) * tc.ga_steps + micro, tc.micro_batch)
            lv, saved = forward(self.cfg, self.params, batch, self.recompute, self.prec, tc.attn_chunk,
                                tc.ce_chunk, normalizer=normalizer)
            g = backward(saved, self.params)
            self.grads.accumulate(g, (self.step - 1) * tc.ga_steps + micro)
            loss += lv
        clipped, norm = clip_grads(self.grads.buffers, tc.max_grad_norm)
        self.state.hyper = AdamWConfig(self._lr(self.step), weight_decay=tc.weight_decay)
        self.params = adamw_step(self.state, clipped)
        self.tokens += n_tok * tc.ga_steps
        if self.hardware is not None:
            self.sim_time += estimate_step_time(self.cfg, self.run_plan(), self.hardware).total
        row = {"step": self.step, "tokens": self.tokens, "train_loss": float(loss), "val_loss": "",
               "grad_norm": float(norm), "simulated_time": self.sim_time}
        if tc.eval_every and (self.step % tc.eval_every == 0 or self.step == tc.steps):
            row["val_loss"] = self.val_loss()
        self.rows.append(row)
        return row

    def run(self, callback=None) -> list:
        while self.step < self.tc.steps:
            row = self.train_step()
            if callback is not None:
                callback(row)
        return self.rows

    def checkpoint_tensors(self) -> dict:
        out = {f"param.{k}": v for k, v in self.params.items()}
        for k in self.state.master:
            out[f"optim.m.{k}"] = self.state.m[k]
            out[f"optim.v.{k}"] = self.state.v[k]
        return out

    def save(self, path) -> None:
        meta = {"step": self.step, "tokens": self.tokens, "model": asdict(self.cfg), "train": asdict(self.tc)}
        save_checkpoint(path, self.checkpoint_tensors(), meta)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_metrics_csv(rows: list, fh=None) -> str:
    """Write rows with a fixed column order; floats use repr, so output is exact."""
    buf = fh or io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in METRIC_FIELDS])
    return buf.getvalue() if fh is None else ""
