"""Independent reference implementations shared by the test modules."""

import numpy as np

from qtrain.model import PrecisionMap, backward, forward, init_params

F32 = PrecisionMap.parse("f32")


def bf16_neighbours(x):
    """(toward-zero, away-from-zero) bf16 neighbours of a float32."""
    b = np.array([x], np.float32).view(np.uint32)[0] & 0xFFFF0000
    return np.array([b, b + 0x10000], np.uint32).view(np.float32)


def fd_max_rel_error(cfg, seed=0, eps=1e-6, floor=1e-3):
    """Worst relative error of analytic f32 gradients against central differences.

    Differences are taken on an f64 copy of the model, so the reference
    itself carries no f32 rounding noise. ``floor`` keeps near-zero
    gradients from inflating the ratio.
    """
    p32 = init_params(cfg, seed, bf16=False)
    p64 = {k: v.astype(np.float64) for k, v in p32.items()}
    tok = np.random.default_rng(seed + 1).integers(0, cfg.vocab, (2, cfg.seq_len + 1))
    _, saved = forward(cfg, p32, tok, prec=F32)
    g = backward(saved, p32)
    worst = 0.0
    for name, v in p64.items():
        flat = v.ravel()
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            lp, _ = forward(cfg, p64, tok, prec=F32)
            flat[i] = old - eps
            lm, _ = forward(cfg, p64, tok, prec=F32)
            flat[i] = old
            fd = (lp - lm) / (2 * eps)
            an = float(g[name].ravel()[i])
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), floor))
    return worst
