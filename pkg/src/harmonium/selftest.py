"""Invariant and gradient checks for the GIFT machinery, runnable without pytest."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import gift, tape


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _relation_sums(rng):
    worst = 0.0
    for _ in range(1000):
        c, h, w = rng.integers(1, 6), rng.integers(1, 7), rng.integers(1, 7)
        f = rng.normal(scale=rng.uniform(0.1, 20.0), size=(1, c, h, w))
        m = rng.random((h, w)) < 0.4
        m.flat[rng.integers(m.size)] = True
        r = gift.relation_map(f, m, gamma=rng.uniform(1e-3, 1.0)).data
        worst = max(worst, abs(r.sum() - 1.0))
    return worst <= 1e-6, f"max |sum - 1| = {worst:.2e} over 1000 maps"


def _relation_flat(rng):
    f = rng.normal(scale=5.0, size=(1, 4, 6, 6))
    m = np.zeros((6, 6), dtype=bool)
    m[1:3, 2:5] = True
    r = gift.relation_map(f, m, gamma=1e-12).data
    err = float(np.abs(r - 1.0 / 36).max())
    return err <= 1e-9, f"max deviation from uniform = {err:.2e}"


def _relation_two_pixel(_rng):
    # foreground = pixel 0, so distances are 0 and 1
    f = np.array([[[[0.0, 1.0]]]])
    m = np.array([[True, False]])
    r = gift.relation_map(f, m, gamma=0.01).data.ravel()
    expected = np.array([1.0, np.exp(-0.01)]) / (1.0 + np.exp(-0.01))
    err = float(np.abs(r - expected).max())
    ok = err <= 1e-4 and abs(r[0] - 0.5025) <= 1e-4 and abs(r[1] - 0.4975) <= 1e-4
    return ok, f"R = ({r[0]:.6f}, {r[1]:.6f})"


def _demod_norm(rng):
    eps = 1e-8
    worst = 0.0
    for _ in range(50):
        w = rng.normal(size=(rng.integers(1, 9), rng.integers(1, 9), 3, 3))
        w2 = gift.demodulate(w, eps).data
        ss = (w**2).sum(axis=(1, 2, 3))
        keep = ss >= 0.01
        got = (w2**2).sum(axis=(1, 2, 3))
        worst = max(worst, float(np.abs(got - ss / (ss + eps))[keep].max(initial=0.0)))
    return worst <= 1e-6, f"max |sum W''^2 - S/(S+eps)| = {worst:.2e}"


def _demod_scale(rng):
    worst = 0.0
    for _ in range(20):
        w = rng.normal(size=(6, 5, 3, 3))
        s = rng.uniform(0.2, 2.0, 5)
        base = gift.demodulate(gift.modulate(w, s)).data
        for c in (0.5, 2.0, 10.0):
            worst = max(worst, float(np.abs(gift.demodulate(gift.modulate(w, c * s)).data - base).max()))
    return worst <= 1e-6, f"max change under s -> c*s = {worst:.2e}"


def _gift_background(rng):
    f = rng.normal(size=(2, 5, 8, 8))
    m = rng.random((2, 8, 8)) < 0.5
    w2 = gift.demodulate(rng.normal(size=(5, 5, 3, 3))).data
    out = gift.gift_apply(f, m, w2).data
    same = bool(np.array_equal(out.transpose(0, 2, 3, 1)[~m], f.transpose(0, 2, 3, 1)[~m]))
    return same, "background bit-identical" if same else "background changed"


def _fused_matches_explicit(rng):
    f = rng.normal(size=(3, 4, 8, 8))
    m = rng.random((3, 8, 8)) < 0.5
    w = rng.normal(size=(4, 4, 3, 3))
    s = rng.uniform(0.3, 2.0, (3, 4))
    fused = gift.modulated_gift(f, m, w, s).data
    explicit = np.concatenate([
        gift.gift_apply(f[i:i + 1], m[i], gift.demodulate(gift.modulate(w, s[i])).data).data for i in range(3)
    ])
    err = float(np.abs(fused - explicit).max())
    return err <= 1e-10, f"max |fused - explicit| = {err:.2e}"


def _zero_distill(rng):
    cfg = gift.GiftConfig(sites=("D2", "D3"), seed=int(rng.integers(1 << 31)))
    net = gift.GiftNetwork(cfg)
    shared = gift.GiftNetwork(gift.reconstruction_config(cfg),
                              {k: v for k, v in net.params.items() if not k.startswith(("gift.", "mlp."))})
    data = gift.synthetic_pairs(2, 8, int(rng.integers(1 << 31)))
    rel = shared.relations(data.reals, data.masks)
    terms = net.loss(data.reals, data.masks, data.reals, rel)
    vals = [float(np.max(d.data)) for d in terms.distill]
    return all(v == 0.0 for v in vals), f"L_dis per level = {vals}"


def gradient_check(seed: int = 0, widths=(8, 16, 32, 64), tol: float = 1e-4):
    cfg = gift.GiftConfig(widths=widths, seed=seed)
    data = gift.synthetic_pairs(1, 8, seed + 3)
    net = gift.GiftNetwork(cfg)
    recon = gift.GiftNetwork(gift.reconstruction_config(cfg))
    rel = recon.relations(data.reals, data.masks)
    report, _, _ = gift.check_gradients(net, data.composites, data.masks, data.reals, rel)
    return report.passed(tol), (f"{report.n_checked} parameters, max relative error "
                                f"{report.max_error:.2e} ({report.worst})")


CHECKS = {
    "relation-map-normalized": _relation_sums,
    "relation-map-flat-limit": _relation_flat,
    "relation-map-two-pixel": _relation_two_pixel,
    "demodulation-norm": _demod_norm,
    "demodulation-scale-invariance": _demod_scale,
    "gift-background-identity": _gift_background,
    "gift-fused-equals-explicit": _fused_matches_explicit,
    "distillation-zero-shared-branches": _zero_distill,
}


def run(seed: int = 0, quick: bool = False) -> list[CheckResult]:
    """Run every invariant check, then the finite-difference gradient check.

    ``quick`` checks gradients on a narrower network (widths 2-4-4-8) instead
    of the full toy configuration.
    """
    results = []
    for name, fn in CHECKS.items():
        rng = np.random.default_rng(seed)
        t0 = time.perf_counter()
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # report, don't abort the suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    t0 = time.perf_counter()
    widths = (2, 4, 4, 8) if quick else (8, 16, 32, 64)
    try:
        ok, detail = gradient_check(seed, widths)
    except Exception as exc:
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    results.append(CheckResult("gradient-check", bool(ok), detail, time.perf_counter() - t0))
    return results


__all__ = ["CheckResult", "CHECKS", "gradient_check", "run", "tape"]
