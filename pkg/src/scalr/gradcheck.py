"""Finite-difference verification of the analytic inner-loop gradient."""
from dataclasses import dataclass, field

import numpy as np

from .gcm import FastWeights, inner_gradient

__all__ = ["BLOCKS", "GradcheckReport", "batched_loss", "numeric_gradient", "relative_error", "gradient_check"]

BLOCKS = ("w1", "w2", "w3")


def batched_loss(w1, w2, w3, k, v, eta):
    """Dot-product inner loss for one head, broadcasting over leading weight axes."""
    h1 = np.einsum("...jd,md->...mj", w1, k)
    h3 = np.einsum("...jd,md->...mj", w3, k)
    a = h1 / (1.0 + np.exp(-h1))
    y = np.einsum("...dj,...mj->...md", w2, a * h3)
    return -np.einsum("m,...md,md->...", eta, y, v)


def numeric_gradient(weights, k, v, eta, h=1e-5):
    """Central differences for each block, all entries of a block perturbed in one batch."""
    base = dict(w1=weights[0], w2=weights[1], w3=weights[2])
    out = {}
    for name in BLOCKS:
        w = base[name]
        eye = np.eye(w.size).reshape((w.size,) + w.shape)
        grads = []
        for sign in (1.0, -1.0):
            args = dict(base)
            args[name] = w[None] + sign * h * eye
            grads.append(batched_loss(args["w1"], args["w2"], args["w3"], k, v, eta))
        out[name] = ((grads[0] - grads[1]) / (2 * h)).reshape(w.shape)
    return out


def relative_error(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    denom = max(na, nb)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


@dataclass
class GradcheckReport:
    n_instances: int
    tol: float
    max_error: dict = field(default_factory=dict)
    failures: int = 0

    @property
    def passed(self):
        return self.failures == 0

    def lines(self):
        out = [f"{b} max_rel_err={self.max_error[b]:.3e}" for b in BLOCKS]
        verdict = "PASS" if self.passed else "FAIL"
        out.append(f"{verdict}: {self.n_instances} instances, tol={self.tol:g}, failures={self.failures}")
        return out


def _instance(rng, max_hd, max_k, max_m):
    hd = int(rng.integers(1, max_hd + 1))
    ex = int(rng.integers(1, max_k + 1))
    m = int(rng.integers(1, max_m + 1))
    w1 = rng.normal(0, 1 / np.sqrt(hd), (hd * ex, hd))
    w3 = rng.normal(0, 1 / np.sqrt(hd), (hd * ex, hd))
    w2 = rng.normal(0, 1 / np.sqrt(hd * ex), (hd, hd * ex))
    k = rng.normal(size=(m, hd))
    v = rng.normal(size=(m, hd))
    eta = rng.uniform(0.1, 1.0, m)
    return (w1, w2, w3), k, v, eta


def gradient_check(n_instances=200, max_hd=16, max_k=4, max_m=8, seed=0, tol=1e-6, perturb=None):
    """Compare analytic and numeric gradients over random instances.

    ``perturb`` names a block whose analytic gradient is deliberately scaled
    by ``1 + 1e-3``; it exists so callers can confirm that failures are caught.
    """
    rng = np.random.default_rng(seed)
    report = GradcheckReport(n_instances, tol, {b: 0.0 for b in BLOCKS})
    for _ in range(n_instances):
        ws, k, v, eta = _instance(rng, max_hd, max_k, max_m)
        fw = FastWeights(*(w[None] for w in ws))
        g = inner_gradient(fw, k, v, eta)
        analytic = {"w1": g.w1[0], "w2": g.w2[0], "w3": g.w3[0]}
        if perturb is not None:
            analytic[perturb] = analytic[perturb] * (1 + 1e-3)
        numeric = numeric_gradient(ws, k, v, eta)
        bad = False
        for b in BLOCKS:
            err = relative_error(analytic[b], numeric[b])
            report.max_error[b] = max(report.max_error[b], err)
            bad |= err >= tol
        report.failures += int(bad)
    return report
