"""Independent reference computations shared by the unit and acceptance suites."""
import numpy as np
from scipy.special import log_softmax

from infcf import distill, infae
from infcf.distill import DistillConfig, SupportPrior
from infcf.kernel import KernelConfig


def gradient_instance(seed):
    """Random small distillation problem: (prior, batch, cfg, lam, lambda2)."""
    rng = np.random.default_rng(seed)
    mu = int(rng.integers(2, 11))
    n_items = int(rng.integers(5, 21))
    b = int(rng.integers(1, 9))
    cfg = DistillConfig(
        mu=mu, gamma=int(rng.integers(1, 4)), tau=float(rng.choice([0.3, 0.5, 1.0])),
        depth=int(rng.integers(1, 3)), seed=seed,
    )
    prior = SupportPrior(rng.normal(scale=1.5, size=(mu, n_items)))
    batch = (rng.random((b, n_items)) < 0.3).astype(float)
    batch[:, rng.integers(n_items)] = 1.0
    lam = float(rng.choice([0.1, 1.0, 5.0]))
    lambda2 = float(rng.choice([0.0, 1e-3]))
    return prior, batch, cfg, lam, lambda2


def central_difference(prior, batch, cfg, lam, lambda2, key=("fd",), h=1e-5):
    """Central differences of the distill loss w.r.t. every logit, noise frozen by ``key``."""
    grad = np.zeros_like(prior.logits)
    for idx in np.ndindex(prior.logits.shape):
        vals = []
        for sign in (1, -1):
            p = prior.copy()
            p.logits[idx] += sign * h
            vals.append(distill.distill_loss_and_grad(p, batch, cfg, cfg.seed, key, lam, lambda2, with_grad=False)[0])
        grad[idx] = (vals[0] - vals[1]) / (2 * h)
    return grad


def relative_error(analytic, reference):
    return float(np.max(np.abs(analytic - reference)) / max(np.max(np.abs(reference)), 1e-300))


def reconstruction_loss(support, batch, lam, depth=1, eps=distill.LOG_EPS):
    """BCE of the infae model fitted on ``support`` when reconstructing ``batch``."""
    dp = infae.fit(np.asarray(support), lam, KernelConfig(depth))
    logp = infae.predict_log_proba(dp, np.asarray(batch))
    p = np.exp(logp)
    pos = np.maximum(logp, np.log(eps))
    neg = np.log(np.maximum(1 - p, eps))
    return float(-(batch * pos + (1 - batch) * neg).sum(axis=1).mean())


def relaxed_replay(prior, cfg, key):
    """Relaxed sums rebuilt from the per-draw Gumbel noise with a plain numpy softmax."""
    _, rec = distill.gumbel_sample_summary(prior, cfg.tau, cfg.gamma, cfg.seed, key)
    logp = log_softmax(prior.logits, axis=1)
    total = np.zeros_like(logp)
    for k in range(cfg.gamma):
        z = (logp + rec.noise(k)) / cfg.tau
        z = np.exp(z - z.max(axis=1, keepdims=True))
        total += z / z.sum(axis=1, keepdims=True)
    return total, rec
