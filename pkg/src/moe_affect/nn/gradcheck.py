from dataclasses import dataclass, field

import numpy as np


class NondeterministicError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    tol: float
    worst: str = ""
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.max_rel_error < self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel={self.max_rel_error:.3e} max_abs={self.max_abs_error:.3e} "
                f"coords={self.n_checked} tol={self.tol:g} worst={self.worst}")


def relative_error(analytic, numeric, floor=1e-3):
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(loss_and_grad, store, eps=1e-4, tol=1e-6, max_coords=None, seed=0,
               analytic_store=None, floor=1e-3):
    """Compare analytic gradients with central differences.

    ``loss_and_grad(store)`` must return the scalar loss and leave gradients in
    ``store.grads``. Finite differences are always taken on a float64 copy of
    the parameters; pass ``analytic_store`` (e.g. a float32 copy) to check
    gradients computed at a lower precision against the float64 reference.
    ``max_coords`` subsamples coordinates per parameter (at least 200 overall
    are kept whenever that many exist).
    """
    ref = store.copy(np.float64)
    target = ref if analytic_store is None else analytic_store

    target.zero_grad()
    loss_a = loss_and_grad(target)
    target.zero_grad()
    loss_b = loss_and_grad(target)
    if not np.array_equal(np.asarray(loss_a), np.asarray(loss_b)):
        raise NondeterministicError(f"loss changed between identical evaluations: {loss_a!r} vs {loss_b!r}")
    analytic = {k: np.array(g, dtype=np.float64) for k, g in target.grads.items()}

    rng = np.random.default_rng(seed)
    names = ref.names()
    total = ref.size
    per_param = {}
    worst, max_rel, max_abs, n_checked = "", 0.0, 0.0, 0
    for name in names:
        p = ref.params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and total > max_coords:
            keep = max(1, int(round(max(max_coords, 200) * flat.size / total)))
            if keep < flat.size:
                idx = np.sort(rng.choice(flat.size, size=keep, replace=False))
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            ref.zero_grad()
            fp = float(loss_and_grad(ref))
            flat[i] = orig - eps
            ref.zero_grad()
            fm = float(loss_and_grad(ref))
            flat[i] = orig
            num[j] = (fp - fm) / (2 * eps)
        ana = analytic[name].reshape(-1)[idx]
        rel = relative_error(ana, num, floor)
        abs_err = np.abs(ana - num)
        r = float(rel.max()) if rel.size else 0.0
        a = float(abs_err.max()) if abs_err.size else 0.0
        per_param[name] = (r, a)
        n_checked += idx.size
        if r > max_rel:
            max_rel, worst = r, name
        max_abs = max(max_abs, a)
    ref.zero_grad()
    return GradCheckReport(max_rel, max_abs, n_checked, tol, worst, per_param)
