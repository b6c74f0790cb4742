import numpy as np

from cellattn import autodiff as ad
from cellattn.cells import Model, ModelSpec


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (``x`` is perturbed in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_grads(build, inputs: list[ad.Tensor], eps: float = 1e-6) -> float:
    """Worst relative error between reverse-mode and central-difference gradients."""
    analytic = ad.grad(build(), inputs)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        num = numeric_grad(lambda: float(build().data), t.data, eps)
        worst = max(worst, rel_err(a, num, floor=1e-6))
    return worst


def random_model(name, n=3, c=2, rng=None, **dims):
    rng = rng or np.random.default_rng(0)
    spec = ModelSpec.from_name(name, n, c, **({"hidden": 4, "d_a": 3, "hops": 2} | dims))
    return Model(spec, {k: rng.normal(scale=0.5, size=s) for k, s in spec.param_shapes().items()})
