"""Central finite-difference oracle shared by the gradient tests."""
import numpy as np

from tempmerge.encoder import EncoderParams, LoraAdapter
from tempmerge.trainlab import RouterParams, TrainConfig, TrainExample, loss_gradients, router_loss_gradients

H = 1e-6


def rel_error(analytic, numeric):
    """Norm-wise relative error over the sampled coordinates."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12))


def central(f, arr, idx, h=H):
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    arr[idx] = old - h
    down = f()
    arr[idx] = old
    return (up - down) / (2 * h)


def sample_coords(rng, tensors, k, rows=None):
    """``k`` random (name, index) pairs; embed coordinates are drawn from ``rows``."""
    names = list(tensors)
    out = []
    for _ in range(k):
        name = names[int(rng.integers(len(names)))]
        t = tensors[name]
        if name == "embed" and rows is not None:
            idx = (int(rng.choice(rows)), int(rng.integers(t.shape[1])))
        else:
            idx = tuple(int(rng.integers(s)) for s in t.shape)
        out.append((name, idx))
    return out


def random_problem(seed, mode="full", V=14, d=4, batch=7, n=5):
    rng = np.random.default_rng(seed)
    params = EncoderParams(rng.standard_normal((V, d)) * 0.7, np.eye(d) + 0.3 * rng.standard_normal((d, d)),
                           0.2 * rng.standard_normal(d))
    data = [TrainExample(tuple(int(t) for t in rng.integers(0, V, rng.integers(1, 6))),
                         tuple(int(t) for t in rng.integers(0, V, rng.integers(1, 8))))
            for _ in range(batch)]
    cfg = TrainConfig(batch_size=batch, negatives=n, temperature=float(rng.uniform(0.5, 2.0)), mode=mode,
                      seed=seed)
    adapter = None
    if mode == "lora":
        adapter = LoraAdapter(rng.standard_normal((2, d)) * 0.5, rng.standard_normal((d, 2)) * 0.5, alpha=4.0)
    return params, adapter, data, cfg


def encoder_gradient_error(seed, mode="full", k=20):
    params, adapter, data, cfg = random_problem(seed, mode)

    def loss():
        return loss_gradients(params, adapter, data, cfg, np.random.default_rng([seed, 7]))[0]

    _, grads = loss_gradients(params, adapter, data, cfg, np.random.default_rng([seed, 7]))
    if mode == "lora":
        tensors = {"lora_A": adapter.A, "lora_B": adapter.B}
    else:
        tensors = params.tensors()
    rows = sorted({t for ex in data for t in ex.query + ex.positive})
    rng = np.random.default_rng(seed + 1000)
    coords = sample_coords(rng, tensors, k, rows)
    a = [grads[name][idx] for name, idx in coords]
    n = [central(loss, tensors[name], idx) for name, idx in coords]
    return rel_error(a, n)


def router_gradient_error(seed, k=20, d=5, h=6, N=40):
    rng = np.random.default_rng(seed)
    r = RouterParams(rng.standard_normal((h, d)), rng.standard_normal(h), rng.standard_normal((2, h)),
                     rng.standard_normal(2))
    X = rng.standard_normal((N, d))
    y = rng.integers(0, 2, N)
    _, grads = router_loss_gradients(r, X, y)
    tensors = r.tensors()
    coords = sample_coords(rng, tensors, k)
    a = [grads[name][idx] for name, idx in coords]
    n = [central(lambda: router_loss_gradients(r, X, y)[0], tensors[name], idx) for name, idx in coords]
    return rel_error(a, n)

