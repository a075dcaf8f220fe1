"""Central finite differences for loss functions of numpy arrays."""

import numpy as np

STEP = 1e-6
FLOOR = 1e-5  # below this magnitude errors are judged absolutely
# (central differences at STEP carry roundoff near 1e-10 on O(1) losses,
# so exactly-zero analytic entries need an absolute floor above that)


def numeric_grad(f, x, step=STEP):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + step
        up = f()
        x[idx] = old - step
        down = f()
        x[idx] = old
        grad[idx] = (up - down) / (2 * step)
    return grad


def rel_error(numeric, analytic):
    scale = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), FLOOR)
    return float(np.max(np.abs(numeric - analytic) / scale))


def model_grad_error(seed):
    """Worst relative error of the full model's analytic gradient on a random tiny config."""
    from synthreid.model import (ModelConfig, backward_batch, batch_hard_triplet, batch_id_loss,
                                 forward_batch, init_model)
    rng = np.random.default_rng(seed)
    n_ids = int(rng.integers(2, 4))
    channels = tuple(int(c) for c in rng.integers(2, 5, size=rng.integers(1, 3)))
    h, w = int(rng.integers(6, 13)), int(rng.integers(4, 9))
    cfg = ModelConfig(n_ids, int(rng.integers(2, 5)), channels, h, w, seed)
    model = init_model(cfg)
    for v in model.params.values():
        v += rng.normal(0, 0.1, v.shape)
    labels = np.repeat(np.arange(n_ids), 2)
    x = rng.random((len(labels), 3, h, w))
    margin = float(rng.uniform(0.1, 1.0))

    def loss():
        emb, logits, _ = forward_batch(model, x, train_mode=True)
        return batch_id_loss(logits, labels)[0] + batch_hard_triplet(emb, labels, margin)[0]

    emb, logits, cache = forward_batch(model, x, train_mode=True)
    g_logits = batch_id_loss(logits, labels)[1]
    g_emb = batch_hard_triplet(emb, labels, margin)[1]
    grads = backward_batch(model, cache, g_emb, g_logits)
    return max(rel_error(numeric_grad(loss, p), grads[name]) for name, p in model.params.items())
