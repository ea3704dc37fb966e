"""Self-supervised pre-training on fractal pair archives.

Two losses: symmetric negative cosine similarity with a stop-gradient on
the projection side (SimSiam-style), and InfoNCE with in-batch negatives.
The encoder is kept after pre-training; heads are discarded.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import models
from .nn import (CosineSchedule, ModelWeights, SgdState, StepSchedule, backward,
                 cross_entropy, forward, init_weights, sgd_step)
from .pairs import read_archive
from .seeding import make_rng


def negative_cosine(p: np.ndarray, z: np.ndarray):
    """Row-wise negative cosine similarity, averaged over the batch.

    Returns (loss, grad wrt p). z is treated as a constant: the returned
    gradient set contains no z path at all.
    """
    p = np.asarray(p, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if p.shape != z.shape:
        raise ValueError("p and z must have the same shape")
    pn = np.linalg.norm(p, axis=1)
    zn = np.linalg.norm(z, axis=1)
    ok = (pn > 0) & (zn > 0)
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} zero-norm rows contribute nothing",
                      RuntimeWarning)
    b = p.shape[0]
    phat = np.zeros_like(p)
    zhat = np.zeros_like(z)
    phat[ok] = p[ok] / pn[ok, None]
    zhat[ok] = z[ok] / zn[ok, None]
    cos = (phat * zhat).sum(axis=1)
    loss = -cos.sum() / b
    grad = np.zeros_like(p)
    grad[ok] = -(zhat[ok] - cos[ok, None] * phat[ok]) / pn[ok, None] / b
    return loss, grad


def info_nce(q: np.ndarray, k_pos: np.ndarray, temperature: float):
    """Contrastive loss with the other in-batch keys as negatives.

    Rows are l2-normalized internally; equals cross-entropy on the
    similarity-logit matrix with diagonal labels.
    Returns (loss, (grad_q, grad_k)).
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k_pos, dtype=np.float64)
    b = q.shape[0]
    if b < 2:
        raise ValueError("InfoNCE needs batch size >= 2 for negatives")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    kn = np.linalg.norm(k, axis=1, keepdims=True)
    qh = q / qn
    kh = k / kn
    logits = qh @ kh.T / temperature
    loss, dlogits = cross_entropy(logits, np.arange(b))
    dqh = dlogits @ kh / temperature
    dkh = dlogits.T @ qh / temperature
    dq = (dqh - (dqh * qh).sum(axis=1, keepdims=True) * qh) / qn
    dk = (dkh - (dkh * kh).sum(axis=1, keepdims=True) * kh) / kn
    return loss, (dq, dk)


@dataclass(frozen=True)
class SimSiamNet:
    encoder: "models.ModelSpec"
    projector: "models.ModelSpec"
    predictor: "models.ModelSpec"

    def init(self, rng) -> ModelWeights:
        return ModelWeights(init_weights(self.encoder, rng).entries
                            + init_weights(self.projector, rng).entries
                            + init_weights(self.predictor, rng).entries)


def build_simsiam(input_shape) -> SimSiamNet:
    return SimSiamNet(encoder=models.encoder_spec(input_shape),
                      projector=models.projector_spec(),
                      predictor=models.predictor_spec())


def _view_forward(net: SimSiamNet, w: ModelWeights, x: np.ndarray):
    feat, c_enc = forward(net.encoder, w, x)
    z, c_proj = forward(net.projector, w, feat)
    p, c_pred = forward(net.predictor, w, z)
    return z, p, (c_enc, c_proj, c_pred)


def _view_backward(net: SimSiamNet, caches, dp: np.ndarray) -> ModelWeights:
    c_enc, c_proj, c_pred = caches
    g_pred = backward(c_pred, dp)
    # backward() returns parameter grads only; chain the input gradient
    # through each stage explicitly
    dz = _input_grad(c_pred, dp)
    g_proj = backward(c_proj, dz)
    dfeat = _input_grad(c_proj, dz)
    g_enc = backward(c_enc, dfeat)
    return g_enc + g_proj + g_pred


def _input_grad(cache, grad_out: np.ndarray) -> np.ndarray:
    """Gradient wrt the network input for a cached forward pass."""
    from .nn import Conv3x3, Dense, Flatten, MaxPool2, Relu, _col2im
    spec, w, layer_caches = cache
    g = np.asarray(grad_out, dtype=np.float64)
    for layer, saved in reversed(layer_caches):
        if isinstance(layer, Dense):
            g = g @ w[f"{layer.name}.w"].T
        elif isinstance(layer, Relu):
            g = g * saved
        elif isinstance(layer, Conv3x3):
            cols, x_shape = saved
            bsz, c, h, wd = x_shape
            gout = g.transpose(0, 2, 3, 1).reshape(bsz, h * wd, layer.out_channels)
            wf = w[f"{layer.name}.w"].reshape(layer.out_channels, -1)
            g = _col2im(gout @ wf, bsz, c, h, wd)
        elif isinstance(layer, MaxPool2):
            arg, x_shape = saved
            bsz, c, h, wd = x_shape
            blocks = np.zeros((bsz, c, h // 2, wd // 2, 4))
            np.put_along_axis(blocks, arg[..., None], g[..., None], axis=-1)
            g = blocks.reshape(bsz, c, h // 2, wd // 2, 2, 2) \
                .transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h, wd)
        elif isinstance(layer, Flatten):
            g = g.reshape(saved)
    return g


def simsiam_loss(x1: np.ndarray, x2: np.ndarray, net: SimSiamNet,
                 w: ModelWeights):
    """Symmetric loss 0.5*D(p1, z2) + 0.5*D(p2, z1) with stop-grad on z."""
    if x1.shape != x2.shape:
        raise ValueError("pair batch shapes must match")
    z1, p1, caches1 = _view_forward(net, w, x1)
    z2, p2, caches2 = _view_forward(net, w, x2)
    l1, dp1 = negative_cosine(p1, z2)
    l2, dp2 = negative_cosine(p2, z1)
    loss = 0.5 * l1 + 0.5 * l2
    grads = _view_backward(net, caches1, 0.5 * dp1) \
        + _view_backward(net, caches2, 0.5 * dp2)
    return loss, grads


def infonce_pair_loss(x1, x2, net: SimSiamNet, w: ModelWeights,
                      temperature: float):
    """InfoNCE on projector outputs; gradients flow through both views."""
    z1, _, caches1 = _view_forward(net, w, x1)
    z2, _, caches2 = _view_forward(net, w, x2)
    loss, (dq, dk) = info_nce(z1, z2, temperature)
    # grads come back aligned to the full weight container (predictor
    # entries stay zero since this loss never touches them)
    g1 = backward(caches1[1], dq) + backward(caches1[0], _input_grad(caches1[1], dq))
    g2 = backward(caches2[1], dk) + backward(caches2[0], _input_grad(caches2[1], dk))
    return loss, g1 + g2


@dataclass
class PretrainConfig:
    epochs: int = 2
    batch_size: int = 32
    lr: float = 0.05            # matches the similarity-learning recipe
    momentum: float = 0.9
    weight_decay: float = 1e-4
    loss: str = "simsiam"       # "simsiam" | "infonce"
    temperature: float = 0.2
    schedule: str = "step"      # "step" | "cosine"
    seed: int = 0


def pretrain(archive_path, input_shape, config: PretrainConfig):
    """Pre-train on an archive; returns (encoder weights, loss history)."""
    pairs = [(l.transpose(2, 0, 1), r.transpose(2, 0, 1))
             for l, r, _ in read_archive(archive_path)]
    net = build_simsiam(input_shape)
    w = net.init(make_rng(config.seed, 0x55E0))
    enc_names = set(init_weights(net.encoder, make_rng(0)).names())

    n = len(pairs)
    history = []
    if config.schedule == "cosine":
        sched = CosineSchedule(config.lr, total_steps=max(1, config.epochs))
    else:
        sched = StepSchedule(config.lr)
    state = SgdState(lr=config.lr, momentum=config.momentum,
                     weight_decay=config.weight_decay)
    for epoch in range(config.epochs):
        state.lr = sched.lr(epoch)
        order = make_rng(config.seed, 0x55E1, epoch).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if config.loss == "infonce" and len(idx) < 2:
                continue
            x1 = np.stack([pairs[i][0] for i in idx])
            x2 = np.stack([pairs[i][1] for i in idx])
            if config.loss == "simsiam":
                loss, grads = simsiam_loss(x1, x2, net, w)
            elif config.loss == "infonce":
                loss, grads = infonce_pair_loss(x1, x2, net, w,
                                                config.temperature)
            else:
                raise ValueError(f"unknown loss {config.loss!r}")
            history.append(loss)
            w = sgd_step(w, grads, state)
    encoder_w = ModelWeights([(name, arr) for name, arr in w.entries
                              if name in enc_names])
    return encoder_w, history
