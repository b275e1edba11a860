"""Losses, Adam, the training step and full-image inference."""
from dataclasses import dataclass, field

import numpy as np

from ..dataset import normalize_image
from ..errors import DivergedError, ShapeError
from ..groundtruth import SparseDisparity
from . import autograd as ag
from .autograd import Tensor
from .config import LOSS_WEIGHTS
from .network import forward


def smooth_l1_loss(pred, gt, valid=None):
    """Mean smooth-L1 (break point 1 px) of ``pred`` against ``gt`` over valid pixels.

    Plain-array convenience wrapper; see :func:`autograd.smooth_l1` for the
    differentiable op.
    """
    if isinstance(gt, SparseDisparity):
        valid, gt = gt.valid, gt.values
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    valid = np.ones(gt.shape, bool) if valid is None else np.asarray(valid, bool)
    return float(ag.smooth_l1(Tensor(pred), gt, valid).data)


def weighted_total_loss(l0, l1, l2, weights=LOSS_WEIGHTS):
    return weights[0] * l0 + weights[1] * l1 + weights[2] * l2


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_update(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-7):
    """One bias-corrected Adam step; returns new parameter arrays.

    ``state`` is updated in place.
    """
    state.t += 1
    t = state.t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        out[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
    return out


def stack_batch(tiles, max_disparity):
    """Tiles -> (left, right, gt, mask) arrays shaped for the network."""
    left = np.stack([t.left for t in tiles])[:, None].astype(np.float32)
    right = np.stack([t.right for t in tiles])[:, None].astype(np.float32)
    gt = np.stack([t.gt.values for t in tiles]).astype(np.float64)
    mask = np.stack([t.gt.valid for t in tiles]) & (gt >= 0) & (gt <= max_disparity - 1)
    return left, right, gt, mask


def loss_graph(params, batch, cfg, weights=LOSS_WEIGHTS):
    left, right, gt, mask = batch
    tparams = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    out, _ = forward(tparams, left, right, cfg)
    losses = [ag.smooth_l1(d, gt, mask) for d in out.disparities]
    total = ag.weighted_sum(losses, weights[:len(losses)])
    return total, losses, tparams


def train_step(batch, params, tcfg, cfg, state=None, step=None):
    """Forward all hourglass outputs, weighted loss, backprop, Adam update.

    ``batch`` is a list of :class:`~satstereo.dataset.StereoTile` (already
    normalised and canonicalised) or a pre-stacked tuple.  Returns
    ``(new_params, record)``; ``state`` carries the Adam moments.
    """
    state = AdamState() if state is None else state
    if not isinstance(batch, tuple):
        batch = stack_batch(batch, cfg.max_disparity)
    total, losses, tparams = loss_graph(params, batch, cfg, tcfg.loss_weights)
    value = float(total.data)
    idx = state.t if step is None else step
    if not np.isfinite(value):
        raise DivergedError(idx, value)
    total.backward()
    grads = {k: t.grad for k, t in tparams.items() if t.grad is not None}
    new = adam_update(params, grads, state, tcfg.learning_rate,
                      tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)
    record = {"step": idx, "losses": [float(l.data) for l in losses], "total": value}
    return new, record


def train(tiles, params, tcfg, cfg, steps, batch_size=None, log=None):
    """Plain loop over ``train_step``; batches are drawn in a seeded order."""
    rng = np.random.default_rng(tcfg.seed)
    state = AdamState()
    history = []
    n = len(tiles)
    batch_size = batch_size or n
    stacked = stack_batch(tiles, cfg.max_disparity)
    for step in range(steps):
        if batch_size >= n:
            batch = stacked
        else:
            idx = np.sort(rng.choice(n, batch_size, replace=False))
            batch = tuple(a[idx] for a in stacked)
        params, rec = train_step(batch, params, tcfg, cfg, state, step)
        history.append(rec)
        if log is not None:
            log(rec)
    return params, history


@dataclass(eq=False)
class CostVolume:
    """Retained matching volume, laid out (D/4, H/4, W/4, C)."""

    data: np.ndarray

    @property
    def shape(self):
        return self.data.shape


def infer_disparity(pair, cfg, params, pad=True):
    """Final-hourglass disparity at input resolution plus the matching volume.

    Input images are normalised per image.  With ``pad`` the images are
    edge-padded up to a multiple of 16 and the result cropped back.
    """
    h, w = pair.shape
    if (h % 16 or w % 16) and not pad:
        raise ShapeError(f"image {h}x{w} not divisible by 16 and padding disabled")
    ph, pw = -h % 16, -w % 16
    left = np.pad(normalize_image(pair.left_img), ((0, ph), (0, pw)), mode="edge")
    right = np.pad(normalize_image(pair.right_img), ((0, ph), (0, pw)), mode="edge")
    out, _ = forward(params, left[None, None], right[None, None], cfg)
    disp = out.disparities[-1].data[0, :h, :w].astype(np.float64)
    vol = np.transpose(out.volume.data[0], (1, 2, 3, 0))
    valid = getattr(pair, "left_mask", np.ones((h, w), bool))
    return SparseDisparity(np.where(valid, disp, 0.0), valid.copy()), CostVolume(vol)
