"""Minimal per-band-token autoencoder with hand-derived gradients.

Each band of a ``(C_T, P, P)`` patch is one token: its ``P*P`` pixels are
projected to width ``d`` and tagged with a learned band embedding. The encoder
output for visible band ``i`` is ``h_i = tanh(W_t x_i + b_t + E_i)`` and the
context is the mean of the visible ``h_i``. The decoder sees, for every band
slot ``b``, either ``h_b`` (visible) or ``D + E_b`` (hidden, ``D`` the mask
token), concatenated with the context::

    z_b = tanh(W_m [u_b; c] + b_m)
    y_b = W_2 tanh(W_1 z_b + b_1) + b_2

The context is the only path along which visible bands inform a hidden one,
which is exactly the path a near-duplicate band leaks through. The classifier
reads ``softmax(W_c c + b_c)`` with every band visible.

All maths is float64 and batched over a leading sample axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mrsmask.cube import Patch
from mrsmask.errors import CubeFormatError, ShapeError, TruncationError
from mrsmask.masking import MaskedPatch, MaskPlan

__all__ = [
    "ModelParams",
    "Features",
    "Reconstruction",
    "BLOCK_ORDER",
    "ENCODER_BLOCKS",
    "init_params",
    "encode",
    "decode",
    "recon_loss",
    "classify",
    "backward",
    "plan_arrays",
    "recon_forward_backward",
    "class_forward_backward",
    "save_params",
    "load_params",
]

PARAM_MAGIC = "SPECPARAM1"

BLOCK_ORDER = (
    "band_embed",
    "token_w",
    "token_b",
    "mask_token",
    "mix_w",
    "mix_b",
    "dec1_w",
    "dec1_b",
    "dec2_w",
    "dec2_b",
    "cls_w",
    "cls_b",
)
ENCODER_BLOCKS = ("band_embed", "token_w", "token_b")
DECODER_BLOCKS = ("mask_token", "mix_w", "mix_b", "dec1_w", "dec1_b", "dec2_w", "dec2_b")
CLASSIFIER_BLOCKS = ("cls_w", "cls_b")


def _block_shapes(C_T: int, P: int, d: int, d_h: int, K: int) -> dict[str, tuple[int, ...]]:
    p2 = P * P
    return {
        "band_embed": (C_T, d),
        "token_w": (d, p2),
        "token_b": (d,),
        "mask_token": (d,),
        "mix_w": (d, 2 * d),
        "mix_b": (d,),
        "dec1_w": (d_h, d),
        "dec1_b": (d_h,),
        "dec2_w": (p2, d_h),
        "dec2_b": (p2,),
        "cls_w": (K, d),
        "cls_b": (K,),
    }


class ModelParams:
    """All learnable values in one flat float64 vector with named block views.

    Gradients share the layout, so ``params.like(grad_vector)`` exposes them
    through the same block names.
    """

    def __init__(self, C_T: int, P: int, d: int, d_h: int, K: int, vector: np.ndarray | None = None):
        self.dims = (int(C_T), int(P), int(d), int(d_h), int(K))
        if min(self.dims) < 1:
            raise ShapeError(f"all dimensions must be >= 1, got {self.dims}")
        self.shapes = _block_shapes(*self.dims)
        self.offsets: dict[str, tuple[int, int]] = {}
        pos = 0
        for name in BLOCK_ORDER:
            size = int(np.prod(self.shapes[name]))
            self.offsets[name] = (pos, pos + size)
            pos += size
        self.size = pos
        if vector is None:
            vector = np.zeros(pos)
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (pos,):
            raise ShapeError(f"parameter vector needs {pos} values, got {vector.shape}")
        self.vector = vector

    C_T = property(lambda self: self.dims[0])
    P = property(lambda self: self.dims[1])
    d = property(lambda self: self.dims[2])
    d_h = property(lambda self: self.dims[3])
    K = property(lambda self: self.dims[4])

    def __getitem__(self, name: str) -> np.ndarray:
        lo, hi = self.offsets[name]
        return self.vector[lo:hi].reshape(self.shapes[name])

    def like(self, vector: np.ndarray) -> ModelParams:
        return ModelParams(*self.dims, vector=vector)

    def copy(self) -> ModelParams:
        return ModelParams(*self.dims, vector=self.vector.copy())

    def block_slice(self, name: str) -> slice:
        return slice(*self.offsets[name])

    def block_of(self, index: int) -> str:
        for name in BLOCK_ORDER:
            lo, hi = self.offsets[name]
            if lo <= index < hi:
                return name
        raise IndexError(index)

    def encoder_vector(self) -> np.ndarray:
        return np.concatenate([self[name].ravel() for name in ENCODER_BLOCKS])

    def with_classes(self, K: int, rng: np.random.Generator) -> ModelParams:
        """Same encoder/decoder values with a freshly initialized ``K``-way classifier head."""
        if K == self.K:
            return self.copy()
        out = ModelParams(self.C_T, self.P, self.d, self.d_h, K)
        for name in BLOCK_ORDER:
            if name not in CLASSIFIER_BLOCKS:
                out[name][...] = self[name]
        out["cls_w"][...] = _glorot(rng, K, self.d)
        return out


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


def init_params(C_T: int, P: int, d: int, d_h: int, K: int, seed: int, embed_init: float = 0.0) -> ModelParams:
    """Uniform Glorot weights per affine map; biases and mask token start at zero.

    Band embeddings are U(-embed_init, embed_init), drawn from their own stream
    so the Glorot weights do not depend on ``embed_init``. Nonzero embeddings
    give each band slot an identity from the first step, which the decoder
    needs in order to copy a visible duplicate into a specific masked slot.
    """
    params = ModelParams(C_T, P, d, d_h, K)
    rng = np.random.default_rng(seed)
    for name in ("token_w", "mix_w", "dec1_w", "dec2_w", "cls_w"):
        fan_out, fan_in = params.shapes[name]
        params[name][...] = _glorot(rng, fan_out, fan_in)
    if embed_init < 0:
        raise ValueError("embed_init must be >= 0")
    if embed_init > 0:
        embed_rng = np.random.default_rng(seed)
        params["band_embed"][...] = embed_rng.uniform(-embed_init, embed_init, params.shapes["band_embed"])
    return params


@dataclass(frozen=True)
class Features:
    """Encoder output: ``h`` for visible bands (in ``kept_band_index`` order) and their mean."""

    h: np.ndarray
    context: np.ndarray
    kept_band_index: tuple[int, ...]


@dataclass(frozen=True)
class Reconstruction:
    bands: np.ndarray


# --------------------------------------------------------------------------
# batched core
# --------------------------------------------------------------------------


def plan_arrays(plan: MaskPlan, C_T: int, P: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dense masks for one plan.

    Returns ``(hidden_band (C_T,), input_keep (P*P,), loss_weight (C_T, P*P))``
    where ``loss_weight`` is 1 at positions counted by the reconstruction loss.
    """
    if plan.is_spectral:
        if plan.total_bands != C_T:
            raise ShapeError(f"plan covers {plan.total_bands} bands, model has {C_T}")
        hidden = plan.band_mask()
        keep = np.ones(P * P)
        weight = np.repeat(hidden[:, None], P * P, axis=1).astype(np.float64)
    else:
        if plan.patch_size != P:
            raise ShapeError(f"plan built for P={plan.patch_size}, model has P={P}")
        hidden = np.zeros(C_T, dtype=bool)
        cells = plan.cell_mask().ravel()
        keep = (~cells).astype(np.float64)
        weight = np.repeat(cells[None, :], C_T, axis=0).astype(np.float64)
    return hidden, keep, weight


def _encode_batch(params: ModelParams, x: np.ndarray, visible: np.ndarray):
    a = x @ params["token_w"].T + params["token_b"] + params["band_embed"]
    h = np.tanh(a)
    vis = visible[..., None].astype(np.float64)
    count = visible.sum(axis=1)[:, None]
    context = (h * vis).sum(axis=1) / count
    return h, context


def _forward_recon(params: ModelParams, x: np.ndarray, visible: np.ndarray):
    """Shared forward pass; ``x`` is ``(B, C_T, P*P)`` already masked, ``visible`` ``(B, C_T)`` bool."""
    h, context = _encode_batch(params, x, visible)
    slot = params["mask_token"] + params["band_embed"]
    u = np.where(visible[..., None], h, slot[None])
    cat = np.concatenate([u, np.broadcast_to(context[:, None, :], u.shape)], axis=2)
    z = np.tanh(cat @ params["mix_w"].T + params["mix_b"])
    r = np.tanh(z @ params["dec1_w"].T + params["dec1_b"])
    y = r @ params["dec2_w"].T + params["dec2_b"]
    return h, context, u, cat, z, r, y


def recon_forward_backward(
    params: ModelParams,
    x: np.ndarray,
    target: np.ndarray,
    hidden: np.ndarray,
    weight: np.ndarray,
    need_grad: bool = True,
):
    """Mean over the batch of per-sample masked MSE, and its gradient.

    ``x`` and ``target`` are ``(B, C_T, P*P)``; ``x`` must already have hidden
    bands/cells zeroed. ``hidden`` is ``(B, C_T)`` bool and ``weight`` marks
    the positions each sample's loss averages over.
    """
    visible = ~hidden
    h, context, u, cat, z, r, y = _forward_recon(params, x, visible)
    counts = weight.sum(axis=(1, 2))
    err = (y - target) * weight
    per_sample = (err * err).sum(axis=(1, 2)) / counts
    loss = float(per_sample.mean())
    if not need_grad:
        return loss, per_sample, y, None

    B, C = x.shape[0], x.shape[1]
    d = params.d
    g = params.like(np.zeros(params.size))
    dy = 2.0 * err / counts[:, None, None] / B
    g["dec2_w"][...] = np.einsum("bcp,bch->ph", dy, r)
    g["dec2_b"][...] = dy.sum(axis=(0, 1))
    dq = (dy @ params["dec2_w"]) * (1.0 - r * r)
    g["dec1_w"][...] = np.einsum("bch,bcd->hd", dq, z)
    g["dec1_b"][...] = dq.sum(axis=(0, 1))
    dg = (dq @ params["dec1_w"]) * (1.0 - z * z)
    g["mix_w"][...] = np.einsum("bcd,bce->de", dg, cat)
    g["mix_b"][...] = dg.sum(axis=(0, 1))
    dcat = dg @ params["mix_w"]
    du = dcat[..., :d]
    dcontext = dcat[..., d:].sum(axis=1)

    hid = hidden[..., None].astype(np.float64)
    vis = 1.0 - hid
    du_hidden = du * hid
    g["mask_token"][...] = du_hidden.sum(axis=(0, 1))
    dembed = du_hidden.sum(axis=0)

    count = visible.sum(axis=1)[:, None, None]
    dh = du * vis + vis * dcontext[:, None, :] / count
    _encoder_backward(params, g, x, h, dh, dembed)
    return loss, per_sample, y, g.vector


def _encoder_backward(params, g, x, h, dh, dembed):
    da = dh * (1.0 - h * h)
    g["token_w"][...] = np.einsum("bcd,bcp->dp", da, x)
    g["token_b"][...] = da.sum(axis=(0, 1))
    g["band_embed"][...] = dembed + da.sum(axis=0)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def class_forward_backward(params: ModelParams, x: np.ndarray, labels: np.ndarray | None, need_grad: bool = True):
    """Mean cross-entropy over the batch for 1-based ``labels``, probabilities, and gradient.

    ``x`` is ``(B, C_T, P*P)`` with every band visible.
    """
    B, C = x.shape[0], x.shape[1]
    visible = np.ones((B, C), dtype=bool)
    h, context = _encode_batch(params, x, visible)
    probs = _softmax(context @ params["cls_w"].T + params["cls_b"])
    if labels is None:
        return None, probs, None
    idx = np.asarray(labels, dtype=np.int64) - 1
    picked = probs[np.arange(B), idx]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
    if not need_grad:
        return loss, probs, None
    g = params.like(np.zeros(params.size))
    dlogits = probs.copy()
    dlogits[np.arange(B), idx] -= 1.0
    dlogits /= B
    g["cls_w"][...] = dlogits.T @ context
    g["cls_b"][...] = dlogits.sum(axis=0)
    dcontext = dlogits @ params["cls_w"]
    dh = np.broadcast_to(dcontext[:, None, :] / C, h.shape)
    _encoder_backward(params, g, x, h, dh, 0.0)
    return loss, probs, g.vector


# --------------------------------------------------------------------------
# single-sample API
# --------------------------------------------------------------------------


def _check_patch(params: ModelParams, data: np.ndarray) -> None:
    if data.shape != (params.C_T, params.P, params.P):
        raise ShapeError(f"patch shape {data.shape} does not match model ({params.C_T}, {params.P}, {params.P})")


def encode(params: ModelParams, masked: MaskedPatch) -> Features:
    vis = np.asarray(masked.visible, dtype=np.float64)
    if vis.ndim != 3 or vis.shape[1:] != (params.P, params.P) or vis.shape[0] < 1:
        raise ShapeError(f"visible block {vis.shape} does not match P={params.P}")
    idx = list(masked.kept_band_index)
    if len(idx) != vis.shape[0] or max(idx) >= params.C_T:
        raise ShapeError("kept_band_index does not match visible rows / model bands")
    a = vis.reshape(len(idx), -1) @ params["token_w"].T + params["token_b"] + params["band_embed"][idx]
    h = np.tanh(a)
    return Features(h, h.mean(axis=0), tuple(idx))


def decode(params: ModelParams, feats: Features, plan: MaskPlan) -> Reconstruction:
    C, P = params.C_T, params.P
    if plan.is_spectral and set(feats.kept_band_index) != set(plan.visible_bands):
        raise ShapeError("features do not match the plan's visible bands")
    u = params["mask_token"] + params["band_embed"]
    u[list(feats.kept_band_index)] = feats.h
    cat = np.concatenate([u, np.broadcast_to(feats.context, u.shape)], axis=1)
    z = np.tanh(cat @ params["mix_w"].T + params["mix_b"])
    y = np.tanh(z @ params["dec1_w"].T + params["dec1_b"]) @ params["dec2_w"].T + params["dec2_b"]
    return Reconstruction(y.reshape(C, P, P))


def recon_loss(recon: Reconstruction | np.ndarray, target: Patch | np.ndarray, plan: MaskPlan) -> float:
    """Mean squared error over hidden positions only."""
    pred = recon.bands if isinstance(recon, Reconstruction) else np.asarray(recon)
    tgt = target.data if isinstance(target, Patch) else np.asarray(target)
    if pred.shape != tgt.shape:
        raise ShapeError(f"reconstruction {pred.shape} vs target {tgt.shape}")
    if plan.is_spectral:
        sel = list(plan.masked_bands)
        diff = pred[sel] - tgt[sel]
    else:
        diff = (pred - tgt)[:, plan.cell_mask()]
    return float(np.mean(diff.astype(np.float64) ** 2))


def classify(params: ModelParams, patch: Patch | np.ndarray) -> np.ndarray:
    data = patch.data if isinstance(patch, Patch) else np.asarray(patch)
    _check_patch(params, data)
    _, probs, _ = class_forward_backward(params, data.reshape(1, params.C_T, -1).astype(np.float64), None)
    return probs[0]


def backward(
    params: ModelParams,
    patch: Patch | np.ndarray,
    plan: MaskPlan | None,
    objective: str = "reconstruction",
    label: int | None = None,
) -> np.ndarray:
    """Exact gradient of one sample's objective in canonical parameter order.

    ``objective`` is ``"reconstruction"`` (needs ``plan``) or
    ``"classification"`` (needs a 1-based ``label``).
    """
    data = patch.data if isinstance(patch, Patch) else np.asarray(patch)
    _check_patch(params, data)
    target = data.reshape(1, params.C_T, -1).astype(np.float64)
    if objective == "classification":
        if label is None or not 1 <= label <= params.K:
            raise ShapeError(f"label must lie in [1, {params.K}], got {label}")
        return class_forward_backward(params, target, np.array([label]))[2]
    if objective != "reconstruction" or plan is None:
        raise ValueError("reconstruction objective needs a plan; objective must be reconstruction|classification")
    hidden, keep, weight = plan_arrays(plan, params.C_T, params.P)
    x = target * keep * (~hidden)[:, None]
    return recon_forward_backward(params, x, target, hidden[None], weight[None])[3]


def forward_loss(params: ModelParams, patch: Patch | np.ndarray, plan: MaskPlan | None,
                 objective: str = "reconstruction", label: int | None = None) -> float:
    """Scalar objective matching :func:`backward` (used for gradient checks)."""
    data = patch.data if isinstance(patch, Patch) else np.asarray(patch)
    target = data.reshape(1, params.C_T, -1).astype(np.float64)
    if objective == "classification":
        return class_forward_backward(params, target, np.array([label]), need_grad=False)[0]
    hidden, keep, weight = plan_arrays(plan, params.C_T, params.P)
    x = target * keep * (~hidden)[:, None]
    return recon_forward_backward(params, x, target, hidden[None], weight[None], need_grad=False)[0]


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_params(params: ModelParams, path: str | Path) -> None:
    C_T, P, d, d_h, K = params.dims
    header = json.dumps({"C_T": C_T, "P": P, "d": d, "d_h": d_h, "K": K}, separators=(",", ":"))
    Path(path).write_bytes(f"{PARAM_MAGIC} {header}\n".encode() + params.vector.astype("<f8").tobytes())


def load_params(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0 or not raw.startswith(PARAM_MAGIC.encode() + b" "):
        raise CubeFormatError("magic", f"expected {PARAM_MAGIC} header line")
    try:
        header = json.loads(raw[len(PARAM_MAGIC) + 1:nl])
    except json.JSONDecodeError as exc:
        raise CubeFormatError("header", f"invalid JSON ({exc.msg})") from None
    dims = []
    for key in ("C_T", "P", "d", "d_h", "K"):
        v = header.get(key)
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise CubeFormatError(key, f"expected positive integer, got {v!r}")
        dims.append(v)
    params = ModelParams(*dims)
    payload = raw[nl + 1:]
    if len(payload) != params.size * 8:
        raise TruncationError(f"checkpoint payload has {len(payload)} bytes, expected {params.size * 8}")
    params.vector = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return params
