"""Trainable networks: history summarizer, decoder, amortized encoder.

All forward passes and gradients are written directly in numpy.  The
computation graphs are fixed, so reverse-mode differentiation is done by
hand per architecture rather than through a generic autodiff engine.

Three parameter groups live in one bundle:

* ``pred_*``  -- two-layer gated recurrent summarizer producing the
  history context h from the look-back window (values + availability
  masks as input channels).
* ``dec_*``   -- decoder; either an MLP over concat(z, h) or the
  linearized form f(h) + W_dec z with an explicit latent-path matrix.
* ``enc_*``   -- amortized encoder mirroring the summarizer, with a
  linear head and a trainable soft-threshold output stage so deployed
  latents are exactly sparse.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from datetime import date
from pathlib import Path

import numpy as np

from .errors import ContractViolationError, InvalidArgumentError, ShapeError
from .inference import DEFAULT_ACTIVE_THRESHOLD, LatentCode, soft_threshold

DECODER_KINDS = ("mlp", "linearized")

# subgradient convention: relu'(0) = 0
def _relu(x):
    return np.maximum(x, 0.0)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


def _softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class ModelConfig:
    """Architecture hyperparameters (desk-scale defaults)."""

    window: int = 20
    num_features: int = 12
    latent_dim: int = 8
    num_horizons: int = 3
    h_dim: int = 32
    dec_hidden: tuple[int, int] = (64, 32)
    decoder_kind: str = "mlp"
    dropout_rate: float = 0.2
    use_masks: bool = True
    active_threshold: float = DEFAULT_ACTIVE_THRESHOLD
    context_off: bool = False  # ablation: decoder sees a zero history context

    def __post_init__(self):
        if self.decoder_kind not in DECODER_KINDS:
            raise InvalidArgumentError(f"decoder_kind must be one of {DECODER_KINDS}")
        if isinstance(self.dec_hidden, list):
            self.dec_hidden = tuple(self.dec_hidden)

    @property
    def input_dim(self) -> int:
        return 2 * self.num_features if self.use_masks else self.num_features


@dataclass
class WindowTensor:
    """W x d feature matrix with per-feature availability masks."""

    features: np.ndarray
    masks: np.ndarray
    timestamp: date | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.masks = np.asarray(self.masks, dtype=float)
        if self.features.shape != self.masks.shape:
            raise ShapeError("features and masks must share shape")
        if not np.all(np.isfinite(self.features)):
            raise InvalidArgumentError("window features must be finite")
        if not np.all((self.masks == 0) | (self.masks == 1)):
            raise InvalidArgumentError("masks must be binary")


@dataclass
class TargetVector:
    """Log-price targets at strictly increasing horizons."""

    values: np.ndarray
    horizons: tuple[int, ...] = (1, 5, 22)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        hs = tuple(int(t) for t in self.horizons)
        if any(b <= a for a, b in zip(hs, hs[1:])) or any(t <= 0 for t in hs):
            raise InvalidArgumentError("horizons must be strictly increasing positive")
        self.horizons = hs
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgumentError("target values must be finite")


@dataclass
class HistoryContext:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgumentError("history context must be finite")


# ---------------------------------------------------------------------------
# parameter layout


def _gru_param_names(prefix: str) -> list[str]:
    names = []
    for layer in (0, 1):
        for gate in ("r", "u", "c"):
            names += [f"{prefix}_l{layer}_W{gate}", f"{prefix}_l{layer}_U{gate}",
                      f"{prefix}_l{layer}_b{gate}"]
    return names


def param_names(config: ModelConfig) -> list[str]:
    names = _gru_param_names("pred")
    names += _gru_param_names("enc") + ["enc_head_W", "enc_head_b", "enc_thr_raw"]
    if config.decoder_kind == "mlp":
        names += ["dec_W1", "dec_b1", "dec_W2", "dec_b2", "dec_W3", "dec_b3"]
    else:
        names += ["dec_f_W1", "dec_f_b1", "dec_f_W2", "dec_f_b2", "dec_f_W3",
                  "dec_f_b3", "dec_Wz"]
    return names


def _param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, m, n = config.h_dim, config.latent_dim, config.num_horizons
    d_in = config.input_dim
    h1, h2 = config.dec_hidden
    shapes: dict[str, tuple[int, ...]] = {}
    for prefix in ("pred", "enc"):
        for layer, in_dim in ((0, d_in), (1, h)):
            for gate in ("r", "u", "c"):
                shapes[f"{prefix}_l{layer}_W{gate}"] = (in_dim, h)
                shapes[f"{prefix}_l{layer}_U{gate}"] = (h, h)
                shapes[f"{prefix}_l{layer}_b{gate}"] = (h,)
    shapes["enc_head_W"] = (h, m)
    shapes["enc_head_b"] = (m,)
    shapes["enc_thr_raw"] = (m,)
    if config.decoder_kind == "mlp":
        shapes["dec_W1"] = (m + h, h1)
        shapes["dec_W2"] = (h1, h2)
        shapes["dec_W3"] = (h2, n)
    else:
        shapes["dec_f_W1"] = (h, h1)
        shapes["dec_f_W2"] = (h1, h2)
        shapes["dec_f_W3"] = (h2, n)
        shapes["dec_Wz"] = (m, n)
    for key, hidden in (("1", h1), ("2", h2), ("3", n)):
        shapes.setdefault(f"dec_b{key}", (hidden,))
        shapes.setdefault(f"dec_f_b{key}", (hidden,))
    return {name: shapes[name] for name in param_names(config)}


def _glorot(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _orthogonalish(rng: np.random.Generator, shape) -> np.ndarray:
    a = rng.standard_normal(shape)
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


@dataclass
class ModelBundle:
    """Parameters of the three networks plus architecture metadata."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    rng_seed: int

    @property
    def decoder_kind(self) -> str:
        return self.config.decoder_kind

    @property
    def latent_path_matrix(self) -> np.ndarray:
        """W_dec (num_horizons x latent_dim); linearized decoder only."""
        if self.config.decoder_kind != "linearized":
            raise ContractViolationError("latent-path matrix exists only for the linearized decoder")
        return self.params["dec_Wz"].T

    def copy(self) -> "ModelBundle":
        return ModelBundle(self.config, {k: v.copy() for k, v in self.params.items()},
                           self.rng_seed)

    def param_subset(self, prefix: str | tuple[str, ...]) -> list[str]:
        return [n for n in param_names(self.config) if n.startswith(prefix)]


def init_bundle(config: ModelConfig, rng_seed: int = 0) -> ModelBundle:
    """Seed-reproducible initialization."""
    rng = np.random.default_rng(rng_seed)
    params: dict[str, np.ndarray] = {}
    bias_tags = {"b", "b1", "b2", "b3", "br", "bu", "bc"}
    for name, shape in _param_shapes(config).items():
        if name == "enc_thr_raw":
            # softplus(-4.6) ~ 0.01 starting shrinkage
            params[name] = np.full(shape, -4.6)
        elif name.split("_")[-1] in bias_tags:
            params[name] = np.zeros(shape)
        elif "_U" in name:
            params[name] = _orthogonalish(rng, shape)
        else:
            params[name] = _glorot(rng, shape)
    return ModelBundle(config=config, params=params, rng_seed=rng_seed)


def flatten_params(bundle: ModelBundle, names: list[str] | None = None) -> np.ndarray:
    names = names or param_names(bundle.config)
    return np.concatenate([bundle.params[n].ravel() for n in names])


def set_flat_params(bundle: ModelBundle, flat: np.ndarray, names: list[str] | None = None):
    names = names or param_names(bundle.config)
    offset = 0
    for n in names:
        size = bundle.params[n].size
        bundle.params[n] = flat[offset:offset + size].reshape(bundle.params[n].shape).copy()
        offset += size
    if offset != flat.size:
        raise ShapeError("flat parameter vector has wrong length")


# ---------------------------------------------------------------------------
# GRU layers


def _gru_layer_forward(x: np.ndarray, p: dict, prefix: str, layer: int):
    """x: (B, T, D_in) -> hs: (B, T, H) plus cache for backward."""
    Wr, Ur, br = (p[f"{prefix}_l{layer}_{k}"] for k in ("Wr", "Ur", "br"))
    Wu, Uu, bu = (p[f"{prefix}_l{layer}_{k}"] for k in ("Wu", "Uu", "bu"))
    Wc, Uc, bc = (p[f"{prefix}_l{layer}_{k}"] for k in ("Wc", "Uc", "bc"))
    B, T, _ = x.shape
    H = Wr.shape[1]
    h = np.zeros((B, H))
    hs = np.empty((B, T, H))
    cache = {"r": np.empty((B, T, H)), "u": np.empty((B, T, H)),
             "c": np.empty((B, T, H)), "h_prev": np.empty((B, T, H)), "x": x}
    for t in range(T):
        xt = x[:, t, :]
        r = _sigmoid(xt @ Wr + h @ Ur + br)
        u = _sigmoid(xt @ Wu + h @ Uu + bu)
        c = np.tanh(xt @ Wc + (r * h) @ Uc + bc)
        cache["r"][:, t] = r
        cache["u"][:, t] = u
        cache["c"][:, t] = c
        cache["h_prev"][:, t] = h
        h = u * h + (1.0 - u) * c
        hs[:, t, :] = h
    return hs, cache


def _gru_layer_backward(dhs: np.ndarray, cache: dict, p: dict, prefix: str, layer: int,
                        grads: dict):
    """dhs: (B, T, H) gradient w.r.t. each step's output; returns dx (B, T, D_in)."""
    Wr, Ur = p[f"{prefix}_l{layer}_Wr"], p[f"{prefix}_l{layer}_Ur"]
    Wu, Uu = p[f"{prefix}_l{layer}_Wu"], p[f"{prefix}_l{layer}_Uu"]
    Wc, Uc = p[f"{prefix}_l{layer}_Wc"], p[f"{prefix}_l{layer}_Uc"]
    x = cache["x"]
    B, T, _ = x.shape
    dx = np.zeros_like(x)
    g = {k: np.zeros_like(p[f"{prefix}_l{layer}_{k}"])
         for k in ("Wr", "Ur", "br", "Wu", "Uu", "bu", "Wc", "Uc", "bc")}
    dh_next = np.zeros((B, Ur.shape[0]))
    for t in range(T - 1, -1, -1):
        dh = dhs[:, t, :] + dh_next
        r, u, c, h_prev = (cache[k][:, t] for k in ("r", "u", "c", "h_prev"))
        xt = x[:, t, :]
        dc = dh * (1.0 - u)
        du = dh * (h_prev - c)
        dh_prev = dh * u
        da_c = dc * (1.0 - c * c)
        g["Wc"] += xt.T @ da_c
        g["Uc"] += (r * h_prev).T @ da_c
        g["bc"] += da_c.sum(axis=0)
        drh = da_c @ Uc.T
        dr = drh * h_prev
        dh_prev = dh_prev + drh * r
        da_u = du * u * (1.0 - u)
        g["Wu"] += xt.T @ da_u
        g["Uu"] += h_prev.T @ da_u
        g["bu"] += da_u.sum(axis=0)
        dh_prev = dh_prev + da_u @ Uu.T
        da_r = dr * r * (1.0 - r)
        g["Wr"] += xt.T @ da_r
        g["Ur"] += h_prev.T @ da_r
        g["br"] += da_r.sum(axis=0)
        dh_prev = dh_prev + da_r @ Ur.T
        dx[:, t, :] = da_r @ Wr.T + da_u @ Wu.T + da_c @ Wc.T
        dh_next = dh_prev
    for k, v in g.items():
        grads[f"{prefix}_l{layer}_{k}"] = grads.get(f"{prefix}_l{layer}_{k}", 0.0) + v
    return dx


def _stack_inputs(features: np.ndarray, masks: np.ndarray, config: ModelConfig) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    if features.ndim == 2:
        features = features[None]
        masks = np.asarray(masks, dtype=float)[None] if masks is not None else None
    if features.shape[1] != config.window or features.shape[2] != config.num_features:
        raise ShapeError(f"expected windows of shape ({config.window}, {config.num_features}), "
                         f"got {features.shape[1:]}")
    if not config.use_masks:
        return features
    if masks is None:
        masks = np.ones_like(features)
    return np.concatenate([features, np.asarray(masks, dtype=float)], axis=2)


def _recurrent_forward(x: np.ndarray, bundle: ModelBundle, prefix: str,
                       dropout_rng: np.random.Generator | None = None):
    """Two stacked GRU layers; optional inverted dropout between layers."""
    p = bundle.params
    hs0, cache0 = _gru_layer_forward(x, p, prefix, 0)
    drop_mask = None
    rate = bundle.config.dropout_rate
    if dropout_rng is not None and rate > 0:
        drop_mask = (dropout_rng.random(hs0.shape) >= rate) / (1.0 - rate)
        hs0_in = hs0 * drop_mask
    else:
        hs0_in = hs0
    hs1, cache1 = _gru_layer_forward(hs0_in, p, prefix, 1)
    h_final = hs1[:, -1, :]
    cache = {"cache0": cache0, "cache1": cache1, "drop_mask": drop_mask, "hs1": hs1}
    return h_final, cache


def _recurrent_backward(dh_final: np.ndarray, cache: dict, bundle: ModelBundle,
                        prefix: str, grads: dict) -> np.ndarray:
    hs1 = cache["hs1"]
    dhs1 = np.zeros_like(hs1)
    dhs1[:, -1, :] = dh_final
    dhs0 = _gru_layer_backward(dhs1, cache["cache1"], bundle.params, prefix, 1, grads)
    if cache["drop_mask"] is not None:
        dhs0 = dhs0 * cache["drop_mask"]
    dx = _gru_layer_backward(dhs0, cache["cache0"], bundle.params, prefix, 0, grads)
    return dx


# ---------------------------------------------------------------------------
# public forward passes


def pred_forward(x: WindowTensor, bundle: ModelBundle) -> HistoryContext:
    h, _ = pred_forward_batch(x.features[None], x.masks[None], bundle)
    return HistoryContext(h[0])


def pred_forward_batch(features, masks, bundle: ModelBundle,
                       dropout_rng: np.random.Generator | None = None):
    if bundle.config.context_off:
        b = np.asarray(features).shape[0] if np.asarray(features).ndim == 3 else 1
        return np.zeros((b, bundle.config.h_dim)), {"off": True}
    x = _stack_inputs(features, masks, bundle.config)
    return _recurrent_forward(x, bundle, "pred", dropout_rng=dropout_rng)


def enc_forward(x: WindowTensor, bundle: ModelBundle) -> LatentCode:
    z, _ = enc_forward_batch(x.features[None], x.masks[None], bundle)
    return LatentCode(z[0], active_threshold=bundle.config.active_threshold)


def enc_forward_batch(features, masks, bundle: ModelBundle):
    """Deterministic amortized encoding; output is soft-thresholded."""
    x = _stack_inputs(features, masks, bundle.config)
    h, cache = _recurrent_forward(x, bundle, "enc")
    a = h @ bundle.params["enc_head_W"] + bundle.params["enc_head_b"]
    thr = _softplus(bundle.params["enc_thr_raw"])
    z = np.sign(a) * np.maximum(np.abs(a) - thr, 0.0)
    cache = {"rec": cache, "h": h, "a": a, "thr": thr}
    return z, cache


def dec_forward(z: LatentCode, h: HistoryContext, bundle: ModelBundle) -> np.ndarray:
    return dec_forward_values(z.values, h.values, bundle)


def dec_forward_values(z: np.ndarray, h: np.ndarray, bundle: ModelBundle) -> np.ndarray:
    out, _ = dec_forward_cache(z, h, bundle)
    return out


def _mlp_forward(inp, W1, b1, W2, b2, W3, b3):
    a1 = inp @ W1 + b1
    z1 = _relu(a1)
    a2 = z1 @ W2 + b2
    z2 = _relu(a2)
    out = z2 @ W3 + b3
    return out, (inp, a1, z1, a2, z2)


def _mlp_backward(dout, cache, W1, W2, W3, grads, names):
    inp, a1, z1, a2, z2 = cache
    grads[names[2]] = grads.get(names[2], 0.0) + z2.T @ dout
    grads[names[5]] = grads.get(names[5], 0.0) + dout.sum(axis=0)
    dz2 = dout @ W3.T
    da2 = dz2 * (a2 > 0)
    grads[names[1]] = grads.get(names[1], 0.0) + z1.T @ da2
    grads[names[4]] = grads.get(names[4], 0.0) + da2.sum(axis=0)
    dz1 = da2 @ W2.T
    da1 = dz1 * (a1 > 0)
    grads[names[0]] = grads.get(names[0], 0.0) + inp.T @ da1
    grads[names[3]] = grads.get(names[3], 0.0) + da1.sum(axis=0)
    dinp = da1 @ W1.T
    return dinp


def dec_forward_cache(z: np.ndarray, h: np.ndarray, bundle: ModelBundle):
    z = np.asarray(z, dtype=float)
    h = np.asarray(h, dtype=float)
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None]
    if h.ndim == 1:
        h = np.broadcast_to(h, (z.shape[0], h.shape[0]))
    if z.shape[1] != bundle.config.latent_dim:
        raise ShapeError(f"latent dim {z.shape[1]} != configured {bundle.config.latent_dim}")
    if h.shape[1] != bundle.config.h_dim:
        raise ShapeError(f"context dim {h.shape[1]} != configured {bundle.config.h_dim}")
    p = bundle.params
    if bundle.config.decoder_kind == "mlp":
        inp = np.concatenate([z, h], axis=1)
        out, mlp_cache = _mlp_forward(inp, p["dec_W1"], p["dec_b1"], p["dec_W2"],
                                      p["dec_b2"], p["dec_W3"], p["dec_b3"])
    else:
        out_f, mlp_cache = _mlp_forward(h, p["dec_f_W1"], p["dec_f_b1"], p["dec_f_W2"],
                                        p["dec_f_b2"], p["dec_f_W3"], p["dec_f_b3"])
        out = out_f + z @ p["dec_Wz"]
    cache = {"mlp": mlp_cache, "z": z, "h": h, "squeeze": squeeze, "out": out}
    return (out[0] if squeeze else out), cache


def dec_backward(dout: np.ndarray, cache: dict, bundle: ModelBundle, grads: dict):
    """Backprop dout (B, N) through the decoder; returns (dz, dh)."""
    p = bundle.params
    if dout.ndim == 1:
        dout = dout[None]
    if bundle.config.decoder_kind == "mlp":
        dinp = _mlp_backward(dout, cache["mlp"], p["dec_W1"], p["dec_W2"], p["dec_W3"],
                             grads, ["dec_W1", "dec_W2", "dec_W3", "dec_b1", "dec_b2", "dec_b3"])
        m = bundle.config.latent_dim
        dz, dh = dinp[:, :m], dinp[:, m:]
    else:
        dh = _mlp_backward(dout, cache["mlp"], p["dec_f_W1"], p["dec_f_W2"], p["dec_f_W3"],
                           grads, ["dec_f_W1", "dec_f_W2", "dec_f_W3",
                                   "dec_f_b1", "dec_f_b2", "dec_f_b3"])
        dz = dout @ p["dec_Wz"].T
        grads["dec_Wz"] = grads.get("dec_Wz", 0.0) + cache["z"].T @ dout
    return dz, dh


def dec_grad_z(z: np.ndarray, h: np.ndarray, y: np.ndarray, bundle: ModelBundle) -> np.ndarray:
    """Gradient of C = ||y - Dec(z, h)||^2 w.r.t. z (decoder reverse pass only)."""
    out, cache = dec_forward_cache(z, h, bundle)
    dout = 2.0 * (np.atleast_2d(out) - np.atleast_2d(np.asarray(y, float)))
    dz, _ = dec_backward(dout, cache, bundle, {})
    return dz[0] if cache["squeeze"] else dz


# ---------------------------------------------------------------------------
# stage losses and gradients


def stage1_loss_and_grads(features, masks, z_star: np.ndarray, y: np.ndarray,
                          bundle: ModelBundle,
                          dropout_rng: np.random.Generator | None = None):
    """L_pred = mean_j ||y_j - Dec(z*_j, h_j)||^2; grads for pred and dec params.

    z_star is treated as a constant (the cached refined latent).
    """
    h, rec_cache = pred_forward_batch(features, masks, bundle, dropout_rng=dropout_rng)
    return stage1_from_cache(h, rec_cache, z_star, y, bundle)


def stage1_from_cache(h: np.ndarray, rec_cache: dict, z_star: np.ndarray,
                      y: np.ndarray, bundle: ModelBundle):
    """Stage-1 loss/grads reusing an existing summarizer forward (same dropout mask)."""
    out, dec_cache = dec_forward_cache(np.asarray(z_star, float), h, bundle)
    resid = np.atleast_2d(out) - np.atleast_2d(np.asarray(y, float))
    b = resid.shape[0]
    loss = float(np.sum(resid * resid) / b)
    grads: dict[str, np.ndarray] = {}
    dout = 2.0 * resid / b
    _, dh = dec_backward(dout, dec_cache, bundle, grads)
    if not rec_cache.get("off"):
        _recurrent_backward(dh, rec_cache, bundle, "pred", grads)
    return loss, grads


def enc_backward(dz: np.ndarray, cache: dict, bundle: ModelBundle,
                 grads: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Backprop an upstream gradient w.r.t. the encoder output into enc params."""
    grads = {} if grads is None else grads
    a, thr = cache["a"], cache["thr"]
    live = np.abs(a) > thr
    da = dz * live
    dthr = -(dz * np.sign(a) * live).sum(axis=0)
    grads["enc_thr_raw"] = grads.get("enc_thr_raw", 0.0) + dthr * _sigmoid(bundle.params["enc_thr_raw"])
    grads["enc_head_W"] = grads.get("enc_head_W", 0.0) + cache["h"].T @ da
    grads["enc_head_b"] = grads.get("enc_head_b", 0.0) + da.sum(axis=0)
    dh = da @ bundle.params["enc_head_W"].T
    _recurrent_backward(dh, cache["rec"], bundle, "enc", grads)
    return grads


def stage2_loss_and_grads(features, masks, z_star: np.ndarray, bundle: ModelBundle,
                          beta: float = 1.0):
    """L_match = mean_j ||z*_j - Enc(x_j)||^2; grads (scaled by beta) for enc params."""
    z_hat, cache = enc_forward_batch(features, masks, bundle)
    diff = z_hat - np.atleast_2d(np.asarray(z_star, float))
    b = diff.shape[0]
    loss = float(np.sum(diff * diff) / b)
    dz = beta * 2.0 * diff / b
    grads = enc_backward(dz, cache, bundle)
    return loss, grads


_STAGE_SUBSETS = {
    "stage1": ("pred", "dec"),
    "stage2": ("enc",),
    "energy_z": (),
}


def backward(loss_kind: str, inputs: dict, bundle: ModelBundle,
             wrt: list[str] | None = None) -> dict[str, np.ndarray]:
    """Gradient dispatcher enforcing the stop-gradient boundaries.

    ``inputs`` carries the arrays each loss needs (features, masks, z_star,
    y, beta, ...).  Requesting a parameter outside the stage's subset is a
    contract violation, not a silent zero.
    """
    if loss_kind not in _STAGE_SUBSETS:
        raise InvalidArgumentError(f"unknown loss_kind {loss_kind!r}")
    allowed = _STAGE_SUBSETS[loss_kind]
    if wrt is not None:
        for name in wrt:
            if not name.startswith(tuple(allowed)):
                raise ContractViolationError(
                    f"{loss_kind} does not propagate gradients into {name!r}")
    if loss_kind == "stage1":
        _, grads = stage1_loss_and_grads(inputs["features"], inputs.get("masks"),
                                         inputs["z_star"], inputs["y"], bundle,
                                         dropout_rng=inputs.get("dropout_rng"))
    elif loss_kind == "stage2":
        _, grads = stage2_loss_and_grads(inputs["features"], inputs.get("masks"),
                                         inputs["z_star"], bundle,
                                         beta=inputs.get("beta", 1.0))
    else:
        raise InvalidArgumentError("energy_z gradients are served by dec_grad_z")
    if wrt is not None:
        grads = {k: v for k, v in grads.items() if k in set(wrt)}
    return grads


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(bundle: ModelBundle, path: str | Path) -> None:
    """JSON manifest + little-endian float64 parameter blob (bitwise round-trip)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = param_names(bundle.config)
    manifest = {
        "config": asdict(bundle.config),
        "rng_seed": bundle.rng_seed,
        "param_order": names,
        "param_shapes": {n: list(bundle.params[n].shape) for n in names},
        "dtype": "<f8",
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    flat = np.concatenate([bundle.params[n].ravel() for n in names]).astype("<f8")
    flat.tofile(path / "params.bin")


def load_checkpoint(path: str | Path) -> ModelBundle:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    cfg_dict = dict(manifest["config"])
    cfg_dict["dec_hidden"] = tuple(cfg_dict["dec_hidden"])
    config = ModelConfig(**cfg_dict)
    flat = np.fromfile(path / "params.bin", dtype="<f8")
    params: dict[str, np.ndarray] = {}
    offset = 0
    for name in manifest["param_order"]:
        shape = tuple(manifest["param_shapes"][name])
        size = int(np.prod(shape)) if shape else 1
        params[name] = flat[offset:offset + size].reshape(shape).copy()
        offset += size
    if offset != flat.size:
        raise ShapeError("parameter blob length does not match manifest")
    return ModelBundle(config=config, params=params, rng_seed=manifest["rng_seed"])
