"""Encoder-decoder networks with analytic gradients, in plain numpy.

Encoders turn a token-index sequence into hidden states H (d_h x n):

* ``bag``    - position-wise projection of the word embedding, tanh.
* ``conv``   - single-width 1-D convolution over the embeddings, tanh.
* ``birnn``  - two minimal gated recurrent units (one per direction, each
  d_h/2 wide), states concatenated.

Decoders map H to one logit per label:

* ``maxpool`` - element-wise max over positions, then a per-label affine.
* ``la_caml`` - label-wise attention A = softmax_rows(W H), V = H A^T.
* ``la_laat`` - label-wise attention through a tanh bottleneck,
  A = softmax_rows(U tanh(P H)), V = H A^T.

For every label the attention weights over token positions sum to 1; padded
positions (beyond ``n_valid``) receive exactly zero attention. Probabilities
are independent per label via sigmoid, trained with binary cross entropy.
``backward`` returns analytic gradients for every parameter tensor and is
checked against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from icdkit.errors import DataError
from icdkit.models.config import ModelConfig

__all__ = ["ForwardTrace", "backward", "bce_loss", "forward", "init_parameters"]

PROB_CLAMP = 1e-12


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    shifted = s - s.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _glorot(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    fan_out, fan_in = shape
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_parameters(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Seeded initialization: uniform +-0.1 embeddings, Glorot elsewhere, zero biases.

    Draw order is fixed (embedding, encoder, decoder) so a given seed always
    produces the same tensors.
    """
    config.validate(resolved=True)
    params: dict[str, np.ndarray] = {}
    params["emb"] = rng.uniform(-0.1, 0.1, size=(config.vocab_size, config.d_e))

    if config.encoder == "bag":
        params["enc_W"] = _glorot(rng, (config.d_h, config.d_e))
        params["enc_b"] = np.zeros(config.d_h)
    elif config.encoder == "conv":
        params["enc_W"] = _glorot(rng, (config.d_h, config.window * config.d_e))
        params["enc_b"] = np.zeros(config.d_h)
    else:  # birnn
        h = config.d_h // 2
        for direction in ("f", "b"):
            params[f"enc_{direction}_Wf"] = _glorot(rng, (h, config.d_e))
            params[f"enc_{direction}_Uf"] = _glorot(rng, (h, h))
            params[f"enc_{direction}_bf"] = np.zeros(h)
            params[f"enc_{direction}_Wh"] = _glorot(rng, (h, config.d_e))
            params[f"enc_{direction}_Uh"] = _glorot(rng, (h, h))
            params[f"enc_{direction}_bh"] = np.zeros(h)

    n_labels = int(config.n_labels)
    if config.decoder == "la_caml":
        params["dec_Watt"] = _glorot(rng, (n_labels, config.d_h))
    elif config.decoder == "la_laat":
        params["dec_P"] = _glorot(rng, (config.d_p, config.d_h))
        params["dec_U"] = _glorot(rng, (n_labels, config.d_p))
    params["dec_Wout"] = _glorot(rng, (n_labels, config.d_h))
    params["dec_bout"] = np.zeros(n_labels)
    return params


@dataclass
class ForwardTrace:
    """Everything the forward pass produced, plus what backward needs.

    ``H`` and ``A`` span the full layout width; columns beyond ``n_valid``
    are zero (padding carries no representation and no attention mass).
    """

    token_ids: np.ndarray
    n_valid: int
    H: np.ndarray
    logits: np.ndarray
    probabilities: np.ndarray
    A: np.ndarray | None = None
    V: np.ndarray | None = None
    Z: np.ndarray | None = None
    cache: dict = field(default_factory=dict)


def _mgu_forward(
    X: np.ndarray,
    Wf: np.ndarray,
    Uf: np.ndarray,
    bf: np.ndarray,
    Wh: np.ndarray,
    Uh: np.ndarray,
    bh: np.ndarray,
) -> tuple[np.ndarray, dict]:
    """Minimal gated unit: one forget gate, one candidate state."""
    k = X.shape[0]
    h = bf.shape[0]
    states = np.zeros((k, h))
    gates = np.zeros((k, h))
    candidates = np.zeros((k, h))
    previous = np.zeros((k, h))
    h_prev = np.zeros(h)
    for t in range(k):
        x = X[t]
        f = _sigmoid(Wf @ x + Uf @ h_prev + bf)
        hhat = np.tanh(Wh @ x + Uh @ (f * h_prev) + bh)
        states[t] = (1.0 - f) * h_prev + f * hhat
        gates[t] = f
        candidates[t] = hhat
        previous[t] = h_prev
        h_prev = states[t]
    return states, {"f": gates, "hhat": candidates, "hprev": previous}


def _mgu_backward(
    dstates: np.ndarray,
    X: np.ndarray,
    Wf: np.ndarray,
    Uf: np.ndarray,
    Wh: np.ndarray,
    Uh: np.ndarray,
    cache: dict,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    k = X.shape[0]
    grads = {
        "Wf": np.zeros_like(Wf),
        "Uf": np.zeros_like(Uf),
        "bf": np.zeros(Wf.shape[0]),
        "Wh": np.zeros_like(Wh),
        "Uh": np.zeros_like(Uh),
        "bh": np.zeros(Wh.shape[0]),
    }
    dX = np.zeros_like(X)
    dh_next = np.zeros(Wf.shape[0])
    for t in reversed(range(k)):
        c = dstates[t] + dh_next
        f = cache["f"][t]
        hhat = cache["hhat"][t]
        h_prev = cache["hprev"][t]
        da_h = (c * f) * (1.0 - hhat**2)
        du = Uh.T @ da_h  # gradient w.r.t. (f * h_prev)
        df = c * (hhat - h_prev) + du * h_prev
        da_f = df * f * (1.0 - f)
        grads["Wh"] += np.outer(da_h, X[t])
        grads["Uh"] += np.outer(da_h, f * h_prev)
        grads["bh"] += da_h
        grads["Wf"] += np.outer(da_f, X[t])
        grads["Uf"] += np.outer(da_f, h_prev)
        grads["bf"] += da_f
        dX[t] = Wh.T @ da_h + Wf.T @ da_f
        dh_next = c * (1.0 - f) + du * f + Uf.T @ da_f
    return dX, grads


def _conv_windows(X: np.ndarray, window: int) -> np.ndarray:
    """Row t holds the flattened embeddings of the window centred at t (zero-padded)."""
    k, d_e = X.shape
    pad_left = (window - 1) // 2
    pad_right = window - 1 - pad_left
    Xp = np.vstack([np.zeros((pad_left, d_e)), X, np.zeros((pad_right, d_e))])
    return np.lib.stride_tricks.sliding_window_view(Xp, (window, d_e)).reshape(k, window * d_e)


def _encode(params: dict, config: ModelConfig, X: np.ndarray, cache: dict) -> np.ndarray:
    if config.encoder == "bag":
        H = np.tanh(params["enc_W"] @ X.T + params["enc_b"][:, None])
    elif config.encoder == "conv":
        M = _conv_windows(X, config.window)
        cache["M"] = M
        H = np.tanh(params["enc_W"] @ M.T + params["enc_b"][:, None])
    else:  # birnn
        halves = []
        for direction in ("f", "b"):
            Xd = X if direction == "f" else X[::-1]
            states, mgu_cache = _mgu_forward(
                Xd,
                params[f"enc_{direction}_Wf"],
                params[f"enc_{direction}_Uf"],
                params[f"enc_{direction}_bf"],
                params[f"enc_{direction}_Wh"],
                params[f"enc_{direction}_Uh"],
                params[f"enc_{direction}_bh"],
            )
            cache[f"mgu_{direction}"] = mgu_cache
            halves.append(states if direction == "f" else states[::-1])
        H = np.hstack(halves).T
    cache["H_enc"] = H
    return H


def forward(
    params: dict,
    config: ModelConfig,
    token_ids: np.ndarray,
    n_valid: int | None = None,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> ForwardTrace:
    """Run one document through the network.

    ``token_ids`` may carry layout padding past ``n_valid``; padded columns
    of H and A come back as exact zeros. Dropout (training only) is applied
    to H before the decoder and requires ``rng``.
    """
    token_ids = np.asarray(token_ids, dtype=np.int64)
    n_layout = len(token_ids)
    k = n_layout if n_valid is None else int(n_valid)
    if k < 1:
        raise DataError("empty token sequence")
    if k > n_layout:
        raise DataError(f"n_valid {k} exceeds layout length {n_layout}")
    ids = token_ids[:k]
    if ids.min() < 0 or ids.max() >= params["emb"].shape[0]:
        raise DataError("unknown token index (outside the embedding table)")

    cache: dict = {"ids": ids}
    X = params["emb"][ids]
    cache["X"] = X
    H = _encode(params, config, X, cache)

    if dropout > 0.0:
        if rng is None:
            raise DataError("dropout requires an rng")
        mask = (rng.random(H.shape) >= dropout).astype(float)
        cache["dropout_mask"] = mask
        cache["dropout_rate"] = dropout
        H = H * mask / (1.0 - dropout)

    L = int(config.n_labels)
    A_valid = None
    V = None
    Z = None
    if config.decoder == "maxpool":
        pooled_at = H.argmax(axis=1)
        cache["pooled_at"] = pooled_at
        m = H[np.arange(H.shape[0]), pooled_at]
        cache["pooled"] = m
        logits = params["dec_Wout"] @ m + params["dec_bout"]
    elif config.decoder == "la_caml":
        S = params["dec_Watt"] @ H
        A_valid = _softmax_rows(S)
        V = H @ A_valid.T
        logits = np.einsum("ld,dl->l", params["dec_Wout"], V) + params["dec_bout"]
    else:  # la_laat
        Z = np.tanh(params["dec_P"] @ H)
        S = params["dec_U"] @ Z
        A_valid = _softmax_rows(S)
        V = H @ A_valid.T
        logits = np.einsum("ld,dl->l", params["dec_Wout"], V) + params["dec_bout"]

    probabilities = _sigmoid(logits)

    if n_layout > k:
        H_full = np.zeros((H.shape[0], n_layout))
        H_full[:, :k] = H
        A_full = None
        if A_valid is not None:
            A_full = np.zeros((L, n_layout))
            A_full[:, :k] = A_valid
    else:
        H_full = H
        A_full = A_valid
    cache["H_decoder"] = H

    return ForwardTrace(
        token_ids=token_ids,
        n_valid=k,
        H=H_full,
        logits=logits,
        probabilities=probabilities,
        A=A_full,
        V=V,
        Z=Z,
        cache=cache,
    )


def bce_loss(probabilities: np.ndarray, targets: np.ndarray) -> float:
    """Mean binary cross entropy over labels, probabilities clamped at 1e-12."""
    p = np.clip(probabilities, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(targets, dtype=float)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def backward(
    trace: ForwardTrace,
    params: dict,
    config: ModelConfig,
    targets: np.ndarray,
) -> dict[str, np.ndarray]:
    """Gradients of the mean BCE loss for every parameter tensor."""
    cache = trace.cache
    H = cache["H_decoder"]
    L = int(config.n_labels)
    grads = {name: np.zeros_like(tensor) for name, tensor in params.items()}

    dlogits = (trace.probabilities - np.asarray(targets, dtype=float)) / L

    if config.decoder == "maxpool":
        m = cache["pooled"]
        grads["dec_Wout"] += np.outer(dlogits, m)
        grads["dec_bout"] += dlogits
        dm = params["dec_Wout"].T @ dlogits
        dH = np.zeros_like(H)
        dH[np.arange(H.shape[0]), cache["pooled_at"]] = dm
    else:
        V = trace.V
        A = trace.A[:, : trace.n_valid]
        grads["dec_Wout"] += dlogits[:, None] * V.T
        grads["dec_bout"] += dlogits
        dV = (params["dec_Wout"] * dlogits[:, None]).T
        dH = dV @ A
        dA = dV.T @ H
        dS = A * (dA - (dA * A).sum(axis=1, keepdims=True))
        if config.decoder == "la_caml":
            grads["dec_Watt"] += dS @ H.T
            dH = dH + params["dec_Watt"].T @ dS
        else:
            Z = trace.Z
            grads["dec_U"] += dS @ Z.T
            dZ = params["dec_U"].T @ dS
            dZpre = dZ * (1.0 - Z**2)
            grads["dec_P"] += dZpre @ H.T
            dH = dH + params["dec_P"].T @ dZpre

    if "dropout_mask" in cache:
        dH = dH * cache["dropout_mask"] / (1.0 - cache["dropout_rate"])

    X = cache["X"]
    if config.encoder == "bag":
        dpre = dH * (1.0 - cache["H_enc"] ** 2)
        grads["enc_W"] += dpre @ X
        grads["enc_b"] += dpre.sum(axis=1)
        dX = dpre.T @ params["enc_W"]
    elif config.encoder == "conv":
        dpre = dH * (1.0 - cache["H_enc"] ** 2)
        M = cache["M"]
        grads["enc_W"] += dpre @ M
        grads["enc_b"] += dpre.sum(axis=1)
        dM = dpre.T @ params["enc_W"]
        k, d_e = X.shape
        pad_left = (config.window - 1) // 2
        dXp = np.zeros((k + config.window - 1, d_e))
        for j in range(config.window):
            dXp[j : j + k] += dM[:, j * d_e : (j + 1) * d_e]
        dX = dXp[pad_left : pad_left + k]
    else:  # birnn
        h = config.d_h // 2
        dX = np.zeros_like(X)
        for direction, rows in (("f", slice(0, h)), ("b", slice(h, config.d_h))):
            dstates = dH[rows].T
            if direction == "b":
                dstates = dstates[::-1]
            Xd = X if direction == "f" else X[::-1]
            dXd, mgu_grads = _mgu_backward(
                dstates,
                Xd,
                params[f"enc_{direction}_Wf"],
                params[f"enc_{direction}_Uf"],
                params[f"enc_{direction}_Wh"],
                params[f"enc_{direction}_Uh"],
                cache[f"mgu_{direction}"],
            )
            if direction == "b":
                dXd = dXd[::-1]
            dX += dXd
            for name, grad in mgu_grads.items():
                grads[f"enc_{direction}_{name}"] += grad

    np.add.at(grads["emb"], cache["ids"], dX)
    return grads
