"""Conditional noise-prediction network with hand-written forward/backward passes.

Two pieces: a permutation-invariant point encoder (per-point MLP + max pool)
and a pose/time/feature-conditioned MLP that predicts the corruption noise.
Parameters live in plain dicts of float64 arrays; gradients come back in
matching dicts. Activations are SiLU (smooth, so finite-difference gradient
checks are well behaved).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import make_rng


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def silu(z):
    return z * _sigmoid(z)


def silu_grad(z):
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def time_embedding(t, dim):
    """Sinusoidal embedding of integer steps: (B,) -> (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class NetConfig:
    hidden: tuple = (256, 256)
    time_dim: int = 32
    encoder_widths: tuple = (64, 128)  # last entry is the object feature size
    point_scale: float = 10.0          # meters -> decimeters at the encoder input
    sem_dim: int = 0                   # optional precomputed semantic feature slot

    @property
    def feat_dim(self):
        return self.encoder_widths[-1]


class ObjectEncoder:
    """Per-point MLP with symmetric max pooling; exactly permutation invariant."""

    def __init__(self, params, config: NetConfig):
        self.params = params
        self.config = config

    @classmethod
    def init(cls, config: NetConfig, seed):
        rng = make_rng(seed, "encoder-init")
        w0, w1 = config.encoder_widths
        params = {
            "W0": rng.normal(scale=np.sqrt(2.0 / 3), size=(3, w0)),
            "b0": np.zeros(w0),
            "W1": rng.normal(scale=np.sqrt(2.0 / w0), size=(w0, w1)),
            "b1": np.zeros(w1),
        }
        return cls(params, config)

    def forward(self, points, with_cache=False):
        """(B, N, 3) object points -> (B, C) pooled features."""
        points = np.asarray(points, dtype=np.float64)
        squeeze = points.ndim == 2
        if squeeze:
            points = points[None]
        s = points * self.config.point_scale
        z1 = s @ self.params["W0"] + self.params["b0"]
        a1 = silu(z1)
        f = a1 @ self.params["W1"] + self.params["b1"]
        amax = np.argmax(f, axis=1)                 # (B, C)
        feat = np.take_along_axis(f, amax[:, None, :], axis=1)[:, 0, :]
        if squeeze:
            feat = feat[0]
        if not with_cache:
            return feat
        return feat, {"s": s, "z1": z1, "a1": a1, "amax": amax}

    def backward(self, cache, dfeat):
        """Parameter gradients for pooled-feature cotangents (B, C)."""
        s, z1, a1, amax = cache["s"], cache["z1"], cache["a1"], cache["amax"]
        df = np.zeros((s.shape[0], s.shape[1], dfeat.shape[1]))
        np.put_along_axis(df, amax[:, None, :], dfeat[:, None, :], axis=1)
        grads = {
            "W1": np.einsum("bnh,bnc->hc", a1, df),
            "b1": df.sum(axis=(0, 1)),
        }
        da1 = df @ self.params["W1"].T
        dz1 = da1 * silu_grad(z1)
        grads["W0"] = np.einsum("bni,bnh->ih", s, dz1)
        grads["b0"] = dz1.sum(axis=(0, 1))
        return grads


def encoder_forward(enc: ObjectEncoder, points):
    """Deterministic pooled feature of a point set: (N, 3) -> (C,)."""
    return enc.forward(points)


class DenoiserMlp:
    """MLP over concat(normalized pose, time embedding, object feature[, semantic])."""

    def __init__(self, params, config: NetConfig, pose_dim):
        self.params = params
        self.config = config
        self.pose_dim = pose_dim

    @property
    def input_dim(self):
        return self.pose_dim + self.config.time_dim + self.config.feat_dim + self.config.sem_dim

    @classmethod
    def init(cls, config: NetConfig, pose_dim, seed):
        rng = make_rng(seed, "mlp-init")
        dims = (pose_dim + config.time_dim + config.feat_dim + config.sem_dim,
                *config.hidden, pose_dim)
        params = {}
        for i in range(len(dims) - 1):
            last = i == len(dims) - 2
            scale = 0.0 if last else np.sqrt(2.0 / dims[i])
            params[f"W{i}"] = (np.zeros((dims[i], dims[i + 1])) if last
                               else rng.normal(scale=scale, size=(dims[i], dims[i + 1])))
            params[f"b{i}"] = np.zeros(dims[i + 1])
        return cls(params, config, pose_dim)

    @property
    def n_layers(self):
        return len(self.params) // 2

    def forward(self, x, with_cache=False):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"input width {x.shape[-1]} != expected {self.input_dim}")
        acts = [x]
        zs = []
        h = x
        for i in range(self.n_layers):
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            zs.append(z)
            h = z if i == self.n_layers - 1 else silu(z)
            acts.append(h)
        if not with_cache:
            return h
        return h, {"acts": acts, "zs": zs}

    def backward(self, cache, dout, need_input_grad=False):
        """Backprop output cotangents: returns (param grads, input grad or None)."""
        acts, zs = cache["acts"], cache["zs"]
        grads = {}
        g = np.asarray(dout, dtype=np.float64)
        for i in range(self.n_layers - 1, -1, -1):
            if i != self.n_layers - 1:
                g = g * silu_grad(zs[i])
            grads[f"W{i}"] = acts[i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            if i > 0 or need_input_grad:
                g = g @ self.params[f"W{i}"].T
        return grads, (g if need_input_grad else None)


@dataclass
class Denoiser:
    """Noise predictor: object encoder + conditional MLP, with shared config."""

    encoder: ObjectEncoder
    mlp: DenoiserMlp
    config: NetConfig

    @classmethod
    def init(cls, config: NetConfig, pose_dim, seed):
        return cls(ObjectEncoder.init(config, seed), DenoiserMlp.init(config, pose_dim, seed),
                   config)

    @property
    def pose_dim(self):
        return self.mlp.pose_dim

    def assemble_input(self, h_t, t, feat, sem=None):
        h_t = np.atleast_2d(np.asarray(h_t, dtype=np.float64))
        B = len(h_t)
        emb = time_embedding(np.broadcast_to(np.asarray(t), (B,)), self.config.time_dim)
        feat = np.asarray(feat, dtype=np.float64)
        if feat.ndim == 1:
            feat = np.broadcast_to(feat, (B, len(feat)))
        cols = [h_t, emb, feat]
        if self.config.sem_dim:
            if sem is None:
                sem = np.zeros((B, self.config.sem_dim))
            sem = np.asarray(sem, dtype=np.float64)
            if sem.ndim == 1:
                sem = np.broadcast_to(sem, (B, len(sem)))
            cols.append(sem)
        elif sem is not None:
            raise ValueError("semantic feature supplied but sem_dim is 0")
        return np.concatenate(cols, axis=1)

    def predict(self, h_t, t, feat, sem=None):
        """eps-hat for noisy poses h_t at steps t given object features."""
        x = self.assemble_input(h_t, t, feat, sem)
        out = self.mlp.forward(x)
        return out[0] if np.asarray(h_t).ndim == 1 else out

    def predict_with_cache(self, h_t, t, points, sem=None):
        """Forward pass keeping caches for backprop; encodes `points` itself."""
        feat, enc_cache = self.encoder.forward(points, with_cache=True)
        x = self.assemble_input(h_t, t, feat, sem)
        out, mlp_cache = self.mlp.forward(x, with_cache=True)
        return out, {"enc": enc_cache, "mlp": mlp_cache}

    def backward(self, cache, d_eps, need_input_grad=False):
        """Returns ({"enc": grads, "mlp": grads}, d h_t or None)."""
        mlp_grads, dx = self.mlp.backward(cache["mlp"], d_eps,
                                          need_input_grad=True)
        n = self.pose_dim
        dh = dx[:, :n] if need_input_grad else None
        c0 = n + self.config.time_dim
        dfeat = dx[:, c0:c0 + self.config.feat_dim]
        enc_grads = self.encoder.backward(cache["enc"], dfeat)
        return {"enc": enc_grads, "mlp": mlp_grads}, dh


def denoiser_forward(net: Denoiser, h_t, t, obj_feature, semantic_feature=None):
    """Deterministic forward pass of the noise predictor."""
    return net.predict(h_t, t, obj_feature, semantic_feature)


# flat parameter vector helpers (checkpoints, finite-difference tests)

def flatten_params(groups):
    """{"enc": {...}, "mlp": {...}} -> (flat vector, spec for unflattening)."""
    spec, chunks = [], []
    for gname in sorted(groups):
        for pname in sorted(groups[gname]):
            arr = groups[gname][pname]
            spec.append((gname, pname, arr.shape))
            chunks.append(arr.ravel())
    return np.concatenate(chunks), spec


def unflatten_params(vec, spec):
    out = {}
    pos = 0
    for gname, pname, shape in spec:
        size = int(np.prod(shape))
        out.setdefault(gname, {})[pname] = vec[pos:pos + size].reshape(shape).copy()
        pos += size
    return out
