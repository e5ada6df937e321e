"""Reverse-process sampling with physics guidance.

Two guided variants on top of the plain reverse chain:
  * offset mode shifts the posterior mean by strength * variance times the
    descent direction of the constraint energies;
  * dsg mode keeps every guided step on the sphere of radius sqrt(n)*sigma_t
    around the posterior mean, blending the sampled noise direction with the
    unit descent direction at the configured rate.

The chain runs in the z-scored pose space; constraint gradients are taken at
the denormalized clean-sample estimate and pulled back through the inversion
formula (optionally including the predictor's own input Jacobian).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constraints import ConstraintConfig, combined_batch
from .diffusion import NoiseSchedule
from .hand import HandPose
from .rng import make_rng

_MODES = ("none", "offset", "dsg")


@dataclass
class GuidanceConfig:
    mode: str = "none"
    strength: float = 1.0          # offset-mode scale on the mean shift
    guidance_rate: float = 0.2     # dsg blend in [0, 1]
    constraints: ConstraintConfig = field(default_factory=ConstraintConfig)
    clamp_final: bool = True       # clamp joint angles of the final output
    freeze_eps_jacobian: bool = True

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"guidance mode must be one of {_MODES}")
        if not 0.0 <= self.guidance_rate <= 1.0:
            raise ValueError("guidance_rate must lie in [0, 1]")
        if self.strength < 0.0:
            raise ValueError("strength must be >= 0")


class GuidanceError(RuntimeError):
    pass


def _predict_with_optional_cache(net, h, t, feat, need_cache):
    if not need_cache:
        return net.predict(h, t, feat), None
    x = net.assemble_input(h, t, feat)
    out, cache = net.mlp.forward(x, with_cache=True)
    return out, cache


def guidance_gradient_batch(h_t, t, net, feat, model, obj_index, schedule, gcfg, stats):
    """Gradient of the weighted constraint energies w.r.t. the normalized
    noisy poses (B, n). Returns (grads, raw per-term values at h0_hat)."""
    mean, std = stats
    h_t = np.atleast_2d(np.asarray(h_t, dtype=np.float64))
    ab = schedule.alpha_bar[int(t) - 1]
    full_chain = not gcfg.freeze_eps_jacobian
    eps_hat, cache = _predict_with_optional_cache(net, h_t, t, feat, full_chain)
    h0n = (h_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    h0_phys = h0n * std + mean
    _, g_phys, raw = combined_batch(model, h0_phys, obj_index, gcfg.constraints)
    for term, vals in raw.items():
        if not np.all(np.isfinite(vals)):
            raise GuidanceError(f"non-finite {term} constraint during guidance")
    g_h0n = g_phys * std
    if full_chain:
        # d h0 / d h_t = (I - sqrt(1-ab) * d eps / d h_t) / sqrt(ab)
        _, dx = net.mlp.backward(cache, g_h0n, need_input_grad=True)
        jtv = dx[:, :net.pose_dim]
        g = (g_h0n - np.sqrt(1.0 - ab) * jtv) / np.sqrt(ab)
    else:
        g = g_h0n / np.sqrt(ab)
    if not np.all(np.isfinite(g)):
        raise GuidanceError("non-finite guidance gradient")
    return g, raw


def guidance_gradient(h_t, t, net, feat, model, obj_index, schedule, gcfg, stats):
    """Single-pose wrapper of guidance_gradient_batch -> (n,) vector."""
    g, _ = guidance_gradient_batch(np.asarray(h_t)[None], t, net, feat, model,
                                   obj_index, schedule, gcfg, stats)
    return g[0]


def posterior_mean_batch(h_t, eps_hat, t, schedule):
    a = schedule.alpha[t - 1]
    ab = schedule.alpha_bar[t - 1]
    b = schedule.beta[t - 1]
    return (h_t - b / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)


def step_offset(h_t, eps_hat, grad, t, schedule, gcfg, noise):
    """Mean-offset guided step: descend the energies by strength * variance.

    Returns (shifted mean, h_prev). At t=1 the variance is zero, so the step
    is the unshifted deterministic mean.
    """
    mu = posterior_mean_batch(h_t, eps_hat, t, schedule)
    var = schedule.posterior_var[t - 1]
    mu_tilde = mu + gcfg.strength * var * (-grad)
    if t == 1:
        return mu_tilde, mu_tilde.copy()
    return mu_tilde, mu_tilde + np.sqrt(var) * noise


def step_dsg(h_t, eps_hat, grad, t, schedule, gcfg, noise):
    """Spherical-constraint guided step: the result stays on the sphere of
    radius sqrt(n)*sigma_t around the posterior mean; rows with degenerate
    blend or zero gradient fall back to the unguided step."""
    mu = posterior_mean_batch(h_t, eps_hat, t, schedule)
    sigma = np.sqrt(schedule.posterior_var[t - 1])
    if t == 1 or sigma == 0.0:
        return mu
    n = h_t.shape[-1]
    r = np.sqrt(n) * sigma
    gnorm = np.linalg.norm(grad, axis=-1, keepdims=True)
    safe_g = np.where(gnorm > 1e-12, gnorm, 1.0)
    d_star = -r * grad / safe_g
    d_sample = sigma * noise
    d_m = d_sample + gcfg.guidance_rate * (d_star - d_sample)
    dmn = np.linalg.norm(d_m, axis=-1, keepdims=True)
    ok = (gnorm[:, 0] > 1e-12) & (dmn[:, 0] > 1e-12)
    out = mu + sigma * noise  # unguided fallback
    if np.any(ok):
        out[ok] = mu[ok] + r * d_m[ok] / dmn[ok]
    return out


def sample_vectors(net, bundle, n_samples, gcfg: GuidanceConfig, seed,
                   schedule: NoiseSchedule, stats, model=None, obj_index=None):
    """Run the reverse chain for n_samples poses of one object.

    Returns (physical pose matrix (n_samples, n), per-sample diagnostics).
    Deterministic for a fixed (seed, n_samples, config).
    """
    mean, std = stats
    n = net.pose_dim
    if n_samples == 0:
        return np.zeros((0, n)), []
    guided = gcfg.mode != "none" and (gcfg.mode == "dsg" or gcfg.strength > 0.0)
    if guided:
        if model is None:
            raise ValueError("guided sampling needs a hand model")
        if obj_index is None:
            obj_index = bundle.loss_index
        if obj_index is None:
            raise ValueError("guided sampling needs an object index")
    feat = None
    encoder = getattr(net, "encoder", None)
    if encoder is not None:
        feat = encoder.forward(bundle.enc_points)
    h = make_rng(seed, "sample-init").standard_normal((n_samples, n))
    for t in range(schedule.T, 0, -1):
        noise = make_rng(seed, "sample-step", t).standard_normal((n_samples, n))
        eps_hat = net.predict(h, t, feat)
        if not guided:
            mu = posterior_mean_batch(h, eps_hat, t, schedule)
            if t == 1:
                h = mu
            else:
                h = mu + np.sqrt(schedule.posterior_var[t - 1]) * noise
            continue
        grad, _ = guidance_gradient_batch(h, t, net, feat, model, obj_index,
                                          schedule, gcfg, stats)
        if gcfg.mode == "offset":
            _, h = step_offset(h, eps_hat, grad, t, schedule, gcfg, noise)
        else:
            h = step_dsg(h, eps_hat, grad, t, schedule, gcfg, noise)
    phys = h * std + mean
    if model is not None and gcfg.clamp_final:
        phys[:, :model.dof] = np.clip(phys[:, :model.dof],
                                      model.joint_lower, model.joint_upper)
    diags = []
    if model is not None and (obj_index is not None or bundle.loss_index is not None):
        index = obj_index if obj_index is not None else bundle.loss_index
        _, _, raw = combined_batch(model, phys, index, gcfg.constraints, with_grad=False)
        for i in range(n_samples):
            diags.append({"spf": float(raw["spf"][i]), "erf": float(raw["erf"][i]),
                          "srf": float(raw["srf"][i])})
    else:
        diags = [{} for _ in range(n_samples)]
    return phys, diags


def sample(net, bundle, n_samples, gcfg, seed, schedule, stats, model, obj_index=None):
    """sample_vectors wrapped into HandPose objects for an articulated model."""
    phys, diags = sample_vectors(net, bundle, n_samples, gcfg, seed, schedule,
                                 stats, model=model, obj_index=obj_index)
    poses = [HandPose.from_vector(v, model.dof) for v in phys]
    return poses, diags
