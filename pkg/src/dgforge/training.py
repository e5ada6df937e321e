"""Physics-aware training of the noise predictor.

Per sample: corrupt the normalized pose to a uniform step, predict the noise,
take the squared error, then rebuild the clean-sample estimate, denormalize
it, and evaluate the weighted constraint energies on it; their gradients flow
back into the prediction through the inversion formula. Optimizer is plain
SGD with global-norm gradient clipping and an EMA copy kept for evaluation.

Diffusion runs on z-scored pose vectors; the per-dimension mean/std are
computed from the training set and stored with the checkpoint.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .constraints import ConstraintConfig, combined_batch
from .diffusion import NoiseSchedule
from .nets import Denoiser, NetConfig
from .rng import make_rng

STD_FLOOR = 1e-6
LOSS_COLUMNS = ("iteration", "L_simple", "L_SPF", "L_ERF", "L_SRF", "total")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 2e-3
    batch_size: int = 16
    iterations: int = 2000
    constraints: ConstraintConfig = field(default_factory=ConstraintConfig)
    ema_decay: float = 0.995
    seed: int = 0
    grad_clip: float = 1.0
    optimizer: str = "sgd"
    encoder_points: int = 256     # object points fed to the encoder per step
    loss_cloud_points: int = 1024  # object points behind the physics losses
    physics: bool = True           # False trains the plain MSE baseline

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.optimizer != "sgd":
            raise NotImplementedError("only the sgd optimizer is implemented; "
                                      "'adam' is reserved for an extension")


@dataclass
class ObjectBundle:
    """Per-object data used during training/sampling."""
    object_id: str
    enc_points: np.ndarray          # (n_enc, 3) encoder subsample
    loss_index: object = None       # SpatialIndex over the physics-loss subsample
    cloud: object = None            # full PointCloud (evaluation)
    sem: np.ndarray | None = None   # optional semantic feature vector


@dataclass
class TrainData:
    poses: np.ndarray               # (M, K+9) physical units
    object_ids: list
    objects: dict                   # object_id -> ObjectBundle

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64)
        if len(self.poses) != len(self.object_ids):
            raise ValueError("poses and object_ids must align")
        if len(self.poses) == 0:
            raise ValueError("training dataset is empty")


def normalization_stats(poses):
    mean = poses.mean(axis=0)
    std = np.maximum(poses.std(axis=0), STD_FLOOR)
    return mean, std


def _weighted_physics(active):
    return any(w > 0 for w in active.weights.values())


def loss_padg(net: Denoiser, data: TrainData, schedule: NoiseSchedule, cfg: TrainConfig,
              model=None, stats=None, rng=None, batch_idx=None, ts=None, eps=None):
    """One objective evaluation over a batch.

    Returns (total loss, parts dict, parameter gradient groups). Sampling of
    the batch, steps, and noise comes from `rng` unless given explicitly.
    """
    if stats is None:
        stats = normalization_stats(data.poses)
    mean, std = stats
    if batch_idx is None:
        batch_idx = rng.integers(0, len(data.poses), size=cfg.batch_size)
    B = len(batch_idx)
    h0_phys = data.poses[batch_idx]
    obj_ids = [data.object_ids[i] for i in batch_idx]
    enc_pts = np.stack([data.objects[o].enc_points for o in obj_ids])
    sems = None
    if net.config.sem_dim:
        sems = np.stack([
            data.objects[o].sem if data.objects[o].sem is not None
            else np.zeros(net.config.sem_dim) for o in obj_ids])

    h0 = (h0_phys - mean) / std
    if ts is None:
        ts = rng.integers(1, schedule.T + 1, size=B)
    if eps is None:
        eps = rng.standard_normal(h0.shape)
    ab = schedule.alpha_bar[np.asarray(ts) - 1]
    h_t = np.sqrt(ab)[:, None] * h0 + np.sqrt(1.0 - ab)[:, None] * eps

    eps_hat, cache = net.predict_with_cache(h_t, ts, enc_pts, sems)
    resid = eps_hat - eps
    l_simple = float(np.mean(np.sum(resid * resid, axis=1)))
    d_eps = 2.0 * resid / B

    ccfg = cfg.constraints
    parts = {"L_simple": l_simple, "L_SPF": 0.0, "L_ERF": 0.0, "L_SRF": 0.0}
    physics_on = cfg.physics and _weighted_physics(ccfg)
    l_phys = 0.0
    if physics_on:
        if model is None:
            raise ValueError("physics losses need a hand model")
        scale = (np.sqrt(1.0 - ab) / np.sqrt(ab))[:, None]
        h0_hat = estimate_batch_h0(h_t, eps_hat, ts, schedule)
        h0_hat_phys = h0_hat * std + mean
        groups = {}
        for row, oid in enumerate(obj_ids):
            groups.setdefault(oid, []).append(row)
        raw_sums = dict.fromkeys(("spf", "erf", "srf"), 0.0)
        for oid, rows in groups.items():
            index = data.objects[oid].loss_index
            if index is None:
                raise ValueError(f"object {oid} has no physics-loss index")
            v, g, raw = combined_batch(model, h0_hat_phys[rows], index, ccfg)
            l_phys += float(v.sum())
            for term in raw_sums:
                raw_sums[term] += float(raw[term].sum())
            # chain: d L / d eps_hat = -sqrt(1-ab)/sqrt(ab) * std * dL/d h0_hat_phys
            d_eps[rows] += -(scale[rows] * (g * std)) / B
        l_phys /= B
        for term, key in (("spf", "L_SPF"), ("erf", "L_ERF"), ("srf", "L_SRF")):
            parts[key] = raw_sums[term] / B

    total = l_simple + l_phys
    parts["total"] = total
    if not np.isfinite(total):
        bad = next((k for k, v in parts.items() if not np.isfinite(v)), "total")
        raise TrainingDiverged(f"non-finite loss component {bad}")
    grads, _ = net.backward(cache, d_eps)
    for gname, gdict in grads.items():
        for pname, arr in gdict.items():
            if not np.all(np.isfinite(arr)):
                raise TrainingDiverged(f"non-finite gradient in {gname}.{pname}")
    return total, parts, grads


def estimate_batch_h0(h_t, eps_hat, ts, schedule):
    ab = schedule.alpha_bar[np.asarray(ts) - 1][:, None]
    return (h_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def _clip_global(grads, max_norm):
    if max_norm <= 0:
        return grads
    sq = 0.0
    for gdict in grads.values():
        for arr in gdict.values():
            sq += float(np.sum(arr * arr))
    norm = np.sqrt(sq)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {g: {p: arr * scale for p, arr in gdict.items()} for g, gdict in grads.items()}


@dataclass
class TrainResult:
    net: Denoiser
    ema: dict                 # {"enc": params, "mlp": params}
    stats: tuple              # (mean, std)
    loss_rows: list           # rows matching LOSS_COLUMNS
    iteration: int


def _params_of(net):
    return {"enc": net.encoder.params, "mlp": net.mlp.params}


def _copy_groups(groups):
    return {g: {p: arr.copy() for p, arr in d.items()} for g, d in groups.items()}


def train(net: Denoiser, data: TrainData, cfg: TrainConfig, schedule: NoiseSchedule,
          model=None, start_iteration=0, ema=None, stats=None) -> TrainResult:
    """Plain-SGD training loop; deterministic for a fixed seed.

    Resuming continues the same per-iteration noise streams, so a split run
    reproduces an unbroken loss curve.
    """
    if stats is None:
        stats = normalization_stats(data.poses)
    params = _params_of(net)
    if ema is None:
        ema = _copy_groups(params)
    loss_rows = []
    it = start_iteration
    for it in range(start_iteration, cfg.iterations):
        rng = make_rng(cfg.seed, "train-step", it)
        total, parts, grads = loss_padg(net, data, schedule, cfg, model=model,
                                        stats=stats, rng=rng)
        if total > 1e6:
            raise TrainingDiverged(f"loss {total:.3e} exceeded divergence bound at iteration {it}")
        grads = _clip_global(grads, cfg.grad_clip)
        for gname, gdict in grads.items():
            target = params[gname]
            for pname, arr in gdict.items():
                target[pname] -= cfg.learning_rate * arr
        d = cfg.ema_decay
        for gname, gdict in params.items():
            for pname, arr in gdict.items():
                ema[gname][pname] *= d
                ema[gname][pname] += (1.0 - d) * arr
        loss_rows.append((it, parts["L_simple"], parts["L_SPF"], parts["L_ERF"],
                          parts["L_SRF"], parts["total"]))
    return TrainResult(net, ema, stats, loss_rows, it + 1 if cfg.iterations > start_iteration else start_iteration)


# ---------------------------------------------------------------------------
# checkpoint container: deterministic versioned binary (magic + JSON header +
# raw float64 payload). Re-saving identical state is byte-identical.

_MAGIC = b"DGFCKPT1"


def save_checkpoint(path, net: Denoiser, ema, stats, config_echo, iteration):
    mean, std = stats
    params = _params_of(net)
    groups = {"params.enc": params["enc"], "params.mlp": params["mlp"],
              "ema.enc": ema["enc"], "ema.mlp": ema["mlp"],
              "norm": {"mean": np.asarray(mean, dtype=np.float64),
                       "std": np.asarray(std, dtype=np.float64)}}
    arrays = []
    payload = []
    for gname in sorted(groups):
        for pname in sorted(groups[gname]):
            arr = np.ascontiguousarray(groups[gname][pname], dtype=np.float64)
            arrays.append({"group": gname, "name": pname, "shape": list(arr.shape)})
            payload.append(arr.tobytes())
    header = {
        "version": 1,
        "pose_dim": net.pose_dim,
        "iteration": int(iteration),
        "net": {"hidden": list(net.config.hidden), "time_dim": net.config.time_dim,
                "encoder_widths": list(net.config.encoder_widths),
                "point_scale": net.config.point_scale, "sem_dim": net.config.sem_dim},
        "arrays": arrays,
        "config": config_echo,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for chunk in payload:
            f.write(chunk)


@dataclass
class Checkpoint:
    net: Denoiser
    ema: dict
    stats: tuple
    config: dict
    iteration: int

    def ema_net(self):
        """Denoiser wired to the EMA parameter copy."""
        clone = Denoiser.init(self.net.config, self.net.pose_dim, seed=0)
        clone.encoder.params = {k: v.copy() for k, v in self.ema["enc"].items()}
        clone.mlp.params = {k: v.copy() for k, v in self.ema["mlp"].items()}
        return clone


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a dgforge checkpoint")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        groups = {}
        for meta in header["arrays"]:
            size = int(np.prod(meta["shape"])) if meta["shape"] else 1
            buf = f.read(size * 8)
            arr = np.frombuffer(buf, dtype=np.float64).reshape(meta["shape"]).copy()
            groups.setdefault(meta["group"], {})[meta["name"]] = arr
    ncfg = NetConfig(hidden=tuple(header["net"]["hidden"]),
                     time_dim=header["net"]["time_dim"],
                     encoder_widths=tuple(header["net"]["encoder_widths"]),
                     point_scale=header["net"]["point_scale"],
                     sem_dim=header["net"]["sem_dim"])
    net = Denoiser.init(ncfg, header["pose_dim"], seed=0)
    net.encoder.params = groups["params.enc"]
    net.mlp.params = groups["params.mlp"]
    ema = {"enc": groups["ema.enc"], "mlp": groups["ema.mlp"]}
    stats = (groups["norm"]["mean"], groups["norm"]["std"])
    return Checkpoint(net, ema, stats, header.get("config", {}), header["iteration"])
