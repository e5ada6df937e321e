"""Run configuration, grasp records, dataset manifest, and canonical serialization.

All JSON written by the pipeline uses sorted keys and compact separators so
byte-identical re-runs are possible. Pose records are line-delimited JSON.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .constraints import ConstraintConfig
from .diffusion import make_schedule
from .evaluation import EvalConfig
from .hand import default_hand
from .nets import NetConfig
from .sampler import GuidanceConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


class DatasetError(ValueError):
    pass


DEFAULT_CONFIG = {
    "seed": 0,
    "hand": {},  # overrides for the parametric default hand
    "diffusion": {"T": 100, "beta_start": 1e-3, "beta_end": 0.14},
    "constraints": {
        "spf_threshold": 0.02, "srf_threshold": 0.01, "eta": 1e-8,
        "weights": {"spf": 1.0, "erf": 1.0, "srf": 0.5},
        "spf_fingertips_only": False,
    },
    "guidance": {"mode": "dsg", "strength": 1.0, "guidance_rate": 0.2,
                 "clamp_final": True, "freeze_eps_jacobian": True},
    "train": {"learning_rate": 2e-3, "batch_size": 16, "iterations": 2000,
              "ema_decay": 0.995, "grad_clip": 1.0, "optimizer": "sgd",
              "encoder_points": 256, "loss_cloud_points": 1024, "physics": True},
    "net": {"hidden": [256, 256], "time_dim": 32, "encoder_widths": [64, 128],
            "point_scale": 10.0, "sem_dim": 0},
    "eval": {"contact_epsilon": 0.005, "friction_mu": 0.5, "cone_edges": 8,
             "max_contacts_per_link": 8, "wrench": False},
    "data": {"objects": 50, "grasps_per_object": 10, "cloud_points": 2048,
             "candidates_per_object": 16, "gen_iterations": 300,
             "gen_step": 2e-3, "test_fraction": 0.2},
}


def canonical_dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {path + key!r} must be a mapping")
            out[key] = _merge(base[key], val, path + key + ".")
        else:
            out[key] = val
    return out


@dataclass
class RunConfig:
    """Merged pipeline configuration; round-trips losslessly through JSON."""

    raw: dict

    @classmethod
    def from_dict(cls, overrides=None):
        return cls(_merge(DEFAULT_CONFIG, overrides or {}))

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path):
        with open(path, "w", newline="\n") as f:
            f.write(canonical_dumps(self.raw) + "\n")

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self):
        return int(self.raw["seed"])

    def hand_model(self):
        overrides = {k: v for k, v in self.raw["hand"].items()}
        return default_hand(overrides or None)

    def schedule(self):
        d = self.raw["diffusion"]
        return make_schedule(d["T"], d["beta_start"], d["beta_end"])

    def constraint_config(self):
        c = self.raw["constraints"]
        return ConstraintConfig(
            spf_threshold=c["spf_threshold"], srf_threshold=c["srf_threshold"],
            eta=c["eta"], weight_spf=c["weights"]["spf"],
            weight_erf=c["weights"]["erf"], weight_srf=c["weights"]["srf"],
            spf_fingertips_only=c["spf_fingertips_only"])

    def guidance_config(self, mode=None):
        g = self.raw["guidance"]
        return GuidanceConfig(mode=mode or g["mode"], strength=g["strength"],
                              guidance_rate=g["guidance_rate"],
                              constraints=self.constraint_config(),
                              clamp_final=g["clamp_final"],
                              freeze_eps_jacobian=g["freeze_eps_jacobian"])

    def train_config(self):
        t = self.raw["train"]
        return TrainConfig(learning_rate=t["learning_rate"], batch_size=t["batch_size"],
                           iterations=t["iterations"], constraints=self.constraint_config(),
                           ema_decay=t["ema_decay"], seed=self.seed,
                           grad_clip=t["grad_clip"], optimizer=t["optimizer"],
                           encoder_points=t["encoder_points"],
                           loss_cloud_points=t["loss_cloud_points"],
                           physics=t["physics"])

    def net_config(self):
        n = self.raw["net"]
        return NetConfig(hidden=tuple(n["hidden"]), time_dim=n["time_dim"],
                         encoder_widths=tuple(n["encoder_widths"]),
                         point_scale=n["point_scale"], sem_dim=n["sem_dim"])

    def eval_config(self):
        e = self.raw["eval"]
        return EvalConfig(contact_epsilon=e["contact_epsilon"],
                          friction_mu=e["friction_mu"], cone_edges=e["cone_edges"],
                          max_contacts_per_link=e["max_contacts_per_link"],
                          wrench=e["wrench"])


@dataclass
class GraspRecord:
    object_id: str
    pose: np.ndarray
    split: str
    provenance: str

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(-1)
        if self.split not in ("train", "test"):
            raise DatasetError(f"split must be train or test, got {self.split!r}")

    def to_json(self):
        return canonical_dumps({"object_id": self.object_id,
                                "pose": [float(x) for x in self.pose],
                                "split": self.split, "provenance": self.provenance})

    @classmethod
    def from_json(cls, line, expected_dim=None):
        data = json.loads(line)
        rec = cls(data["object_id"], np.array(data["pose"], dtype=np.float64),
                  data["split"], data.get("provenance", ""))
        if expected_dim is not None and len(rec.pose) != expected_dim:
            raise DatasetError(f"pose length {len(rec.pose)} != expected {expected_dim}")
        return rec


def split_of(object_id, test_fraction=0.2):
    """Stable train/test assignment by hashing the object id."""
    digest = hashlib.blake2b(object_id.encode("utf-8"), digest_size=8).hexdigest()
    return "test" if (int(digest, 16) % 1000) < 1000 * test_fraction else "train"


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_records(path, records):
    with open(path, "w", newline="\n") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")


def read_records(path, expected_dim=None):
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(GraspRecord.from_json(line, expected_dim))
            except (json.JSONDecodeError, KeyError, DatasetError) as exc:
                raise DatasetError(f"{path}:{lineno}: corrupt record ({exc})") from exc
    return records


def write_manifest(path, records_file, objects, config_echo):
    manifest = {
        "version": 1,
        "records_file": records_file.name,
        "records_sha256": sha256_file(records_file),
        "n_records": sum(1 for _ in open(records_file)),
        "objects": objects,  # id -> {"file", "sha256", "split", "kind"}
        "config_echo": config_echo,
    }
    with open(path, "w", newline="\n") as f:
        f.write(canonical_dumps(manifest) + "\n")
    return manifest


def read_manifest(dataset_dir):
    """Load and hash-validate a dataset manifest; returns the manifest dict."""
    manifest_path = dataset_dir / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"{dataset_dir}: no manifest.json")
    with open(manifest_path) as f:
        manifest = json.load(f)
    records_file = dataset_dir / manifest["records_file"]
    if not records_file.exists():
        raise DatasetError(f"{records_file}: records file missing")
    got = sha256_file(records_file)
    if got != manifest["records_sha256"]:
        raise DatasetError(f"{records_file}: sha256 mismatch (manifest "
                           f"{manifest['records_sha256'][:12]}.., file {got[:12]}..)")
    for oid, meta in manifest["objects"].items():
        opath = dataset_dir / meta["file"]
        if not opath.exists():
            raise DatasetError(f"{opath}: object mesh missing")
        if sha256_file(opath) != meta["sha256"]:
            raise DatasetError(f"{opath}: sha256 mismatch for object {oid}")
    return manifest
