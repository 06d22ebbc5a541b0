"""Self-paced alternation: cluster with the reference anchor, filter by
classifier agreement, train the contrastive objectives, re-embed, repeat.
State checkpoints at round boundaries reproduce the remaining rounds exactly
(all randomness is derived statelessly from the run seed and round index).
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import grad
from .config import SplConfig
from .grad import AdamState, cosine_lr, parse_params_at, serialize_params
from .hlcl import pretrain_autoencoder, train_epoch
from .nets import Augmenter, ClassifierPair, NetworkBundle
from .rgc import (
    cluster_with_reference,
    refine_partition,
    reliability_filter,
    train_discrepancy_classifiers,
    transform_features,
)
from .scene import HsiCube, Spectrum


class SplError(Exception):
    pass


def _subseed(base: int, *parts: int) -> int:
    """Stateless per-stage seed derivation (splitmix-style mixing)."""
    x = (int(base) * 0x9E3779B97F4A7C15 + 0xBF58476D1CE4E5B9) % 2**64
    for p in parts:
        x = (x ^ (int(p) + 0x94D049BB133111EB)) * 0xD6E8FEB86659FD93 % 2**64
        x ^= x >> 29
    return int(x % 2**63)


@dataclass
class SplState:
    """Everything needed to finish or rerun a training run."""

    cfg: SplConfig
    bundle: NetworkBundle
    augmenter: Augmenter
    trace: list = field(default_factory=list)  # one dict per completed round
    epoch_metrics: list = field(default_factory=list)  # one dict per epoch
    next_round: int = 1
    adam: AdamState | None = None
    started: float = field(default_factory=time.monotonic)

    def elapsed(self) -> float:
        return time.monotonic() - self.started


def init_state(bands: int, cfg: SplConfig) -> SplState:
    bundle = NetworkBundle.create(
        bands=bands, hidden=cfg.encoder_hidden, embed=cfg.embed_dim,
        seed=_subseed(cfg.seed, 1),
    )
    augmenter = Augmenter.create(
        bands=bands, hidden=cfg.encoder_hidden, embed=cfg.embed_dim,
        attack=cfg.attack, epsilon=cfg.epsilon, pgd_steps=cfg.pgd_steps,
        seed=_subseed(cfg.seed, 2),
    )
    adam = AdamState(bundle.params) if cfg.optimizer == "adam" else None
    return SplState(cfg=cfg, bundle=bundle, augmenter=augmenter, adam=adam)


def run_round(state: SplState, samples: np.ndarray, ref_values: np.ndarray, callback=None) -> dict:
    """One alternation: cluster -> reliability split -> contrastive epochs."""
    cfg = state.cfg
    r = state.next_round
    params_at_round_start = state.bundle.params.copy_values()
    features = transform_features(samples, r, state.bundle)
    # reference feature recomputed with the current encoder, never cached
    ref_feature = transform_features(ref_values[None, :], r, state.bundle)[0]

    partition = cluster_with_reference(
        features, ref_feature, cfg.k, balanced=cfg.balanced,
        seed=_subseed(cfg.seed, r, 21), n_init=cfg.cluster_inits,
    )
    pair = ClassifierPair.create(
        in_dim=features.shape[1], n_classes=cfg.k + 1,
        hidden=cfg.classifier_hidden, seed=_subseed(cfg.seed, r, 22),
    )
    train_discrepancy_classifiers(
        features, partition.pseudo_labels(), pair, steps=cfg.disc_steps, lr=cfg.disc_lr
    )
    flags = reliability_filter(features, pair)
    split = refine_partition(partition, flags, min_cluster_size=cfg.min_cluster_size)

    inst_losses, clus_losses = [], []
    for e in range(cfg.epochs_per_round):
        global_epoch = (r - 1) * cfg.epochs_per_round + e
        lr_e = cosine_lr(global_epoch, cfg.lr, cfg.lr_min, cfg.lr_anneal_epochs)
        metrics = train_epoch(
            samples, split, state.bundle, state.augmenter,
            batch_size=cfg.batch_size, lr=lr_e, weight_decay=cfg.weight_decay,
            tau=cfg.temperature, seed=_subseed(cfg.seed, r, e, 23),
            canonical_mirror=cfg.canonical_mirror,
            standard_denominator=cfg.standard_denominator,
            adam_state=state.adam,
        )
        if np.isfinite(metrics["instance_loss"]):
            inst_losses.append(metrics["instance_loss"])
        if np.isfinite(metrics["cluster_loss"]):
            clus_losses.append(metrics["cluster_loss"])
        state.epoch_metrics.append(
            {
                "epoch": global_epoch,
                "instance_loss": metrics["instance_loss"],
                "cluster_loss": metrics["cluster_loss"],
            }
        )

    row = {
        "round": r,
        "reliable_fraction": float(np.mean(flags)),
        "clusters": split.t,
        "instance_loss": float(np.mean(inst_losses)) if inst_losses else float("nan"),
        "cluster_loss": float(np.mean(clus_losses)) if clus_losses else float("nan"),
        "wall_time_s": state.elapsed(),
    }
    state.trace.append(row)
    state.next_round = r + 1
    if callback is not None:
        callback(
            round=r, features=features, ref_feature=ref_feature,
            partition=partition, split=split, flags=flags, state=state,
            params_at_round_start=params_at_round_start,
        )
    return row


def run_rounds(state: SplState, samples: np.ndarray, ref_values: np.ndarray,
               callback=None, checkpoint_path=None) -> SplState:
    while state.next_round <= state.cfg.rounds:
        run_round(state, samples, ref_values, callback=callback)
        if checkpoint_path is not None:
            checkpoint_round(state, checkpoint_path)
    return state


def run(cube: HsiCube, ref: Spectrum, cfg: SplConfig, callback=None,
        checkpoint_path=None) -> SplState:
    """Full training run on a cube plus reference spectrum."""
    cfg.validate()
    if ref.values.shape[0] != cube.bands:
        raise SplError("reference spectrum band count does not match the cube")
    samples = cube.data.reshape(-1, cube.bands)
    if samples.shape[0] < cfg.k + 1:
        raise SplError("scene has fewer pixels than clusters")
    state = init_state(cube.bands, cfg)
    pretrain_autoencoder(
        state.augmenter, samples, epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr,
        batch_size=cfg.pretrain_batch, seed=_subseed(cfg.seed, 3),
    )
    return run_rounds(state, samples, ref.values, callback=callback,
                      checkpoint_path=checkpoint_path)


def resume_run(state: SplState, cube: HsiCube, ref: Spectrum, callback=None,
               checkpoint_path=None) -> SplState:
    samples = cube.data.reshape(-1, cube.bands)
    return run_rounds(state, samples, ref.values, callback=callback,
                      checkpoint_path=checkpoint_path)


# ---------------------------------------------------------------------------
# Round-boundary persistence


_MAGIC = b"HUTDCKPT"
_VERSION = 1


def _pack_blob(payload: bytes) -> bytes:
    return struct.pack("<Q", len(payload)) + payload


def checkpoint_round(state: SplState, path) -> None:
    meta = {
        "next_round": state.next_round,
        "cfg": asdict(state.cfg),
        "trace": state.trace,
        "epoch_metrics": state.epoch_metrics,
        "bundle": {"bands": state.bundle.bands, "hidden": state.bundle.hidden,
                   "embed": state.bundle.embed},
        "augmenter": {
            "bands": state.augmenter.bands, "hidden": state.augmenter.hidden,
            "embed": state.augmenter.embed, "attack": state.augmenter.attack,
            "epsilon": state.augmenter.epsilon, "pgd_steps": state.augmenter.pgd_steps,
            "value_cap": state.augmenter.value_cap, "trained": state.augmenter.trained,
        },
        "adam_t": state.adam.t if state.adam is not None else None,
    }
    blobs = [
        _MAGIC,
        struct.pack("<I", _VERSION),
        _pack_blob(json.dumps(meta).encode("utf-8")),
        _pack_blob(serialize_params(state.bundle.params)),
        _pack_blob(serialize_params(state.augmenter.params)),
    ]
    if state.adam is not None:
        m = grad.ParamSet()
        v = grad.ParamSet()
        for name in state.bundle.params.names():
            m.add(name, state.adam.m[name])
            v.add(name, state.adam.v[name])
        blobs.append(_pack_blob(serialize_params(m)))
        blobs.append(_pack_blob(serialize_params(v)))
    with open(path, "wb") as fh:
        fh.write(b"".join(blobs))


def _read_blob(data: bytes, offset: int) -> tuple:
    if offset + 8 > len(data):
        raise SplError("truncated checkpoint file")
    (length,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    if offset + length > len(data):
        raise SplError("truncated checkpoint file")
    return data[offset : offset + length], offset + length


def resume(path) -> SplState:
    raw = open(path, "rb").read()
    if raw[:8] != _MAGIC:
        raise SplError("not a training checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != _VERSION:
        raise SplError(f"unsupported checkpoint version {version}")
    offset = 12
    meta_blob, offset = _read_blob(raw, offset)
    try:
        meta = json.loads(meta_blob)
    except json.JSONDecodeError as exc:
        raise SplError("corrupt checkpoint metadata") from exc
    bundle_blob, offset = _read_blob(raw, offset)
    aug_blob, offset = _read_blob(raw, offset)

    cfg = SplConfig(**meta["cfg"])
    b_meta = meta["bundle"]
    bundle = NetworkBundle(bands=b_meta["bands"], hidden=b_meta["hidden"], embed=b_meta["embed"])
    bundle.params, _ = parse_params_at(bundle_blob, 0)
    a_meta = meta["augmenter"]
    augmenter = Augmenter(
        bands=a_meta["bands"], hidden=a_meta["hidden"], embed=a_meta["embed"],
        attack=a_meta["attack"], epsilon=a_meta["epsilon"], pgd_steps=a_meta["pgd_steps"],
        value_cap=a_meta["value_cap"], trained=a_meta["trained"],
    )
    augmenter.params, _ = parse_params_at(aug_blob, 0)

    adam = None
    if meta["adam_t"] is not None:
        m_blob, offset = _read_blob(raw, offset)
        v_blob, offset = _read_blob(raw, offset)
        adam = AdamState(bundle.params)
        m_set, _ = parse_params_at(m_blob, 0)
        v_set, _ = parse_params_at(v_blob, 0)
        adam.m = {k: n.values.copy() for k, n in m_set.items()}
        adam.v = {k: n.values.copy() for k, n in v_set.items()}
        adam.t = meta["adam_t"]

    return SplState(
        cfg=cfg, bundle=bundle, augmenter=augmenter,
        trace=meta["trace"], epoch_metrics=meta["epoch_metrics"],
        next_round=meta["next_round"], adam=adam,
    )


# ---------------------------------------------------------------------------
# Trace / metrics CSV


def write_trace_csv(state: SplState, path) -> None:
    lines = ["round,reliable_fraction,clusters,instance_loss,cluster_loss,wall_time_s"]
    for row in state.trace:
        lines.append(
            f"{row['round']},{row['reliable_fraction']!r},{row['clusters']},"
            f"{row['instance_loss']!r},{row['cluster_loss']!r},{row['wall_time_s']!r}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_metrics_csv(state: SplState, path) -> None:
    lines = ["epoch,instance_loss,cluster_loss"]
    for row in state.epoch_metrics:
        lines.append(f"{row['epoch']},{row['instance_loss']!r},{row['cluster_loss']!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
