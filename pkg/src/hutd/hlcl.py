"""Hybrid-level contrastive learning: norm-bounded adversarial spectral
augmentation from a pretrained autoencoder, the instance-level stop-gradient
objective on unreliable pixels, and the prototype-level alignment + InfoNCE
objective on reliable clusters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad
from .grad import Node, backward, constant, cosine_lr, sgd_step, stop_gradient
from .nets import Augmenter, NetworkBundle
from .rgc import RefinedSplit


class AugmentError(Exception):
    pass


# ---------------------------------------------------------------------------
# Autoencoder pretraining


def reconstruction_loss(augmenter: Augmenter, batch: np.ndarray) -> Node:
    """Mean over the batch of per-pixel L2 reconstruction error."""
    x = constant(batch)
    z = augmenter.encode(x)
    residual = grad.sub(augmenter.decode(z), x)
    return grad.mean(grad.l2_norm(residual, axis=1))


def pretrain_autoencoder(
    augmenter: Augmenter,
    samples: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int = 256,
    seed: int = 0,
    lr_min: float | None = None,
) -> list:
    """Minimize mean reconstruction error by minibatch SGD with a cosine
    learning-rate schedule; returns the per-epoch loss trace (last entry is
    the final loss). Marks the augmenter trained and records the value cap
    used to clamp augmented reflectances (1.5 x data max).
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 1:
        raise AugmentError("pretraining needs a (n, bands) sample matrix")
    if lr_min is None:
        lr_min = lr * 1e-4
    rng = np.random.default_rng([seed, 11])
    n = samples.shape[0]
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_lr = cosine_lr(epoch, lr, lr_min, max(epochs, 1))
        losses = []
        for start in range(0, n, batch_size):
            batch = samples[order[start : start + batch_size]]
            augmenter.params.zero_grads()
            loss = reconstruction_loss(augmenter, batch)
            if not np.isfinite(loss.values):
                raise AugmentError(
                    f"autoencoder diverged at epoch {epoch}: loss={loss.values}"
                )
            backward(loss)
            sgd_step(augmenter.params, epoch_lr)
            losses.append(float(loss.values))
        trace.append(float(np.mean(losses)))
    augmenter.value_cap = 1.5 * float(samples.max())
    augmenter.trained = True
    return trace


# ---------------------------------------------------------------------------
# Adversarial augmentation


def _attack_objective(augmenter: Augmenter, x: np.ndarray, delta: Node) -> Node:
    """J(delta) summed over rows: feature displacement minus reconstruction
    error of the perturbed input, both against the frozen autoencoder."""
    x_node = constant(x)
    x_plus = grad.add(x_node, delta)
    z_plus = augmenter.encode(x_plus)
    z_base = constant(augmenter.encode_np(x))
    displacement = grad.l2_norm(grad.sub(z_plus, z_base), axis=1)
    recon = grad.l2_norm(grad.sub(augmenter.decode(z_plus), x_node), axis=1)
    return grad.sum_(grad.sub(displacement, recon))


def _attack_gradient(augmenter: Augmenter, x: np.ndarray, delta_values: np.ndarray) -> np.ndarray:
    delta = grad.parameter(delta_values)
    backward(_attack_objective(augmenter, x, delta))
    out = delta.grad
    augmenter.params.zero_grads()  # attacks must not pollute the frozen weights
    return out


def augment_batch(
    batch: np.ndarray,
    augmenter: Augmenter,
    steps: int | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Emit norm-bounded adversarial views of a (m, bands) batch.

    Deterministic from a zero start by default; with `rng` the attack starts
    from a uniform draw inside the epsilon ball (independent views for
    contrastive training). Outputs are clamped to the valid reflectance range
    [0, value_cap], which can only shrink the perturbation, and the l-inf
    budget is verified on every emitted sample.
    """
    if not augmenter.trained:
        raise AugmentError("augmenter must be pretrained before augmenting")
    eps = augmenter.epsilon
    if eps < 0:
        raise AugmentError("epsilon must be >= 0")
    batch = np.asarray(batch, dtype=np.float64)
    squeeze = batch.ndim == 1
    x = np.atleast_2d(batch)
    if eps == 0.0:
        return batch.copy()

    delta = np.zeros_like(x) if rng is None else rng.uniform(-eps, eps, size=x.shape)
    if augmenter.attack == "fgsm":
        g = _attack_gradient(augmenter, x, delta)
        delta = np.clip(delta + eps * np.sign(g), -eps, eps)
    elif augmenter.attack == "pgd":
        n_steps = steps if steps is not None else augmenter.pgd_steps
        if n_steps < 1:
            raise AugmentError("pgd needs at least one step")
        step_size = 2.0 * eps / n_steps
        for _ in range(n_steps):
            g = _attack_gradient(augmenter, x, delta)
            delta = np.clip(delta + step_size * np.sign(g), -eps, eps)
    else:
        raise AugmentError(f"unknown attack {augmenter.attack!r}")

    out = np.clip(x + delta, 0.0, augmenter.value_cap)
    effective = out - x
    if np.any(np.abs(effective) > eps + 1e-12):
        raise AugmentError("perturbation budget violated")
    return out[0] if squeeze else out


def adversarial_augment(spectrum, augmenter: Augmenter, steps: int | None = None,
                        rng: np.random.Generator | None = None):
    """Spectrum-level wrapper over `augment_batch`."""
    from .scene import Spectrum

    if isinstance(spectrum, Spectrum):
        values = augment_batch(spectrum.values, augmenter, steps=steps, rng=rng)
        return Spectrum(values, spectrum.wavelengths)
    return augment_batch(spectrum, augmenter, steps=steps, rng=rng)


# ---------------------------------------------------------------------------
# Contrastive objectives


def neg_cosine(p: Node, z: Node) -> Node:
    """Negative cosine similarity; per row for 2-D inputs."""
    axis = 1 if p.values.ndim == 2 else None
    return grad.neg(grad.dot(grad.normalize(p, axis=axis), grad.normalize(z, axis=axis)))


def instance_loss_from_views(
    view1: Node, view2: Node, bundle: NetworkBundle, canonical_mirror: bool = False
) -> Node:
    """The symmetrized view-prediction loss given two view nodes.

    The first term is D(project(view1), stopgrad(embed(view2))). By default
    the mirrored term is D(embed(view1), stopgrad(project(view2))), stopping
    the projected branch; `canonical_mirror` uses the usual symmetric form
    D(project(view2), stopgrad(embed(view1))) instead.
    """
    z1 = bundle.encode(view1)
    z2 = bundle.encode(view2)
    p1 = bundle.project_instance(z1)

    first = neg_cosine(p1, stop_gradient(z2))
    if canonical_mirror:
        p2 = bundle.project_instance(z2)
        second = neg_cosine(p2, stop_gradient(z1))
    else:
        p2 = bundle.project_instance(z2)
        second = neg_cosine(z1, stop_gradient(p2))
    return grad.mean(grad.add(grad.scale(first, 0.5), grad.scale(second, 0.5)))


def instance_loss(
    batch: np.ndarray,
    bundle: NetworkBundle,
    augmenter: Augmenter,
    rng: np.random.Generator | None = None,
    canonical_mirror: bool = False,
) -> Node:
    """Instance-level contrastive loss on a batch of unreliable pixel
    spectra: two independently drawn adversarial views per pixel, then the
    symmetrized stop-gradient view-prediction loss."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] == 0:
        raise AugmentError("instance loss needs a nonempty batch")
    view1 = constant(augment_batch(batch, augmenter, rng=rng))
    view2 = constant(augment_batch(batch, augmenter, rng=rng))
    return instance_loss_from_views(view1, view2, bundle, canonical_mirror=canonical_mirror)


@dataclass
class PrototypeSet:
    """Input-space cluster prototypes (exact member means) plus one
    augmented view per prototype."""

    prototypes: np.ndarray  # (t, bands)
    augmented: np.ndarray  # (t, bands)

    @property
    def t(self) -> int:
        return self.prototypes.shape[0]


def build_prototype_set(
    samples: np.ndarray,
    split: RefinedSplit,
    augmenter: Augmenter,
    rng: np.random.Generator | None = None,
) -> PrototypeSet:
    if split.t == 0:
        raise AugmentError("no reliable clusters to build prototypes from")
    protos = np.stack([samples[idx].mean(axis=0) for idx in split.reliable_clusters])
    return PrototypeSet(prototypes=protos, augmented=augment_batch(protos, augmenter, rng=rng))


def prototype_pre_loss_from_nodes(
    members: Node, proto_rows: Node, bundle: NetworkBundle
) -> Node:
    """Mean over members of D(project_c(embed(x)), stopgrad(embed(prototype)));
    the prototype branch is a stationary target."""
    p = bundle.project_cluster(bundle.encode(members))
    z_bar = stop_gradient(bundle.encode(proto_rows))
    return grad.mean(neg_cosine(p, z_bar))


def prototype_pre_loss(
    member_spectra: np.ndarray,
    member_cluster_pos: np.ndarray,
    proto_set: PrototypeSet,
    bundle: NetworkBundle,
) -> Node:
    """Cluster pre-alignment over member spectra, each against its own
    cluster's prototype row."""
    member_spectra = np.atleast_2d(member_spectra)
    if member_spectra.shape[0] == 0:
        raise AugmentError("prototype alignment needs at least one member")
    proto_rows = constant(proto_set.prototypes[np.asarray(member_cluster_pos)])
    return prototype_pre_loss_from_nodes(constant(member_spectra), proto_rows, bundle)


def prototype_infonce(
    proto_set: PrototypeSet,
    bundle: NetworkBundle,
    tau: float = 0.5,
    standard_denominator: bool = False,
) -> Node:
    """Temperature-scaled contrast between prototypes and their augmented
    views on L2-normalized embeddings.

    Default denominator for anchor i sums exp(z_i . z_j / tau) plus every
    positive-pair term exp(z_j . z_j+ / tau) over all j. With
    `standard_denominator` the usual InfoNCE form is used instead: the
    anchor's positive plus its similarities to the other prototypes.
    """
    if tau <= 0:
        raise AugmentError("temperature must be positive")
    if proto_set.t < 2:
        raise AugmentError("prototype contrast needs at least 2 clusters")
    z = grad.normalize(bundle.encode(constant(proto_set.prototypes)), axis=1)
    zp = grad.normalize(bundle.encode(constant(proto_set.augmented)), axis=1)

    pos = grad.exp(grad.scale(grad.dot(z, zp), 1.0 / tau))  # (t,) positive pairs
    sims = grad.exp(grad.scale(grad.matmul(z, grad.transpose(z)), 1.0 / tau))  # (t, t)
    if standard_denominator:
        off_diag = grad.sum_(grad.mul(sims, constant(1.0 - np.eye(proto_set.t))), axis=1)
        denominator = grad.add(off_diag, pos)
    else:
        # every inter-prototype similarity plus every positive-pair term
        denominator = grad.add(grad.sum_(sims, axis=1), grad.sum_(pos))
    return grad.neg(grad.sum_(grad.sub(grad.log(pos), grad.log(denominator))))


def cluster_loss(
    member_spectra: np.ndarray,
    member_cluster_pos: np.ndarray,
    proto_set: PrototypeSet,
    bundle: NetworkBundle,
    tau: float = 0.5,
    standard_denominator: bool = False,
) -> Node:
    """Alignment plus prototype contrast with unit weights. With a single
    reliable cluster there are no negatives, so only the alignment term
    applies."""
    if proto_set.t == 0:
        raise AugmentError("cluster loss needs at least one reliable cluster")
    pre = prototype_pre_loss(member_spectra, member_cluster_pos, proto_set, bundle)
    if proto_set.t < 2:
        return pre
    return grad.add(
        pre, prototype_infonce(proto_set, bundle, tau=tau, standard_denominator=standard_denominator)
    )


# ---------------------------------------------------------------------------
# One training epoch


def train_epoch(
    samples: np.ndarray,
    split: RefinedSplit,
    bundle: NetworkBundle,
    augmenter: Augmenter,
    batch_size: int = 64,
    lr: float = 5e-3,
    weight_decay: float = 1e-4,
    tau: float = 0.5,
    seed: int = 0,
    canonical_mirror: bool = False,
    standard_denominator: bool = False,
    adam_state=None,
) -> dict:
    """One shuffled minibatch pass: instance loss over unreliable pixels and
    cluster loss over reliable-cluster members, summed when both are present
    in a step. Returns mean per-part losses."""
    samples = np.asarray(samples, dtype=np.float64)
    rng = np.random.default_rng([seed, 17])
    u_idx = split.unreliable
    c_members = (
        np.concatenate(split.reliable_clusters) if split.t else np.array([], dtype=np.int64)
    )
    c_pos = (
        np.concatenate(
            [np.full(len(idx), pos, dtype=np.int64) for pos, idx in enumerate(split.reliable_clusters)]
        )
        if split.t
        else np.array([], dtype=np.int64)
    )
    if u_idx.size == 0 and c_members.size == 0:
        raise AugmentError("nothing to train on: both sample pools are empty")

    proto_set = build_prototype_set(samples, split, augmenter, rng=rng) if split.t else None

    u_order = rng.permutation(u_idx.size)
    c_order = rng.permutation(c_members.size)
    n_u_batches = int(np.ceil(u_idx.size / batch_size))
    n_c_batches = int(np.ceil(c_members.size / batch_size))
    steps = max(n_u_batches, n_c_batches)

    instance_vals, cluster_vals = [], []
    for step in range(steps):
        parts = []
        if u_idx.size:
            s = (step % n_u_batches) * batch_size
            batch = samples[u_idx[u_order[s : s + batch_size]]]
            li = instance_loss(batch, bundle, augmenter, rng=rng, canonical_mirror=canonical_mirror)
            instance_vals.append(float(li.values))
            parts.append(li)
        if c_members.size:
            s = (step % n_c_batches) * batch_size
            sel = c_order[s : s + batch_size]
            lc = cluster_loss(
                samples[c_members[sel]], c_pos[sel], proto_set, bundle,
                tau=tau, standard_denominator=standard_denominator,
            )
            cluster_vals.append(float(lc.values))
            parts.append(lc)
        loss = parts[0] if len(parts) == 1 else grad.add(parts[0], parts[1])
        bundle.params.zero_grads()
        backward(loss)
        if adam_state is not None:
            grad.adam_step(bundle.params, adam_state, lr, weight_decay=weight_decay)
        else:
            sgd_step(bundle.params, lr, weight_decay)

    return {
        "instance_loss": float(np.mean(instance_vals)) if instance_vals else float("nan"),
        "cluster_loss": float(np.mean(cluster_vals)) if cluster_vals else float("nan"),
        "steps": steps,
    }
