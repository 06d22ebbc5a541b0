"""Small spectral MLPs: shared encoder, per-level projection heads, the
augmentation autoencoder, and the paired reliability classifiers.

All nets are two affine layers with a ReLU in between (linear output). The
encoder maps a pixel spectrum (B bands) to an embedding; both projection
heads share its architecture shape-wise but never its weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import grad
from .grad import Node, ParamSet


def init_mlp(params: ParamSet, prefix: str, dims: tuple, rng) -> None:
    """Two affine layers dims[0] -> dims[1] -> dims[2], He-scaled init."""
    d_in, d_hidden, d_out = dims
    params.add(f"{prefix}.w1", rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_hidden)))
    params.add(f"{prefix}.b1", np.zeros(d_hidden))
    params.add(f"{prefix}.w2", rng.normal(0.0, np.sqrt(2.0 / d_hidden), size=(d_hidden, d_out)))
    params.add(f"{prefix}.b2", np.zeros(d_out))


def mlp_forward(params: ParamSet, prefix: str, x: Node) -> Node:
    h = grad.relu(grad.add(grad.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return grad.add(grad.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def mlp_forward_np(params: ParamSet, prefix: str, x: np.ndarray) -> np.ndarray:
    """Pure-numpy forward for frozen weights (no graph recording)."""
    h = np.maximum(x @ params[f"{prefix}.w1"].values + params[f"{prefix}.b1"].values, 0.0)
    return h @ params[f"{prefix}.w2"].values + params[f"{prefix}.b2"].values


@dataclass
class NetworkBundle:
    """Encoder F plus the instance-level and cluster-level projection heads.

    One ParamSet holds everything under the prefixes enc / head_i / head_c,
    so a single optimizer step covers the whole bundle.
    """

    bands: int
    hidden: int = 128
    embed: int = 64
    params: ParamSet = field(default_factory=ParamSet)

    @classmethod
    def create(cls, bands: int, hidden: int = 128, embed: int = 64, seed: int = 0):
        bundle = cls(bands=bands, hidden=hidden, embed=embed)
        rng = np.random.default_rng([seed, 101])
        init_mlp(bundle.params, "enc", (bands, hidden, embed), rng)
        init_mlp(bundle.params, "head_i", (embed, embed, embed), rng)
        init_mlp(bundle.params, "head_c", (embed, embed, embed), rng)
        return bundle

    def encode(self, x: Node) -> Node:
        return mlp_forward(self.params, "enc", x)

    def project_instance(self, z: Node) -> Node:
        return mlp_forward(self.params, "head_i", z)

    def project_cluster(self, z: Node) -> Node:
        return mlp_forward(self.params, "head_c", z)

    def encode_np(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward_np(self.params, "enc", np.atleast_2d(x))


@dataclass
class Augmenter:
    """Frozen autoencoder driving norm-bounded adversarial augmentation."""

    bands: int
    hidden: int = 128
    embed: int = 64
    attack: str = "fgsm"  # fgsm | pgd
    epsilon: float = 0.1
    norm_order: float = np.inf
    pgd_steps: int = 10
    value_cap: float = 1.5  # 1.5 x scene max, set at pretraining time
    trained: bool = False
    params: ParamSet = field(default_factory=ParamSet)

    @classmethod
    def create(
        cls,
        bands: int,
        hidden: int = 128,
        embed: int = 64,
        attack: str = "fgsm",
        epsilon: float = 0.1,
        pgd_steps: int = 10,
        seed: int = 0,
    ):
        if epsilon < 0:
            raise grad.GradError("epsilon must be >= 0")
        if attack not in ("fgsm", "pgd"):
            raise grad.GradError(f"unknown attack {attack!r}")
        aug = cls(
            bands=bands, hidden=hidden, embed=embed,
            attack=attack, epsilon=epsilon, pgd_steps=pgd_steps,
        )
        rng = np.random.default_rng([seed, 202])
        init_mlp(aug.params, "enc", (bands, hidden, embed), rng)
        init_mlp(aug.params, "dec", (embed, hidden, bands), rng)
        return aug

    def encode(self, x: Node) -> Node:
        return mlp_forward(self.params, "enc", x)

    def decode(self, z: Node) -> Node:
        return mlp_forward(self.params, "dec", z)

    def encode_np(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward_np(self.params, "enc", np.atleast_2d(x))

    def decode_np(self, z: np.ndarray) -> np.ndarray:
        return mlp_forward_np(self.params, "dec", np.atleast_2d(z))


@dataclass
class ClassifierPair:
    """Two same-architecture classifiers with different initial weights."""

    in_dim: int
    n_classes: int
    hidden: int = 32
    params1: ParamSet = field(default_factory=ParamSet)
    params2: ParamSet = field(default_factory=ParamSet)
    objective_trace: list = field(default_factory=list)

    @classmethod
    def create(cls, in_dim: int, n_classes: int, hidden: int = 32, seed: int = 0,
               init_scale: float = 0.1):
        # small init -> near-uniform outputs, so the label-fit part of the
        # discrepancy objective acts before the disagreement part can
        pair = cls(in_dim=in_dim, n_classes=n_classes, hidden=hidden)
        init_mlp(pair.params1, "cls", (in_dim, hidden, n_classes), np.random.default_rng([seed, 301]))
        init_mlp(pair.params2, "cls", (in_dim, hidden, n_classes), np.random.default_rng([seed, 302]))
        for ps in (pair.params1, pair.params2):
            for name in ps.names():
                if ".w" in name:
                    ps[name].values *= init_scale
        return pair

    def logits(self, which: int, x: Node) -> Node:
        params = self.params1 if which == 1 else self.params2
        return mlp_forward(params, "cls", x)

    def logits_np(self, which: int, x: np.ndarray) -> np.ndarray:
        params = self.params1 if which == 1 else self.params2
        return mlp_forward_np(params, "cls", np.atleast_2d(x))
