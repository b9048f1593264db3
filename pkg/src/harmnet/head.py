"""Invariant classifier head.

Rotating the input multiplies each stream by a unit phase and permutes the
patch rows; dropping phase (magnitude) and averaging over patches removes
both, so the produced feature vector — and therefore the logits — is exactly
rotation-invariant at grid angles.  Phase-based orientation readout is out of
scope here.
"""

import numpy as np

import harmnet.ctensor as ct
from harmnet.encoder import PatchStack
from harmnet.errors import ShapeError


def invariant_readout(p: PatchStack) -> ct.CTensor:
    """(B, n, d) streams -> real (B, 3d): per-order magnitudes concatenated
    along the channel axis, then averaged over the n patches."""
    mags = [ct.magnitude(p.streams[m]) for m in p.orders]
    return ct.mean(ct.concat(mags, axis=2), axis=1)


def classify(feat: ct.CTensor, w: ct.CTensor, b: ct.CTensor) -> ct.CTensor:
    """Real affine map (B, F) @ (F, C) + (C,) -> logits (B, C)."""
    if feat.data.shape[-1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[-1]:
        raise ShapeError(
            f"classify shapes do not chain: feat {feat.data.shape}, "
            f"w {w.data.shape}, b {b.data.shape}")
    return ct.add(ct.complex_matmul(feat, w), b)


class Head:
    """Readout + linear classifier with named real parameters."""

    def __init__(self, name, d, classes, rng):
        self.name = name
        self.d = d
        self.classes = classes
        feat = 3 * d
        scale = 1.0 / np.sqrt(feat)
        self.params = {
            f"{name}.w": rng.uniform(-scale, scale, size=(feat, classes)),
            f"{name}.b": np.zeros(classes),
        }

    def forward(self, p: PatchStack, leaves) -> ct.CTensor:
        if p.d != self.d:
            raise ShapeError(f"head expects d={self.d}, got {p.d}")
        feat = invariant_readout(p)
        return classify(feat, leaves[f"{self.name}.w"], leaves[f"{self.name}.b"])
