"""Shared test machinery: an independent triplet-loss objective and a
central finite-difference harness for checking analytic gradients."""

from __future__ import annotations

import numpy as np

from wret.encoder import Backbone, Codebook, Layer, backbone_forward, encode_flat

FD_STEP = 1e-5
# Relative error denominator floor; below this scale finite differences
# are dominated by roundoff, not by the gradient being checked.
REL_GUARD = 1e-6


def named_param_arrays(backbone: Backbone, codebook: Codebook) -> list[tuple[str, np.ndarray]]:
    blocks = []
    for i, layer in enumerate(backbone.layers):
        blocks.append((f"backbone.layer{i}.weight", layer.weight))
        blocks.append((f"backbone.layer{i}.bias", layer.bias))
    blocks.append(("codebook.centers", codebook.centers))
    blocks.append(("codebook.weights", codebook.weights))
    blocks.append(("codebook.bias", codebook.bias))
    return blocks


def rebuild_with(
    backbone: Backbone, codebook: Codebook, block: str, flat_index: int, delta: float
) -> tuple[Backbone, Codebook]:
    """Copy of the models with one parameter entry shifted by delta."""
    layer_params = [
        [layer.weight.copy(), layer.bias.copy(), layer.activation] for layer in backbone.layers
    ]
    cb_params = {
        "centers": codebook.centers.copy(),
        "weights": codebook.weights.copy(),
        "bias": codebook.bias.copy(),
    }
    if block.startswith("backbone.layer"):
        idx = int(block.split("layer")[1].split(".")[0])
        which = 0 if block.endswith("weight") else 1
        arr = layer_params[idx][which]
        arr.flat[flat_index] += delta
    else:
        arr = cb_params[block.split(".")[1]]
        arr.flat[flat_index] += delta
    layers = tuple(Layer(weight=w, bias=b, activation=a) for w, b, a in layer_params)
    return Backbone(layers=layers), Codebook(mode=codebook.mode, **cb_params)


def triplet_objective(
    backbone: Backbone,
    codebook: Codebook,
    inputs: np.ndarray,
    triplets: tuple[tuple[int, int, int], ...],
    margin: float,
) -> float:
    """Mean clamped triplet loss, written independently of the trainer."""
    flat = encode_flat(backbone, codebook, inputs)
    total = 0.0
    for a, p, n in triplets:
        d_ap = float(np.linalg.norm(flat[a] - flat[p]))
        d_an = float(np.linalg.norm(flat[a] - flat[n]))
        total += max(0.0, d_ap - d_an + margin)
    return total / len(triplets)


def well_conditioned(
    backbone: Backbone,
    codebook: Codebook,
    inputs: np.ndarray,
    triplets: tuple[tuple[int, int, int], ...],
    margin: float,
    gap: float = 1e-3,
) -> bool:
    """True when no forward quantity sits within `gap` of a kink, so the
    central difference with FD_STEP stays on one smooth branch."""
    _, cache = backbone_forward(backbone, inputs, return_cache=True)
    for layer, (_, pre) in zip(backbone.layers, cache):
        if layer.activation == "relu" and np.any(np.abs(pre) < gap):
            return False
    z = backbone_forward(backbone, inputs)
    if codebook.mode == "netvlad":
        norms = np.linalg.norm(z, axis=1)
        if np.any(norms < gap):
            return False
        zhat = z / norms[:, None]
        logits = zhat @ codebook.weights.T + codebook.bias
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        alpha = e / e.sum(axis=1, keepdims=True)
        g = alpha[:, :, None] * (zhat[:, None, :] - codebook.centers[None, :, :])
        if np.any(np.linalg.norm(g, axis=2) < gap):
            return False
    flat = encode_flat(backbone, codebook, inputs)
    for a, p, n in triplets:
        d_ap = float(np.linalg.norm(flat[a] - flat[p]))
        d_an = float(np.linalg.norm(flat[a] - flat[n]))
        if d_ap < gap or d_an < gap:
            return False
        if abs(d_ap - d_an + margin) < gap:
            return False
    return True


def random_gradcheck_config(
    seed: int,
) -> tuple[Backbone, Codebook, np.ndarray, tuple[tuple[int, int, int], ...], float] | None:
    """One random small model + triplet set, or None if it lands too close
    to a kink for finite differences."""
    rng = np.random.default_rng(seed)
    d_in = int(rng.integers(2, 5))
    d_out = int(rng.integers(2, 7))
    n_clusters = int(rng.integers(2, 5))
    layers = []
    dims = [d_in, d_out] if rng.random() < 0.5 else [d_in, int(rng.integers(3, 6)), d_out]
    for i, (fi, fo) in enumerate(zip(dims, dims[1:])):
        act = "relu" if i < len(dims) - 2 or rng.random() < 0.5 else "identity"
        layers.append(
            Layer(weight=rng.normal(size=(fo, fi)), bias=rng.normal(size=fo) * 0.5, activation=act)
        )
    backbone = Backbone(layers=tuple(layers))
    mode = "netvlad" if rng.random() < 0.4 else "netrvlad"
    codebook = Codebook(
        centers=rng.normal(size=(n_clusters, d_out)),
        weights=rng.normal(size=(n_clusters, d_out)),
        bias=rng.normal(size=n_clusters) * 0.3,
        mode=mode,
    )
    n_items = 6
    inputs = rng.normal(size=(n_items, d_in))
    # Labels 0,0,0,1,1,1; a fixed valid triplet pattern over them.
    triplets = ((0, 1, 3), (1, 2, 4), (3, 4, 0), (4, 5, 2))
    margin = 0.5
    if not well_conditioned(backbone, codebook, inputs, triplets, margin):
        return None
    return backbone, codebook, inputs, triplets, margin


def max_relative_fd_error(
    backbone: Backbone,
    codebook: Codebook,
    inputs: np.ndarray,
    triplets: tuple[tuple[int, int, int], ...],
    margin: float,
    analytic_blocks: dict[str, np.ndarray],
    step: float = FD_STEP,
) -> float:
    """Largest relative disagreement between analytic gradients and central
    finite differences over every parameter entry."""
    worst = 0.0
    for name, param in named_param_arrays(backbone, codebook):
        analytic = analytic_blocks[name]
        for flat_index in range(param.size):
            bb_p, cb_p = rebuild_with(backbone, codebook, name, flat_index, +step)
            bb_m, cb_m = rebuild_with(backbone, codebook, name, flat_index, -step)
            f_p = triplet_objective(bb_p, cb_p, inputs, triplets, margin)
            f_m = triplet_objective(bb_m, cb_m, inputs, triplets, margin)
            fd = (f_p - f_m) / (2.0 * step)
            an = float(analytic.flat[flat_index])
            rel = abs(fd - an) / max(abs(fd), abs(an), REL_GUARD)
            worst = max(worst, rel)
    return worst
