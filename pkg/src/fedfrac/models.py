"""Desk-scale architectures and encoder/classifier weight plumbing."""

from __future__ import annotations

from .nn import Conv3x3, Dense, Flatten, MaxPool2, ModelSpec, ModelWeights, Relu

FEATURE_DIM = 64


def encoder_spec(input_shape: tuple) -> ModelSpec:
    """Conv trunk + one dense layer mapping images to 64-d features.

    Features are pre-activation (no trailing ReLU): rectified features are
    all-positive and nearly collinear under cosine similarity, which stalls
    the similarity losses right at initialization.
    """
    return ModelSpec(layers=(
        Conv3x3("conv1", 8), Relu("relu1"), MaxPool2("pool1"),
        Conv3x3("conv2", 16), Relu("relu2"), MaxPool2("pool2"),
        Flatten("flat"),
        Dense("fc1", FEATURE_DIM),
    ), input_shape=input_shape)


def classifier_spec(input_shape: tuple, n_classes: int) -> ModelSpec:
    """Encoder plus a classification head (names shared with encoder)."""
    enc = encoder_spec(input_shape)
    return ModelSpec(layers=enc.layers + (Relu("relu3"), Dense("fc2", n_classes)),
                     input_shape=input_shape)


def mlp_spec(input_dim: int, hidden: int, n_classes: int) -> ModelSpec:
    """Small MLP for toy non-image tasks."""
    return ModelSpec(layers=(
        Dense("fc1", hidden), Relu("relu1"), Dense("fc2", n_classes),
    ), input_shape=(input_dim,))


def projector_spec(in_dim: int = FEATURE_DIM, out_dim: int = FEATURE_DIM) -> ModelSpec:
    return ModelSpec(layers=(
        Dense("proj1", out_dim), Relu("proj_relu"), Dense("proj2", out_dim),
    ), input_shape=(in_dim,))


def predictor_spec(dim: int = FEATURE_DIM, bottleneck: int = 16) -> ModelSpec:
    return ModelSpec(layers=(
        Dense("pred1", bottleneck), Relu("pred_relu"), Dense("pred2", dim),
    ), input_shape=(dim,))


def transplant(target: ModelWeights, source: ModelWeights) -> ModelWeights:
    """Copy every source entry into the identically-named target entry."""
    src = dict(source.entries)
    out = []
    for name, arr in target.entries:
        if name in src:
            if src[name].shape != arr.shape:
                raise ValueError(f"shape mismatch transplanting {name}")
            out.append((name, src[name].copy()))
        else:
            out.append((name, arr.copy()))
    return ModelWeights(out)
