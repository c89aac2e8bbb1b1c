"""
Layer-to-crossbar mapping components for l2l-pcm.
"""

from l2l_pcm.deploy.deployment import Deployment, layer_matrix
from l2l_pcm.deploy.im2col import Im2colBuffer, col2im, im2col
from l2l_pcm.deploy.placement import (
    FragmentEntry,
    LayerSpec,
    PlacementPlan,
    cnn_layers,
    conv_layer,
    dense_layer,
    plan_placement,
)

__all__ = [
    "Deployment",
    "layer_matrix",
    "Im2colBuffer",
    "im2col",
    "col2im",
    "FragmentEntry",
    "LayerSpec",
    "PlacementPlan",
    "cnn_layers",
    "conv_layer",
    "dense_layer",
    "plan_placement",
]
