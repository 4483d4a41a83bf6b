"""Morph-patch transformer: diffeomorphic morph patches, semantic clustering
attention and topology metrics over a C++ core."""

from ._core import (
    ArgumentError,
    FormatError,
    MPTNet,
    ShapeError,
    cl_dice,
    compose,
    deform_features,
    dice,
    exponentiate,
    generate_phantom,
    grid_sample,
    gradcheck,
    gradcheck_kernels,
    invert,
    jacobian_determinant,
    load_mtk,
    morph_patch_extract,
    save_mtk,
    skeletonize,
    soft_assign,
    soft_assign_gaussian,
    update_cores,
    warp,
)

__all__ = [
    "ArgumentError",
    "FormatError",
    "MPTNet",
    "ShapeError",
    "cl_dice",
    "compose",
    "deform_features",
    "dice",
    "exponentiate",
    "generate_phantom",
    "grid_sample",
    "gradcheck",
    "gradcheck_kernels",
    "invert",
    "jacobian_determinant",
    "load_mtk",
    "morph_patch_extract",
    "save_mtk",
    "skeletonize",
    "soft_assign",
    "soft_assign_gaussian",
    "update_cores",
    "warp",
]
